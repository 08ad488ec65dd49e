//! Artifact-level behavior of the stage runner and the `tpxcal` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tpxcal::event_model::Units;
use tpxcal::pipeline::{
    analyze, background_from_stream, run, PipelineConfig, Stage, CONFIG_FILE, ETA_CSV_FILE, MANIFEST_FILE, REPORT_FILE,
};
use tpxcal::stream_io::import_image_csv;
use tpxcal::synth::generate_stream;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn small(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.duration_s = 0.02;
    cfg.background_duration_s = 0.02;
    cfg.out_dir = dir.to_path_buf();
    cfg
}

fn tpxcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpxcal")).args(args).env_remove("TPXCAL_THREADS").output().unwrap()
}

#[test]
fn empty_full_run_reports_zero_events() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.pair_rate = 0.0;
    cfg.background_rate = 0.0;
    run(&cfg, Stage::Full, Some(2)).unwrap();
    let report = fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
    assert!(report.lines().any(|l| l == "events=0"), "{report}");
    assert!(report.lines().any(|l| l == "pairs=0"));
}

#[test]
fn separate_stages_equal_full() {
    let staged = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    let cfg = small(staged.path());
    for stage in [Stage::Synth, Stage::Cluster, Stage::Centroid, Stage::Pairs, Stage::Diag, Stage::Efficiency] {
        run(&cfg, stage, None).unwrap();
    }
    run(&small(full.path()), Stage::Full, None).unwrap();

    let a = snapshot(staged.path());
    let b = snapshot(full.path());
    // The config copy names its own out_dir and each manifest its own stage.
    let skip = [CONFIG_FILE, MANIFEST_FILE, REPORT_FILE];
    let names: Vec<_> = a.keys().filter(|k| !skip.contains(&k.as_str())).collect();
    assert!(names.len() >= 14, "{names:?}");
    for name in names {
        assert_eq!(a[name], b[name], "{name} differs");
    }
}

#[test]
fn effective_config_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(&cfg, Stage::Full, None).unwrap();
    let first = snapshot(dir.path());

    let text = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
    let reloaded = PipelineConfig::from_text(&text).unwrap();
    assert_eq!(reloaded, cfg);
    assert_eq!(reloaded.hash(), cfg.hash());

    let saved = dir.path().parent().unwrap().join(format!("{}.cfg", dir.path().file_name().unwrap().to_string_lossy()));
    fs::write(&saved, &text).unwrap();
    let out = tpxcal(&["full", "--config", saved.to_str().unwrap()]);
    fs::remove_file(&saved).unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(&cfg, Stage::Full, Some(1)).unwrap();
    let one = snapshot(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_tpxcal"))
        .args(["full", "--config", "/dev/null", "--out-dir", dir.path().to_str().unwrap()])
        .args(["--duration", "0.02", "--set", "background_duration_s=0.02"])
        .env("TPXCAL_THREADS", "5")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(snapshot(dir.path()), one);
}

#[test]
fn named_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    let out_dir = dir.path().join("out");
    fs::write(&cfg_path, format!("seed = 5\nduration_s = 0.01\nout_dir = {}\n", out_dir.display())).unwrap();
    let out = tpxcal(&["synth", "--config", cfg_path.to_str().unwrap(), "--set", "seed=6", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let effective = PipelineConfig::from_text(&fs::read_to_string(out_dir.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(effective.seed, 7);
    assert_eq!(effective.duration_s, 0.01);
}

#[test]
fn manifest_lists_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(&cfg, Stage::Synth, None).unwrap();
    run(&cfg, Stage::Cluster, None).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains(&format!("config_sha256={}", cfg.hash())), "{manifest}");
    assert!(manifest.contains("events.tpxs"));
    assert!(manifest.contains("clusters.csv"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();

    let bad_key = tpxcal(&["synth", "--out-dir", out_dir, "--set", "no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = tpxcal(&["synth", "--out-dir", out_dir, "--box-xy", "16"]);
    assert_eq!(bad_value.status.code(), Some(2));

    let missing = dir.path().join("missing.tpxs");
    let io = tpxcal(&["cluster", "--out-dir", out_dir, "--input", missing.to_str().unwrap()]);
    assert_eq!(io.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&io.stderr).contains("cluster"));

    let junk = dir.path().join("junk.tpxs");
    fs::write(&junk, b"definitely not an event stream").unwrap();
    let data = tpxcal(&["full", "--out-dir", out_dir, "--input", junk.to_str().unwrap()]);
    assert_eq!(data.status.code(), Some(4));
}

#[test]
fn ingest_runs_on_an_existing_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(&cfg, Stage::Synth, None).unwrap();
    let events = dir.path().join("events.tpxs");
    let out_dir = dir.path().join("ingest");
    let out = tpxcal(&["full", "--input", events.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join(REPORT_FILE)).unwrap();
    assert!(report.contains("cluster_quality=n/a"));
    assert!(!out_dir.join("photons.csv").exists());
}

#[test]
fn efficiency_csv_matches_in_memory_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run(&cfg, Stage::Full, None).unwrap();
    let imported = import_image_csv(fs::File::open(dir.path().join(ETA_CSV_FILE)).unwrap(), Units::Efficiency).unwrap();

    let (stream, _) = generate_stream(&cfg.synth_config().unwrap()).unwrap();
    let (b, _) = generate_stream(&cfg.background_synth_config().unwrap()).unwrap();
    let bg = background_from_stream(&b, &cfg).unwrap();
    let a = analyze(&stream, None, Some(&bg), &cfg).unwrap();
    let eta = &a.efficiency.result.eta;
    assert!(eta.values.iter().any(|&v| v > 0.0));
    let worst = eta.values.iter().zip(&imported.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max abs error {worst}");
}
