//! Monte-Carlo checks of the synthetic source against its own configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpxcal::centroiding::{centroid_stream, ToaMethod};
use tpxcal::clustering::{identify_clusters_par, ClusterParams};
use tpxcal::efficiency::{estimate_beam_center, singles_image};
use tpxcal::event_model::BeamCenter;
use tpxcal::synth::{generate_stream, intensify, uniform_efficiency, BeamProfile, EventLabel, SynthConfig};

fn quiet(cfg: SynthConfig) -> SynthConfig {
    SynthConfig { background_rate: 0.0, ..cfg }
}

#[test]
fn flash_rms_matches_psf() {
    let cfg = SynthConfig { psf_sigma_px: 2.0, ..SynthConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sum2, mut n) = (0.0, 0usize);
    for _ in 0..10_000 {
        let x = rng.random_range(40.0..216.0);
        let y = rng.random_range(40.0..216.0);
        for e in intensify(x, y, 1000.0, &cfg, &mut rng) {
            sum2 += (f64::from(e.x) - x).powi(2) + (f64::from(e.y) - y).powi(2);
            n += 1;
        }
    }
    // Per-axis RMS of distinct member pixels about the true position.
    let rms = (sum2 / (2 * n) as f64).sqrt();
    assert!((rms - 2.0).abs() <= 0.1, "rms {rms}");
}

#[test]
fn ring_radius_recovered_from_centroids() {
    let r0 = 50.0;
    let cfg = quiet(SynthConfig {
        beam: BeamProfile::Ring { r0, sigma_r: 4.0 },
        anticorrelation_sigma: 1.0,
        duration: 0.05,
        ..SynthConfig::default()
    });
    let (stream, _) = generate_stream(&cfg).unwrap();
    let clusters = identify_clusters_par(&stream, &ClusterParams::default()).unwrap();
    let centroids = centroid_stream(&clusters, ToaMethod::MaxTot).unwrap();
    let c = cfg.beam_center;
    let mut radii: Vec<f64> =
        centroids.iter().map(|p| (f64::from(p.x) - c.cx).hypot(f64::from(p.y) - c.cy)).collect();
    radii.sort_by(f64::total_cmp);
    let median = radii[radii.len() / 2];
    assert!(radii.len() > 1000);
    assert!((median - r0).abs() <= 1.0, "median radius {median}");
}

#[test]
fn beam_center_estimate_within_half_pixel() {
    // A ring that stays on the sensor; a beam clipped by the sensor edge
    // pulls the intensity centroid toward the middle.
    let truth = BeamCenter::new(128.0, 128.0);
    let cfg = SynthConfig {
        beam_center: truth,
        beam: BeamProfile::Ring { r0: 50.0, sigma_r: 10.0 },
        duration: 0.05,
        ..SynthConfig::default()
    };
    let (stream, _) = generate_stream(&cfg).unwrap();
    let clusters = identify_clusters_par(&stream, &ClusterParams::default()).unwrap();
    let centroids = centroid_stream(&clusters, ToaMethod::MaxTot).unwrap();
    let est = estimate_beam_center(&singles_image(&centroids, stream.duration)).unwrap();
    assert!((est.cx - truth.cx).abs() <= 0.5 && (est.cy - truth.cy).abs() <= 0.5, "{est:?}");
}

#[test]
fn raw_event_count_is_order_1e7_per_25s() {
    // A 25 s acquisition scaled from 0.25 s; events are linear in duration.
    let cfg = SynthConfig { duration: 0.25, ..SynthConfig::default() };
    let (stream, _) = generate_stream(&cfg).unwrap();
    let per_25s = stream.len() as f64 * 100.0;
    let reference = 1.1e7;
    assert!(per_25s >= reference / 10.0 && per_25s <= reference * 10.0, "{per_25s:e} raw events per 25 s");
}

#[test]
fn detected_fraction_converges_to_truth() {
    let eta = 0.3;
    let cfg = quiet(SynthConfig {
        efficiency_truth: uniform_efficiency(eta),
        pair_rate: 2.0e5,
        duration: 0.1,
        beam: BeamProfile::Ring { r0: 0.0, sigma_r: 30.0 },
        ..SynthConfig::default()
    });
    let (_, truth) = generate_stream(&cfg).unwrap();
    let n = truth.photons.len() as f64;
    let p = truth.detected_photons() as f64 / n;
    let sigma = (eta * (1.0 - eta) / n).sqrt();
    assert!((p - eta).abs() <= 4.0 * sigma, "fraction {p} vs {eta} (sigma {sigma})");
}

#[test]
fn coincidences_over_singles_track_efficiency() {
    let eta = 0.2;
    let cfg = quiet(SynthConfig {
        efficiency_truth: uniform_efficiency(eta),
        beam: BeamProfile::Ring { r0: 0.0, sigma_r: 40.0 },
        duration: 0.1,
        ..SynthConfig::default()
    });
    let (_, truth) = generate_stream(&cfg).unwrap();
    let ratio = 2.0 * truth.detected_pairs() as f64 / truth.detected_photons() as f64;
    // Partners that land off the sensor are never detected.
    assert!(ratio <= eta * 1.02 && ratio >= eta * 0.9, "C/S = {ratio}");
}

#[test]
fn truth_labels_are_consistent() {
    let cfg = SynthConfig { duration: 0.01, ..SynthConfig::default() };
    let (stream, truth) = generate_stream(&cfg).unwrap();
    assert_eq!(truth.event_labels.len(), stream.len());
    for label in &truth.event_labels {
        if let EventLabel::Photon(id) = label {
            assert!(truth.photons[*id as usize].detected);
        }
    }
    let mut per_pair = std::collections::HashMap::<u32, usize>::new();
    for p in &truth.photons {
        if let Some(pair) = p.pair {
            *per_pair.entry(pair).or_default() += 1;
        }
    }
    assert!(per_pair.values().all(|&n| n == 2));
    assert!(truth.photons.chunks(2).filter(|c| c.len() == 2).all(|c| c[0].t_ns == c[1].t_ns));
}

#[test]
fn seeds_are_reproducible_and_distinct() {
    let cfg = SynthConfig { duration: 0.01, ..SynthConfig::default() };
    let (a, _) = generate_stream(&cfg).unwrap();
    let (b, _) = generate_stream(&cfg).unwrap();
    let (c, _) = generate_stream(&SynthConfig { rng_seed: 2, ..cfg }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.events, c.events);
}
