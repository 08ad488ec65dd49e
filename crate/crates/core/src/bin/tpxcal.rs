use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tpxcal::pipeline::{run, PipelineConfig, PipelineError, Stage, THREADS_ENV};
use tpxcal::Error;

#[derive(Parser, Debug)]
#[command(name = "tpxcal", version, about = "Intensified Timepix3 calibration from photon-pair data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Worker thread cap; results do not depend on it.
    #[arg(long, env = THREADS_ENV, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true)]
    out_dir: Option<String>,
    /// Existing .tpxs stream to analyze instead of synthesizing one.
    #[arg(long, global = true)]
    input: Option<String>,

    #[arg(long, global = true)]
    pair_rate: Option<String>,
    #[arg(long, global = true)]
    duration: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    background_rate: Option<String>,
    #[arg(long, global = true)]
    efficiency_truth: Option<String>,
    /// Seconds of pump-blocked data to synthesize for background singles.
    #[arg(long, global = true)]
    background_duration: Option<String>,
    /// Existing pump-blocked .tpxs stream for background singles.
    #[arg(long, global = true)]
    background_input: Option<String>,

    #[arg(long, global = true)]
    box_xy: Option<String>,
    #[arg(long, global = true)]
    box_t_ns: Option<String>,
    #[arg(long, global = true)]
    lookahead: Option<String>,

    /// mean, center, min-toa or max-tot.
    #[arg(long, global = true)]
    toa_method: Option<String>,

    /// Analysis beam center: auto or `x,y`.
    #[arg(long, global = true)]
    center: Option<String>,
    #[arg(long, global = true)]
    dtoa_ns: Option<String>,
    #[arg(long, global = true)]
    sigma_xy: Option<String>,
    /// x or y.
    #[arg(long, global = true)]
    axis: Option<String>,

    #[arg(long, global = true)]
    radius_px: Option<String>,
    #[arg(long, global = true)]
    denom_floor: Option<String>,
    #[arg(long, global = true)]
    dead_zone_px: Option<String>,
    #[arg(long, global = true)]
    field_radius_px: Option<String>,
    #[arg(long, global = true)]
    transmission: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic event stream with ground truth.
    Synth,
    /// Group raw events into clusters.
    Cluster,
    /// Reduce clusters to centroids.
    Centroid,
    /// Exclusive coincidence pairing and the timing histogram.
    Pairs,
    /// Position-correlation diagnostic.
    Diag,
    /// Per-pixel efficiency map.
    Efficiency,
    /// Every stage in order, plus a summary report.
    Full,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Self::Synth => Stage::Synth,
            Self::Cluster => Stage::Cluster,
            Self::Centroid => Stage::Centroid,
            Self::Pairs => Stage::Pairs,
            Self::Diag => Stage::Diag,
            Self::Efficiency => Stage::Efficiency,
            Self::Full => Stage::Full,
        }
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let cfg_err = |e: Error| PipelineError::new("config", e);
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::new("config", e.into()))?;
        cfg.apply_text(&text).map_err(cfg_err)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| cfg_err(Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))))?;
        cfg.set(k, v).map_err(cfg_err)?;
    }
    let named = [
        ("out_dir", &cli.out_dir),
        ("input", &cli.input),
        ("pair_rate", &cli.pair_rate),
        ("duration_s", &cli.duration),
        ("seed", &cli.seed),
        ("background_rate", &cli.background_rate),
        ("efficiency_truth", &cli.efficiency_truth),
        ("background_duration_s", &cli.background_duration),
        ("background_input", &cli.background_input),
        ("box_xy", &cli.box_xy),
        ("box_t_ns", &cli.box_t_ns),
        ("lookahead", &cli.lookahead),
        ("toa_method", &cli.toa_method),
        ("center", &cli.center),
        ("dtoa_ns", &cli.dtoa_ns),
        ("sigma_xy_px", &cli.sigma_xy),
        ("axis", &cli.axis),
        ("radius_px", &cli.radius_px),
        ("denom_floor", &cli.denom_floor),
        ("dead_zone_px", &cli.dead_zone_px),
        ("field_radius_px", &cli.field_radius_px),
        ("transmission", &cli.transmission),
    ];
    for (key, value) in named {
        if let Some(v) = value {
            cfg.set(key, v).map_err(cfg_err)?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(&cli).and_then(|cfg| run(&cfg, cli.command.stage(), cli.threads));
    match result {
        Ok(summary) => {
            for line in summary.lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tpxcal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
