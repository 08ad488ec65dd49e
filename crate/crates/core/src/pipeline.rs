//! Stage orchestration: synth, cluster, centroid, pairs, diag, efficiency.
//!
//! Every stage reads its inputs from the artifact directory (or memory, for
//! `full`) and writes plain-text or binary artifacts next to a copy of the
//! effective configuration and a manifest of hashes. Running the stages one
//! by one yields the same artifacts as `full`.

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::centroiding::{centroid_stream, ToaMethod};
use crate::clustering::{cluster_quality, identify_clusters_par, ClusterParams, ClusterQuality};
use crate::coincidence::{
    correlation_hist, find_pairs, fwhm, split_sensor_dtoa, temporal_resolution, Axis, CorrHist2D, DtoaHistogram,
    DtoaHistogramConfig, PairWindows,
};
use crate::efficiency::{
    background_coincidence_image, coincidence_image, detector_only_efficiency, efficiency_map, estimate_beam_center,
    masked_stats, singles_image, smooth_image, EfficiencyMetadata, EfficiencyResult, StatsMask,
};
use crate::error::{Error, Result};
use crate::event_model::{BeamCenter, Centroid, Cluster, CoincidencePair, EventStream, PixelImage, RawEvent, Units};
use crate::stream_io::{export_histogram, export_image, import_image_csv, read_stream, write_stream, ImageFormat};
use crate::synth::{generate_stream, uniform_efficiency, BeamProfile, EventLabel, GroundTruth, SynthConfig};

pub const EVENTS_FILE: &str = "events.tpxs";
pub const BACKGROUND_FILE: &str = "background.tpxs";
pub const PHOTONS_FILE: &str = "photons.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const QUALITY_FILE: &str = "quality.txt";
pub const CENTROIDS_FILE: &str = "centroids.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const DTOA_FILE: &str = "dtoa.csv";
pub const TIMING_FILE: &str = "timing.txt";
pub const CORR_FILE: &str = "corr.csv";
pub const DIAG_FILE: &str = "diag.txt";
pub const ETA_CSV_FILE: &str = "eta.csv";
pub const ETA_PGM_FILE: &str = "eta.pgm";
pub const STATS_FILE: &str = "stats.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const CONFIG_FILE: &str = "config.effective";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "TPXCAL_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Cluster,
    Centroid,
    Pairs,
    Diag,
    Efficiency,
    Full,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Self::Synth, Self::Cluster, Self::Centroid, Self::Pairs, Self::Diag, Self::Efficiency, Self::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Cluster => "cluster",
            Self::Centroid => "centroid",
            Self::Pairs => "pairs",
            Self::Diag => "diag",
            Self::Efficiency => "efficiency",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A stage failure, tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

impl PipelineError {
    pub fn new(stage: &'static str, source: Error) -> Self {
        Self { stage, source }
    }

    /// 2 for configuration problems, 3 for I/O failures, 4 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self.source {
            Error::Config(_) | Error::Scale(_) => 2,
            Error::Io(_) => 3,
            _ => 4,
        }
    }
}

/// Source of the per-pixel detection probability used by `synth`.
#[derive(Clone, Debug, PartialEq)]
pub enum EfficiencyTruth {
    Uniform(f64),
    /// 256x256 CSV image.
    File(PathBuf),
}

/// Beam center used by the analysis stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CenterChoice {
    /// Intensity-weighted centroid of the singles image.
    Auto,
    Fixed(BeamCenter),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeamShape {
    Ring,
    Spot,
}

/// Every tunable of the pipeline. Serialized as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub pair_rate: f64,
    pub duration_s: f64,
    pub beam_center: BeamCenter,
    pub beam: BeamShape,
    pub beam_r0_px: f64,
    pub beam_sigma_px: f64,
    pub spot_offset: (f64, f64),
    pub anticorrelation_sigma_px: f64,
    pub efficiency_truth: EfficiencyTruth,
    pub jitter_sigma_ns: f64,
    pub psf_sigma_px: f64,
    pub mean_cluster_size: f64,
    pub timewalk_coeff_ns: f64,
    pub tot_scale: f64,
    pub background_rate: f64,
    pub seed: u64,
    /// Length of a pump-blocked acquisition generated alongside the stream; 0 disables it.
    pub background_duration_s: f64,
    /// Existing pump-blocked `.tpxs` stream used for background singles.
    pub background_input: Option<PathBuf>,

    /// Existing `.tpxs` stream to analyze instead of generating one.
    pub input: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub cluster: ClusterParams,
    pub toa_method: ToaMethod,
    pub center: CenterChoice,
    pub windows: PairWindows,
    pub hist: DtoaHistogramConfig,
    pub axis: Axis,
    pub band_px: f64,
    pub radius_px: f64,
    pub denom_floor: f64,
    pub mask: StatsMask,
    pub transmission: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let (beam_r0_px, beam_sigma_px) = match s.beam {
            BeamProfile::Ring { r0, sigma_r } => (r0, sigma_r),
            BeamProfile::Spot { sigma, .. } => (0.0, sigma),
        };
        Self {
            pair_rate: s.pair_rate,
            duration_s: s.duration,
            beam_center: s.beam_center,
            beam: BeamShape::Ring,
            beam_r0_px,
            beam_sigma_px,
            spot_offset: (40.0, 0.0),
            anticorrelation_sigma_px: s.anticorrelation_sigma,
            efficiency_truth: EfficiencyTruth::Uniform(0.074),
            jitter_sigma_ns: s.jitter_sigma_ns,
            psf_sigma_px: s.psf_sigma_px,
            mean_cluster_size: s.mean_cluster_size,
            timewalk_coeff_ns: s.timewalk_coeff_ns,
            tot_scale: s.tot_scale,
            background_rate: s.background_rate,
            seed: s.rng_seed,
            background_duration_s: 0.0,
            background_input: None,
            input: None,
            out_dir: PathBuf::from("tpxcal-out"),
            cluster: ClusterParams::default(),
            toa_method: ToaMethod::default(),
            center: CenterChoice::Auto,
            windows: PairWindows::default(),
            hist: DtoaHistogramConfig::default(),
            axis: Axis::X,
            band_px: 10.0,
            radius_px: 20.0,
            denom_floor: crate::efficiency::DEFAULT_DENOM_FLOOR,
            mask: StatsMask::default(),
            transmission: crate::efficiency::DEFAULT_OPTICS_TRANSMISSION,
        }
    }
}

/// Documented configuration keys, in serialization order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("pair_rate", "emitted pairs per second"),
    ("duration_s", "acquisition length in seconds"),
    ("beam_center", "true beam center used by synth, `x,y`"),
    ("beam", "first-photon profile: ring or spot"),
    ("beam_r0_px", "ring radius; 0 gives a 2-D Gaussian"),
    ("beam_sigma_px", "ring radial width or spot width"),
    ("spot_offset", "spot position relative to the beam center, `dx,dy`"),
    ("anticorrelation_sigma_px", "per-axis scatter of the partner photon"),
    ("efficiency_truth", "uniform detection probability or path to a 256x256 CSV"),
    ("jitter_sigma_ns", "per-detection timing jitter"),
    ("psf_sigma_px", "flash width"),
    ("mean_cluster_size", "expected pixel hits per flash"),
    ("timewalk_coeff_ns", "time-walk delay at ToT = 1"),
    ("tot_scale", "ToT ticks at unit flash density"),
    ("background_rate", "uncorrelated flashes per second"),
    ("seed", "random seed"),
    ("background_duration_s", "pump-blocked acquisition length generated by synth; 0 disables"),
    ("background_input", "existing pump-blocked .tpxs stream for background singles"),
    ("input", "existing .tpxs stream to analyze instead of synthesizing"),
    ("out_dir", "artifact directory"),
    ("box_xy", "cluster box width in pixels, odd"),
    ("box_t_ns", "cluster time window"),
    ("lookahead", "events compared against each cluster seed"),
    ("toa_method", "mean, center, min-toa or max-tot"),
    ("center", "analysis beam center: auto or `x,y`"),
    ("dtoa_ns", "coincidence time window"),
    ("sigma_xy_px", "coincidence anti-correlation window"),
    ("hist_bin_ns", "arrival-difference histogram bin width"),
    ("hist_range_ns", "arrival-difference histogram half range"),
    ("axis", "correlation histogram axis: x or y"),
    ("band_px", "half width of the diagonal and anti-diagonal bands"),
    ("radius_px", "singles smoothing radius"),
    ("denom_floor", "minimum smoothed singles rate for a valid pixel, cps"),
    ("dead_zone_px", "side of the central square excluded from masked statistics"),
    ("field_radius_px", "intensifier field radius for masked statistics"),
    ("transmission", "optics transmission removed for the detector-only efficiency"),
];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_xy(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v.split_once(',').ok_or_else(|| Error::Config(format!("{key}: expected `x,y`, got {v:?}")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

impl PipelineConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "pair_rate" => self.pair_rate = parse_num(key, v)?,
            "duration_s" => self.duration_s = parse_num(key, v)?,
            "beam_center" => {
                let (x, y) = parse_xy(key, v)?;
                self.beam_center = BeamCenter::new(x, y);
            }
            "beam" => {
                self.beam = match v {
                    "ring" => BeamShape::Ring,
                    "spot" => BeamShape::Spot,
                    _ => return Err(Error::Config(format!("beam must be ring or spot, got {v:?}"))),
                }
            }
            "beam_r0_px" => self.beam_r0_px = parse_num(key, v)?,
            "beam_sigma_px" => self.beam_sigma_px = parse_num(key, v)?,
            "spot_offset" => self.spot_offset = parse_xy(key, v)?,
            "anticorrelation_sigma_px" => self.anticorrelation_sigma_px = parse_num(key, v)?,
            "efficiency_truth" => {
                self.efficiency_truth = match v.parse::<f64>() {
                    Ok(eta) => EfficiencyTruth::Uniform(eta),
                    Err(_) => EfficiencyTruth::File(PathBuf::from(v)),
                }
            }
            "jitter_sigma_ns" => self.jitter_sigma_ns = parse_num(key, v)?,
            "psf_sigma_px" => self.psf_sigma_px = parse_num(key, v)?,
            "mean_cluster_size" => self.mean_cluster_size = parse_num(key, v)?,
            "timewalk_coeff_ns" => self.timewalk_coeff_ns = parse_num(key, v)?,
            "tot_scale" => self.tot_scale = parse_num(key, v)?,
            "background_rate" => self.background_rate = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "background_duration_s" => self.background_duration_s = parse_num(key, v)?,
            "background_input" => self.background_input = (!v.is_empty()).then(|| PathBuf::from(v)),
            "input" => self.input = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "box_xy" => self.cluster.box_xy = parse_num(key, v)?,
            "box_t_ns" => self.cluster.box_t_ns = parse_num(key, v)?,
            "lookahead" => self.cluster.lookahead = parse_num(key, v)?,
            "toa_method" => self.toa_method = v.parse()?,
            "center" => {
                self.center = if v == "auto" {
                    CenterChoice::Auto
                } else {
                    let (x, y) = parse_xy(key, v)?;
                    CenterChoice::Fixed(BeamCenter::new(x, y))
                }
            }
            "dtoa_ns" => self.windows.dtoa_ns = parse_num(key, v)?,
            "sigma_xy_px" => self.windows.sigma_xy_px = parse_num(key, v)?,
            "hist_bin_ns" => self.hist.bin_width_ns = parse_num(key, v)?,
            "hist_range_ns" => self.hist.range_ns = parse_num(key, v)?,
            "axis" => self.axis = v.parse()?,
            "band_px" => self.band_px = parse_num(key, v)?,
            "radius_px" => self.radius_px = parse_num(key, v)?,
            "denom_floor" => self.denom_floor = parse_num(key, v)?,
            "dead_zone_px" => self.mask.dead_zone_px = parse_num(key, v)?,
            "field_radius_px" => self.mask.field_radius_px = parse_num(key, v)?,
            "transmission" => self.transmission = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        let xy = |(x, y): (f64, f64)| format!("{x},{y}");
        match key {
            "pair_rate" => self.pair_rate.to_string(),
            "duration_s" => self.duration_s.to_string(),
            "beam_center" => xy((self.beam_center.cx, self.beam_center.cy)),
            "beam" => match self.beam {
                BeamShape::Ring => "ring".into(),
                BeamShape::Spot => "spot".into(),
            },
            "beam_r0_px" => self.beam_r0_px.to_string(),
            "beam_sigma_px" => self.beam_sigma_px.to_string(),
            "spot_offset" => xy(self.spot_offset),
            "anticorrelation_sigma_px" => self.anticorrelation_sigma_px.to_string(),
            "efficiency_truth" => match &self.efficiency_truth {
                EfficiencyTruth::Uniform(eta) => eta.to_string(),
                EfficiencyTruth::File(p) => p.display().to_string(),
            },
            "jitter_sigma_ns" => self.jitter_sigma_ns.to_string(),
            "psf_sigma_px" => self.psf_sigma_px.to_string(),
            "mean_cluster_size" => self.mean_cluster_size.to_string(),
            "timewalk_coeff_ns" => self.timewalk_coeff_ns.to_string(),
            "tot_scale" => self.tot_scale.to_string(),
            "background_rate" => self.background_rate.to_string(),
            "seed" => self.seed.to_string(),
            "background_duration_s" => self.background_duration_s.to_string(),
            "background_input" => self.background_input.as_ref().map_or_else(String::new, |p| p.display().to_string()),
            "input" => self.input.as_ref().map_or_else(String::new, |p| p.display().to_string()),
            "out_dir" => self.out_dir.display().to_string(),
            "box_xy" => self.cluster.box_xy.to_string(),
            "box_t_ns" => self.cluster.box_t_ns.to_string(),
            "lookahead" => self.cluster.lookahead.to_string(),
            "toa_method" => self.toa_method.to_string(),
            "center" => match self.center {
                CenterChoice::Auto => "auto".into(),
                CenterChoice::Fixed(c) => xy((c.cx, c.cy)),
            },
            "dtoa_ns" => self.windows.dtoa_ns.to_string(),
            "sigma_xy_px" => self.windows.sigma_xy_px.to_string(),
            "hist_bin_ns" => self.hist.bin_width_ns.to_string(),
            "hist_range_ns" => self.hist.range_ns.to_string(),
            "axis" => match self.axis {
                Axis::X => "x".into(),
                Axis::Y => "y".into(),
            },
            "band_px" => self.band_px.to_string(),
            "radius_px" => self.radius_px.to_string(),
            "denom_floor" => self.denom_floor.to_string(),
            "dead_zone_px" => self.mask.dead_zone_px.to_string(),
            "field_radius_px" => self.mask.field_radius_px.to_string(),
            "transmission" => self.transmission.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Effective configuration with every key resolved, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{k} = {}", self.value_of(k));
        }
        out
    }

    /// SHA-256 of [`PipelineConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.windows.validate()?;
        if !(self.hist.bin_width_ns > 0.0 && self.hist.range_ns >= self.hist.bin_width_ns) {
            return Err(Error::Config("histogram needs bin width > 0 and range >= bin width".into()));
        }
        if !(self.radius_px >= 1.0) {
            return Err(Error::Config(format!("radius_px must be >= 1, got {}", self.radius_px)));
        }
        if !(self.band_px >= 0.0 && self.denom_floor > 0.0) {
            return Err(Error::Config("band_px must be >= 0 and denom_floor > 0".into()));
        }
        if !(self.mask.dead_zone_px >= 0.0 && self.mask.field_radius_px > 0.0) {
            return Err(Error::Config("mask sizes must be non-negative".into()));
        }
        if !(self.transmission > 0.0 && self.transmission <= 1.0) {
            return Err(Error::Config(format!("transmission must be in (0, 1], got {}", self.transmission)));
        }
        if !(self.background_duration_s >= 0.0 && self.background_duration_s.is_finite()) {
            return Err(Error::Config(format!("background_duration_s must be >= 0, got {}", self.background_duration_s)));
        }
        if let EfficiencyTruth::Uniform(eta) = self.efficiency_truth {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Config(format!("efficiency_truth must lie in [0, 1], got {eta}")));
            }
        }
        Ok(())
    }

    /// Generator settings, loading the efficiency image if it is a file.
    pub fn synth_config(&self) -> Result<SynthConfig> {
        let efficiency_truth = match &self.efficiency_truth {
            EfficiencyTruth::Uniform(eta) => uniform_efficiency(*eta),
            EfficiencyTruth::File(p) => import_image_csv(File::open(p)?, Units::Efficiency)?,
        };
        let beam = match self.beam {
            BeamShape::Ring => BeamProfile::Ring { r0: self.beam_r0_px, sigma_r: self.beam_sigma_px },
            BeamShape::Spot => BeamProfile::Spot { offset: self.spot_offset, sigma: self.beam_sigma_px },
        };
        let cfg = SynthConfig {
            pair_rate: self.pair_rate,
            duration: self.duration_s,
            beam_center: self.beam_center,
            beam,
            anticorrelation_sigma: self.anticorrelation_sigma_px,
            efficiency_truth,
            jitter_sigma_ns: self.jitter_sigma_ns,
            psf_sigma_px: self.psf_sigma_px,
            mean_cluster_size: self.mean_cluster_size,
            timewalk_coeff_ns: self.timewalk_coeff_ns,
            tot_scale: self.tot_scale,
            background_rate: self.background_rate,
            rng_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generator settings for the pump-blocked acquisition: no pairs, the
    /// same background rate and a seed distinct from the main stream.
    pub fn background_synth_config(&self) -> Result<SynthConfig> {
        let mut cfg = self.synth_config()?;
        cfg.pair_rate = 0.0;
        cfg.duration = self.background_duration_s;
        cfg.rng_seed = self.seed ^ BACKGROUND_SEED_MASK;
        cfg.validate()?;
        Ok(cfg)
    }
}

const BACKGROUND_SEED_MASK: u64 = 0x9e37_79b9_7f4a_7c15;

// ---------------------------------------------------------------------------
// in-memory stages

/// Arrival-time-difference histogram and the widths derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub hist: DtoaHistogram,
    /// `None` when the histogram is empty or has no clean half-maximum crossing.
    pub fwhm_ns: Option<f64>,
    pub resolution_ns: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencySummary {
    pub result: EfficiencyResult,
    pub masked_mean: f64,
    pub masked_std: f64,
    pub detector_only_mean: f64,
    /// Summed coincidence image, cps.
    pub c_total: f64,
    /// Summed accidental-coincidence image, cps.
    pub c_b_total: f64,
}

/// Everything the analysis stages produce from one stream.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub n_events: usize,
    pub duration: f64,
    pub clusters: Vec<Cluster>,
    pub quality: Option<ClusterQuality>,
    pub centroids: Vec<Centroid>,
    pub center: BeamCenter,
    pub center_estimated: bool,
    pub timing: Timing,
    pub pairs: Vec<CoincidencePair>,
    pub corr: CorrHist2D,
    pub efficiency: EfficiencySummary,
}

pub fn cluster_stage(stream: &EventStream, cfg: &PipelineConfig) -> Result<Vec<Cluster>> {
    identify_clusters_par(stream, &cfg.cluster)
}

pub fn centroid_stage(clusters: &[Cluster], cfg: &PipelineConfig) -> Result<Vec<Centroid>> {
    centroid_stream(clusters, cfg.toa_method)
}

/// Analysis beam center and whether it was estimated from the data. An
/// empty acquisition falls back to the sensor center.
pub fn resolve_center(centroids: &[Centroid], duration: f64, cfg: &PipelineConfig) -> (BeamCenter, bool) {
    match cfg.center {
        CenterChoice::Fixed(c) => (c, false),
        CenterChoice::Auto => match estimate_beam_center(&singles_image(centroids, duration)) {
            Ok(c) => (c, true),
            Err(_) => (BeamCenter::sensor_center(), false),
        },
    }
}

pub fn timing_stage(centroids: &[Centroid], center: BeamCenter, cfg: &PipelineConfig) -> Timing {
    let hist = split_sensor_dtoa(centroids, center, &cfg.hist);
    let fwhm_ns = fwhm(&hist.hist).ok();
    Timing { hist, fwhm_ns, resolution_ns: fwhm_ns.map(temporal_resolution) }
}

pub fn pairs_stage(centroids: &[Centroid], center: BeamCenter, cfg: &PipelineConfig) -> Result<Vec<CoincidencePair>> {
    find_pairs(centroids, &cfg.windows, center)
}

pub fn diag_stage(centroids: &[Centroid], center: BeamCenter, cfg: &PipelineConfig) -> CorrHist2D {
    correlation_hist(centroids, cfg.windows.dtoa_ns, center, cfg.axis, cfg.band_px)
}

/// Centroids of a separate acquisition with the pair source blocked.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub centroids: Vec<Centroid>,
    pub duration: f64,
}

/// Cluster and centroid a background acquisition with the same settings as
/// the main stream.
pub fn background_from_stream(stream: &EventStream, cfg: &PipelineConfig) -> Result<Background> {
    let clusters = cluster_stage(stream, cfg)?;
    Ok(Background { centroids: centroid_stage(&clusters, cfg)?, duration: stream.duration })
}

/// Singles, coincidence and accidental images, and the efficiency map.
/// Without a background acquisition the background singles are zero.
pub fn efficiency_stage(
    centroids: &[Centroid],
    pairs: &[CoincidencePair],
    duration: f64,
    background: Option<&Background>,
    center: BeamCenter,
    cfg: &PipelineConfig,
) -> Result<EfficiencySummary> {
    let s = singles_image(centroids, duration).with_beam_center(center);
    let s_smooth = smooth_image(&s, cfg.radius_px)?;
    let s_b_smooth = match background {
        Some(b) => smooth_image(&singles_image(&b.centroids, b.duration), cfg.radius_px)?,
        None => PixelImage::zeros(Units::CountsPerSecond),
    };
    let c = coincidence_image(pairs, duration);
    let c_b = background_coincidence_image(&s, &s_smooth, center, cfg.windows.dtoa_ns);
    let mut result = efficiency_map(&c, &c_b, &s_smooth, &s_b_smooth, center, cfg.denom_floor)?;
    result.metadata = EfficiencyMetadata {
        duration_s: duration,
        background_duration_s: background.map(|b| b.duration),
        dtoa_ns: cfg.windows.dtoa_ns,
        sigma_xy_px: cfg.windows.sigma_xy_px,
        radius_px: cfg.radius_px,
    };
    let (masked_mean, masked_std) = masked_stats(&result, &cfg.mask);
    Ok(EfficiencySummary {
        detector_only_mean: detector_only_efficiency(masked_mean, cfg.transmission)?,
        masked_mean,
        masked_std,
        c_total: c.total(),
        c_b_total: c_b.total(),
        result,
    })
}

/// Clustering through efficiency on an in-memory stream.
pub fn analyze(
    stream: &EventStream,
    labels: Option<&[EventLabel]>,
    background: Option<&Background>,
    cfg: &PipelineConfig,
) -> Result<Analysis> {
    cfg.validate()?;
    let clusters = cluster_stage(stream, cfg)?;
    let quality = labels.map(|l| quality_of(&clusters, l)).transpose()?;
    let centroids = centroid_stage(&clusters, cfg)?;
    let (center, center_estimated) = resolve_center(&centroids, stream.duration, cfg);
    let timing = timing_stage(&centroids, center, cfg);
    let pairs = pairs_stage(&centroids, center, cfg)?;
    let corr = diag_stage(&centroids, center, cfg);
    let efficiency = efficiency_stage(&centroids, &pairs, stream.duration, background, center, cfg)?;
    Ok(Analysis {
        n_events: stream.len(),
        duration: stream.duration,
        clusters,
        quality,
        centroids,
        center,
        center_estimated,
        timing,
        pairs,
        corr,
        efficiency,
    })
}

fn quality_of(clusters: &[Cluster], labels: &[EventLabel]) -> Result<ClusterQuality> {
    let truth = GroundTruth { photons: Vec::new(), event_labels: labels.to_vec() };
    cluster_quality(clusters, &truth)
}

// ---------------------------------------------------------------------------
// artifact formats

fn csv_fields<const N: usize>(line: &str, what: &str) -> Result<[u64; N]> {
    let mut out = [0u64; N];
    let mut it = line.split(',');
    for slot in &mut out {
        let f = it.next().ok_or_else(|| Error::Parse(format!("{what}: short row {line:?}")))?;
        *slot = f.trim().parse().map_err(|_| Error::Parse(format!("{what}: bad field {f:?}")))?;
    }
    if it.next().is_some() {
        return Err(Error::Parse(format!("{what}: long row {line:?}")));
    }
    Ok(out)
}

fn narrow<T: TryFrom<u64>>(v: u64, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Range(format!("{what}: {v} out of range")))
}

/// Reads the `# duration_s=` line and the column header, returning the
/// duration and the remaining data lines.
fn read_table(source: impl Read, what: &str) -> Result<(f64, Vec<String>)> {
    let mut lines = BufReader::new(source).lines();
    let meta = lines.next().transpose()?.unwrap_or_default();
    let duration = meta
        .strip_prefix("# duration_s=")
        .and_then(|d| d.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::Parse(format!("{what}: missing `# duration_s=` line")))?;
    lines.next().transpose()?;
    let rows = lines.collect::<std::io::Result<Vec<_>>>()?;
    Ok((duration, rows))
}

pub fn write_clusters<W: Write>(clusters: &[Cluster], duration: f64, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    writeln!(w, "# duration_s={duration}")?;
    writeln!(w, "cluster,event_index,x,y,toa,tot")?;
    for (ci, c) in clusters.iter().enumerate() {
        for (e, i) in c.members.iter().zip(&c.indices) {
            writeln!(w, "{ci},{i},{},{},{},{}", e.x, e.y, e.toa, e.tot)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_clusters<R: Read>(source: R) -> Result<(Vec<Cluster>, f64)> {
    let (duration, rows) = read_table(source, CLUSTERS_FILE)?;
    let mut clusters: Vec<Cluster> = Vec::new();
    for row in rows {
        let [ci, i, x, y, toa, tot] = csv_fields::<6>(&row, CLUSTERS_FILE)?;
        let event = RawEvent::new(narrow(x, "x")?, narrow(y, "y")?, toa, narrow(tot, "tot")?)?;
        let ci = ci as usize;
        if ci == clusters.len() {
            clusters.push(Cluster { members: Vec::new(), indices: Vec::new() });
        } else if ci + 1 != clusters.len() {
            return Err(Error::Parse(format!("{CLUSTERS_FILE}: cluster ids must be consecutive, got {ci}")));
        }
        let c = clusters.last_mut().unwrap();
        c.members.push(event);
        c.indices.push(i as usize);
    }
    Ok((clusters, duration))
}

fn centroid_row(c: &Centroid) -> String {
    format!("{},{},{},{},{}", c.x, c.y, c.toa, c.size, c.total_tot)
}

fn parse_centroid(f: &[u64], what: &str) -> Result<Centroid> {
    Ok(Centroid {
        x: narrow(f[0], what)?,
        y: narrow(f[1], what)?,
        toa: f[2],
        size: narrow(f[3], what)?,
        total_tot: narrow(f[4], what)?,
    })
}

pub fn write_centroids<W: Write>(centroids: &[Centroid], duration: f64, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    writeln!(w, "# duration_s={duration}")?;
    writeln!(w, "x,y,toa,size,total_tot")?;
    for c in centroids {
        writeln!(w, "{}", centroid_row(c))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_centroids<R: Read>(source: R) -> Result<(Vec<Centroid>, f64)> {
    let (duration, rows) = read_table(source, CENTROIDS_FILE)?;
    let centroids = rows
        .iter()
        .map(|r| parse_centroid(&csv_fields::<5>(r, CENTROIDS_FILE)?, CENTROIDS_FILE))
        .collect::<Result<Vec<_>>>()?;
    Ok((centroids, duration))
}

pub fn write_pairs<W: Write>(pairs: &[CoincidencePair], duration: f64, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    writeln!(w, "# duration_s={duration}")?;
    writeln!(w, "a_x,a_y,a_toa,a_size,a_total_tot,b_x,b_y,b_toa,b_size,b_total_tot")?;
    for p in pairs {
        writeln!(w, "{},{}", centroid_row(&p.a), centroid_row(&p.b))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs<R: Read>(source: R) -> Result<(Vec<CoincidencePair>, f64)> {
    let (duration, rows) = read_table(source, PAIRS_FILE)?;
    let pairs = rows
        .iter()
        .map(|r| {
            let f = csv_fields::<10>(r, PAIRS_FILE)?;
            let a = parse_centroid(&f[..5], PAIRS_FILE)?;
            let b = parse_centroid(&f[5..], PAIRS_FILE)?;
            Ok(CoincidencePair { a, b, dtoa: a.toa as i64 - b.toa as i64 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, duration))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| v.to_string())
}

fn center_source(estimated: bool, cfg: &PipelineConfig) -> &'static str {
    match (cfg.center, estimated) {
        (CenterChoice::Fixed(_), _) => "fixed",
        (CenterChoice::Auto, true) => "estimated",
        (CenterChoice::Auto, false) => "sensor-default",
    }
}

fn timing_text(t: &Timing, center: BeamCenter, estimated: bool, cfg: &PipelineConfig) -> String {
    format!(
        "center={},{}\ncenter_source={}\nhistogram_entries={}\nfwhm_ns={}\ntemporal_resolution_ns={}\n",
        center.cx,
        center.cy,
        center_source(estimated, cfg),
        t.hist.hist.total(),
        fmt_opt(t.fwhm_ns),
        fmt_opt(t.resolution_ns),
    )
}

fn write_corr<W: Write>(h: &CorrHist2D, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    writeln!(w, "c1,c2,count")?;
    for (k, &n) in h.counts.iter().enumerate() {
        if n > 0 {
            writeln!(w, "{},{},{n}", k / crate::event_model::SENSOR_SIZE, k % crate::event_model::SENSOR_SIZE)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn diag_text(h: &CorrHist2D, cfg: &PipelineConfig) -> String {
    format!(
        "axis={}\nband_px={}\ndtoa_ns={}\nentries={}\ndiagonal_fraction={}\nanti_diagonal_fraction={}\n",
        cfg.value_of("axis"),
        cfg.band_px,
        cfg.windows.dtoa_ns,
        h.total,
        h.diagonal_fraction,
        h.anti_diagonal_fraction,
    )
}

fn stats_text(e: &EfficiencySummary, center: BeamCenter) -> String {
    let r = &e.result;
    format!(
        "mean={}\nstd={}\nvalid_pixels={}\nflagged_pixels={}\nmasked_mean={}\nmasked_std={}\n\
         detector_only_mean={}\ncoincidence_total_cps={}\nbackground_coincidence_total_cps={}\n\
         center={},{}\nduration_s={}\ndtoa_ns={}\nsigma_xy_px={}\nradius_px={}\n",
        r.mean,
        r.std,
        r.valid_count,
        r.flagged_count,
        e.masked_mean,
        e.masked_std,
        e.detector_only_mean,
        e.c_total,
        e.c_b_total,
        center.cx,
        center.cy,
        r.metadata.duration_s,
        r.metadata.dtoa_ns,
        r.metadata.sigma_xy_px,
        r.metadata.radius_px,
    )
}

fn quality_text(q: &ClusterQuality) -> String {
    format!(
        "split_rate={}\nmerge_rate={}\npurity={}\ncompleteness={}\n",
        q.split_rate, q.merge_rate, q.purity, q.completeness
    )
}

fn report_text(a: &Analysis, cfg: &PipelineConfig) -> String {
    let e = &a.efficiency;
    let mut out = String::new();
    let _ = writeln!(out, "events={}", a.n_events);
    let _ = writeln!(out, "duration_s={}", a.duration);
    let _ = writeln!(out, "clusters={}", a.clusters.len());
    let _ = writeln!(out, "centroids={}", a.centroids.len());
    let _ = writeln!(out, "pairs={}", a.pairs.len());
    let _ = writeln!(out, "toa_method={}", cfg.toa_method);
    let _ = writeln!(out, "center={},{} ({})", a.center.cx, a.center.cy, center_source(a.center_estimated, cfg));
    let _ = writeln!(out, "fwhm_ns={}", fmt_opt(a.timing.fwhm_ns));
    let _ = writeln!(out, "temporal_resolution_ns={}", fmt_opt(a.timing.resolution_ns));
    let _ = writeln!(out, "efficiency_mean={} +- {}", e.result.mean, e.result.std);
    let _ = writeln!(out, "efficiency_masked_mean={} +- {}", e.masked_mean, e.masked_std);
    let _ = writeln!(out, "detector_only_efficiency={}", e.detector_only_mean);
    let _ = writeln!(out, "valid_pixels={}", e.result.valid_count);
    let _ = writeln!(out, "flagged_pixels={}", e.result.flagged_count);
    let _ = writeln!(out, "background_to_coincidence_ratio={}", fmt_opt((e.c_total > 0.0).then(|| e.c_b_total / e.c_total)));
    let _ = writeln!(out, "diagonal_fraction={}", a.corr.diagonal_fraction);
    let _ = writeln!(out, "anti_diagonal_fraction={}", a.corr.anti_diagonal_fraction);
    match &a.quality {
        Some(q) => out.push_str(&quality_text(q)),
        None => out.push_str("cluster_quality=n/a (no ground truth)\n"),
    }
    out
}

// ---------------------------------------------------------------------------
// artifact directory runner

struct Workspace<'a> {
    dir: &'a Path,
    stage: &'static str,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl<'a> Workspace<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn err(&self, e: impl Into<Error>) -> PipelineError {
        PipelineError::new(self.stage, e.into())
    }

    fn open_input(&mut self, path: &Path) -> Result<File, PipelineError> {
        let hash = sha256_file(path).map_err(|e| self.err(e))?;
        self.inputs.push((path.display().to_string(), hash));
        File::open(path).map_err(|e| self.err(e))
    }

    fn open_artifact(&mut self, name: &str) -> Result<File, PipelineError> {
        let p = self.path(name);
        self.open_input(&p)
    }

    fn create(&mut self, name: &str, f: impl FnOnce(File) -> Result<()>) -> Result<(), PipelineError> {
        let file = File::create(self.path(name)).map_err(|e| self.err(e))?;
        f(file).map_err(|e| self.err(e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn create_text(&mut self, name: &str, text: &str) -> Result<(), PipelineError> {
        self.create(name, |mut f| Ok(f.write_all(text.as_bytes())?))
    }

    fn finish(mut self, cfg: &PipelineConfig) -> Result<(), PipelineError> {
        self.create_text(CONFIG_FILE, &cfg.to_text())?;
        let mut text = String::new();
        let _ = writeln!(text, "tool=tpxcal {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "stage={}", self.stage);
        let _ = writeln!(text, "config_sha256={}", cfg.hash());
        for (name, hash) in &self.inputs {
            let _ = writeln!(text, "input {name} sha256={hash}");
        }
        let mut outputs = std::mem::take(&mut self.outputs);
        outputs.sort();
        outputs.dedup();
        for name in outputs {
            let hash = sha256_file(&self.path(&name)).map_err(|e| self.err(e))?;
            let _ = writeln!(text, "output {name} sha256={hash}");
        }
        self.create_text(MANIFEST_FILE, &text)
    }
}

/// What a stage run produced, for the caller's summary line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub lines: Vec<String>,
}

fn load_stream(ws: &mut Workspace<'_>, cfg: &PipelineConfig) -> Result<EventStream, PipelineError> {
    let file = match &cfg.input {
        Some(p) => ws.open_input(p)?,
        None => ws.open_artifact(EVENTS_FILE)?,
    };
    read_stream(BufReader::new(file)).map_err(|e| ws.err(e))
}

fn load_labels(ws: &mut Workspace<'_>, cfg: &PipelineConfig) -> Result<Option<Vec<EventLabel>>, PipelineError> {
    if cfg.input.is_some() || !ws.path(LABELS_FILE).exists() {
        return Ok(None);
    }
    let f = ws.open_artifact(LABELS_FILE)?;
    GroundTruth::read_label_table(f).map(Some).map_err(|e| ws.err(e))
}

/// Round the duration to whole nanoseconds, as stored in `.tpxs` headers.
fn stored_duration(d: f64) -> f64 {
    (d * 1e9).round() / 1e9
}

fn load_background(ws: &mut Workspace<'_>, cfg: &PipelineConfig) -> Result<Option<Background>, PipelineError> {
    let file = match &cfg.background_input {
        Some(p) => ws.open_input(p)?,
        None if cfg.input.is_none() && cfg.background_duration_s > 0.0 => ws.open_artifact(BACKGROUND_FILE)?,
        None => return Ok(None),
    };
    let stream = read_stream(BufReader::new(file)).map_err(|e| ws.err(e))?;
    background_from_stream(&stream, cfg).map(Some).map_err(|e| ws.err(e))
}

/// Generate and store the pump-blocked stream, if one is configured.
fn synth_background(ws: &mut Workspace<'_>, cfg: &PipelineConfig) -> Result<Option<EventStream>, PipelineError> {
    if cfg.background_duration_s <= 0.0 {
        return Ok(None);
    }
    let synth = cfg.background_synth_config().map_err(|e| ws.err(e))?;
    let (mut stream, _) = generate_stream(&synth).map_err(|e| ws.err(e))?;
    stream.duration = stored_duration(stream.duration);
    ws.create(BACKGROUND_FILE, |f| write_stream(&stream, f).map(|_| ()))?;
    Ok(Some(stream))
}

fn synth_artifacts(ws: &mut Workspace<'_>, cfg: &PipelineConfig) -> Result<(EventStream, GroundTruth), PipelineError> {
    if let EfficiencyTruth::File(p) = &cfg.efficiency_truth {
        let hash = sha256_file(p).map_err(|e| ws.err(e))?;
        ws.inputs.push((p.display().to_string(), hash));
    }
    let synth = cfg.synth_config().map_err(|e| ws.err(e))?;
    let (mut stream, truth) = generate_stream(&synth).map_err(|e| ws.err(e))?;
    stream.duration = stored_duration(stream.duration);
    ws.create(EVENTS_FILE, |f| write_stream(&stream, f).map(|_| ()))?;
    ws.create(PHOTONS_FILE, |f| truth.write_photon_table(f))?;
    ws.create(LABELS_FILE, |f| truth.write_label_table(f))?;
    Ok((stream, truth))
}

fn write_cluster_artifacts(
    ws: &mut Workspace<'_>,
    clusters: &[Cluster],
    quality: Option<&ClusterQuality>,
    duration: f64,
) -> Result<(), PipelineError> {
    ws.create(CLUSTERS_FILE, |f| write_clusters(clusters, duration, f))?;
    if let Some(q) = quality {
        ws.create_text(QUALITY_FILE, &quality_text(q))?;
    }
    Ok(())
}

fn write_pairs_artifacts(
    ws: &mut Workspace<'_>,
    pairs: &[CoincidencePair],
    timing: &Timing,
    duration: f64,
    center: (BeamCenter, bool),
    cfg: &PipelineConfig,
) -> Result<(), PipelineError> {
    ws.create(PAIRS_FILE, |f| write_pairs(pairs, duration, f))?;
    ws.create(DTOA_FILE, |f| export_histogram(&timing.hist.hist, f))?;
    ws.create_text(TIMING_FILE, &timing_text(timing, center.0, center.1, cfg))
}

fn write_diag_artifacts(ws: &mut Workspace<'_>, corr: &CorrHist2D, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    ws.create(CORR_FILE, |f| write_corr(corr, f))?;
    ws.create_text(DIAG_FILE, &diag_text(corr, cfg))
}

fn write_efficiency_artifacts(ws: &mut Workspace<'_>, e: &EfficiencySummary, center: BeamCenter) -> Result<(), PipelineError> {
    ws.create(ETA_CSV_FILE, |f| export_image(&e.result.eta, ImageFormat::Csv, f))?;
    ws.create(ETA_PGM_FILE, |f| export_image(&e.result.eta, ImageFormat::Pgm16 { scale: 65535.0 }, f))?;
    ws.create_text(STATS_FILE, &stats_text(e, center))
}

fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<RunSummary, PipelineError> {
    let mut ws = Workspace { dir: &cfg.out_dir, stage: stage.as_str(), inputs: Vec::new(), outputs: Vec::new() };
    let mut summary = RunSummary::default();
    match stage {
        Stage::Synth => {
            let (stream, truth) = synth_artifacts(&mut ws, cfg)?;
            summary.lines.push(format!("events={} photons={}", stream.len(), truth.photons.len()));
            if let Some(bg) = synth_background(&mut ws, cfg)? {
                summary.lines.push(format!("background_events={}", bg.len()));
            }
        }
        Stage::Cluster => {
            let stream = load_stream(&mut ws, cfg)?;
            let labels = load_labels(&mut ws, cfg)?;
            let clusters = cluster_stage(&stream, cfg).map_err(|e| ws.err(e))?;
            let quality = labels.map(|l| quality_of(&clusters, &l)).transpose().map_err(|e| ws.err(e))?;
            write_cluster_artifacts(&mut ws, &clusters, quality.as_ref(), stream.duration)?;
            summary.lines.push(format!("events={} clusters={}", stream.len(), clusters.len()));
        }
        Stage::Centroid => {
            let f = ws.open_artifact(CLUSTERS_FILE)?;
            let (clusters, duration) = read_clusters(f).map_err(|e| ws.err(e))?;
            let centroids = centroid_stage(&clusters, cfg).map_err(|e| ws.err(e))?;
            ws.create(CENTROIDS_FILE, |f| write_centroids(&centroids, duration, f))?;
            summary.lines.push(format!("centroids={}", centroids.len()));
        }
        Stage::Pairs => {
            let f = ws.open_artifact(CENTROIDS_FILE)?;
            let (centroids, duration) = read_centroids(f).map_err(|e| ws.err(e))?;
            let center = resolve_center(&centroids, duration, cfg);
            let timing = timing_stage(&centroids, center.0, cfg);
            let pairs = pairs_stage(&centroids, center.0, cfg).map_err(|e| ws.err(e))?;
            write_pairs_artifacts(&mut ws, &pairs, &timing, duration, center, cfg)?;
            summary.lines.push(format!("pairs={} fwhm_ns={}", pairs.len(), fmt_opt(timing.fwhm_ns)));
        }
        Stage::Diag => {
            let f = ws.open_artifact(CENTROIDS_FILE)?;
            let (centroids, duration) = read_centroids(f).map_err(|e| ws.err(e))?;
            let (center, _) = resolve_center(&centroids, duration, cfg);
            let corr = diag_stage(&centroids, center, cfg);
            write_diag_artifacts(&mut ws, &corr, cfg)?;
            summary.lines.push(format!(
                "diagonal_fraction={} anti_diagonal_fraction={}",
                corr.diagonal_fraction, corr.anti_diagonal_fraction
            ));
        }
        Stage::Efficiency => {
            let f = ws.open_artifact(CENTROIDS_FILE)?;
            let (centroids, duration) = read_centroids(f).map_err(|e| ws.err(e))?;
            let f = ws.open_artifact(PAIRS_FILE)?;
            let (pairs, _) = read_pairs(f).map_err(|e| ws.err(e))?;
            let background = load_background(&mut ws, cfg)?;
            let (center, _) = resolve_center(&centroids, duration, cfg);
            let e = efficiency_stage(&centroids, &pairs, duration, background.as_ref(), center, cfg)
                .map_err(|e| ws.err(e))?;
            write_efficiency_artifacts(&mut ws, &e, center)?;
            summary.lines.push(format!("masked_mean={} masked_std={}", e.masked_mean, e.masked_std));
        }
        Stage::Full => {
            let (stream, labels) = match &cfg.input {
                Some(_) => (load_stream(&mut ws, cfg)?, None),
                None => {
                    let (s, t) = synth_artifacts(&mut ws, cfg)?;
                    (s, Some(t.event_labels))
                }
            };
            let background = match (&cfg.background_input, &cfg.input) {
                (None, None) => synth_background(&mut ws, cfg)?
                    .map(|bg| background_from_stream(&bg, cfg))
                    .transpose()
                    .map_err(|e| ws.err(e))?,
                _ => load_background(&mut ws, cfg)?,
            };
            let a = analyze(&stream, labels.as_deref(), background.as_ref(), cfg).map_err(|e| ws.err(e))?;
            write_cluster_artifacts(&mut ws, &a.clusters, a.quality.as_ref(), a.duration)?;
            ws.create(CENTROIDS_FILE, |f| write_centroids(&a.centroids, a.duration, f))?;
            write_pairs_artifacts(&mut ws, &a.pairs, &a.timing, a.duration, (a.center, a.center_estimated), cfg)?;
            write_diag_artifacts(&mut ws, &a.corr, cfg)?;
            write_efficiency_artifacts(&mut ws, &a.efficiency, a.center)?;
            let report = report_text(&a, cfg);
            ws.create_text(REPORT_FILE, &report)?;
            summary.lines.extend(report.lines().map(str::to_string));
        }
    }
    ws.finish(cfg)?;
    Ok(summary)
}

/// Run one stage (or `full`) with at most `threads` workers.
///
/// Artifacts do not depend on the worker count.
pub fn run(cfg: &PipelineConfig, stage: Stage, threads: Option<usize>) -> Result<RunSummary, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::new("config", e))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::new(stage.as_str(), e.into()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::new("config", Error::Config(format!("thread pool: {e}"))))?;
    pool.install(|| run_stage(cfg, stage))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("center", "128,127.5").unwrap();
        cfg.set("toa_method", "min-toa").unwrap();
        cfg.set("efficiency_truth", "maps/eta.csv").unwrap();
        cfg.set("input", "run.tpxs").unwrap();
        cfg.set("beam", "spot").unwrap();
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(PipelineConfig::from_text(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn config_text_parsing() {
        let cfg = PipelineConfig::from_text("# comment\n\nbox_t_ns = 17   # short window\nseed=9\n").unwrap();
        assert_eq!(cfg.cluster.box_t_ns, 17.0);
        assert_eq!(cfg.seed, 9);
        assert!(matches!(PipelineConfig::from_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_text("seed"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_text("seed = x"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_text("axis = z"), Err(Error::Config(_))));
    }

    #[test]
    fn every_key_is_serialized() {
        let text = PipelineConfig::default().to_text();
        assert_eq!(text.lines().count(), CONFIG_KEYS.len());
        for (k, _) in CONFIG_KEYS {
            assert!(text.contains(&format!("{k} = ")));
        }
    }

    #[test]
    fn validation_catches_bad_values() {
        for (k, v) in [("box_xy", "4"), ("transmission", "0"), ("radius_px", "0.5"), ("dtoa_ns", "0"), ("efficiency_truth", "1.5")] {
            let mut cfg = PipelineConfig::default();
            cfg.set(k, v).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{k}={v}");
        }
    }

    #[test]
    fn exit_codes() {
        let code = |e: Error| PipelineError::new("x", e).exit_code();
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(code(Error::BadMagic), 4);
        assert_eq!(code(Error::UnsortedInput { index: 1 }), 4);
    }

    #[test]
    fn artifact_tables_round_trip() {
        let a = Centroid { x: 1, y: 2, toa: 30, size: 4, total_tot: 50 };
        let b = Centroid { x: 250, y: 251, toa: 31, size: 1, total_tot: 7 };
        let mut buf = Vec::new();
        write_centroids(&[a, b], 0.25, &mut buf).unwrap();
        assert_eq!(read_centroids(&buf[..]).unwrap(), (vec![a, b], 0.25));

        let pairs = vec![CoincidencePair { a, b, dtoa: -1 }];
        buf.clear();
        write_pairs(&pairs, 0.25, &mut buf).unwrap();
        assert_eq!(read_pairs(&buf[..]).unwrap(), (pairs, 0.25));

        let clusters = vec![
            Cluster { members: vec![RawEvent { x: 1, y: 1, toa: 5, tot: 9 }], indices: vec![0] },
            Cluster {
                members: vec![RawEvent { x: 9, y: 9, toa: 6, tot: 3 }, RawEvent { x: 9, y: 10, toa: 8, tot: 1 }],
                indices: vec![1, 2],
            },
        ];
        buf.clear();
        write_clusters(&clusters, 1.5, &mut buf).unwrap();
        assert_eq!(read_clusters(&buf[..]).unwrap(), (clusters, 1.5));

        assert!(read_centroids(&b"x,y\n"[..]).is_err());
        assert!(read_centroids(&b"# duration_s=1\nx,y,toa,size,total_tot\n1,2,3\n"[..]).is_err());
        assert!(read_centroids(&b"# duration_s=1\nx,y,toa,size,total_tot\n300,2,3,1,1\n"[..]).is_err());
    }

    #[test]
    fn stored_duration_matches_stream_header() {
        for d in [0.5, 0.1, 1.0 / 3.0, 25.0, 0.123_456_789_123] {
            let s = EventStream::new(Vec::new(), stored_duration(d)).unwrap();
            let mut buf = Vec::new();
            write_stream(&s, &mut buf).unwrap();
            assert_eq!(read_stream(&buf[..]).unwrap().duration, s.duration);
        }
    }
}
