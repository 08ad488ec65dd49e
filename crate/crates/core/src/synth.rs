//! Synthetic SPDC source, image intensifier and camera.
//!
//! Generates labeled event streams for closed-loop checks of every later
//! stage. Pairs are emitted as a Poisson process; the second photon lands
//! at the reflection of the first through the beam center plus Gaussian
//! scatter. Each detected photon becomes one intensifier flash: a handful
//! of pixel events sharing one timing-jitter draw, with per-pixel
//! time-walk that shrinks as the pixel's ToT grows.
//!
//! The acquisition is cut into fixed 1 ms slices, each driven by its own
//! ChaCha stream derived from the seed, so the output depends only on the
//! configuration and never on the worker count.

use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_model::{
    BeamCenter, EventStream, PixelImage, RawEvent, Units, SENSOR_SIZE, TOA_TICK_NS,
};

/// Ratio between FWHM and standard deviation of a Gaussian, `2 sqrt(2 ln 2)`.
pub const GAUSSIAN_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

const SLICE_NS: f64 = 1.0e6;

/// Spatial distribution of the first photon of each pair.
#[derive(Clone, Debug, PartialEq)]
pub enum BeamProfile {
    /// Annulus of mean radius `r0` with Gaussian radial width `sigma_r`.
    /// `r0 == 0` gives an isotropic 2-D Gaussian of width `sigma_r`.
    Ring { r0: f64, sigma_r: f64 },
    /// Compact Gaussian spot at `center + offset`; its partner lands near
    /// the conjugate spot at `center - offset`.
    Spot { offset: (f64, f64), sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Emitted pairs per second.
    pub pair_rate: f64,
    /// Acquisition length, seconds.
    pub duration: f64,
    pub beam_center: BeamCenter,
    pub beam: BeamProfile,
    /// Per-axis spread of `x1 + x2` and `y1 + y2` around the center, pixels.
    pub anticorrelation_sigma: f64,
    /// Per-pixel detection probability.
    pub efficiency_truth: PixelImage,
    /// Gaussian timing jitter per detection, ns.
    pub jitter_sigma_ns: f64,
    /// Spatial width of an intensifier flash, pixels.
    pub psf_sigma_px: f64,
    /// Expected number of pixel hits per flash.
    pub mean_cluster_size: f64,
    /// Time-walk scale `k` in `delay = k / tot`, ns * ToT tick.
    pub timewalk_coeff_ns: f64,
    /// ToT ticks produced by unit Gaussian density.
    pub tot_scale: f64,
    /// Uncorrelated flashes per second, uniform over the sensor.
    pub background_rate: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pair_rate: 2.0e6,
            duration: 0.5,
            beam_center: BeamCenter::sensor_center(),
            beam: BeamProfile::Ring { r0: 0.0, sigma_r: 60.0 },
            anticorrelation_sigma: 5.0,
            efficiency_truth: uniform_efficiency(0.074),
            jitter_sigma_ns: jitter_sigma_for_timestamp_fwhm(7.3),
            psf_sigma_px: 2.0,
            mean_cluster_size: 10.0,
            timewalk_coeff_ns: 150.0,
            tot_scale: 100.0,
            background_rate: 1.0e4,
            rng_seed: 1,
        }
    }
}

/// Gaussian jitter sigma whose single-detection FWHM equals `fwhm_ns`.
pub fn jitter_sigma_for_fwhm(fwhm_ns: f64) -> f64 {
    fwhm_ns / GAUSSIAN_FWHM_PER_SIGMA
}

/// Jitter sigma that, added in quadrature to the uniform ToA rounding
/// error (`tick^2 / 12`), gives a recorded timestamp of FWHM `fwhm_ns`.
pub fn jitter_sigma_for_timestamp_fwhm(fwhm_ns: f64) -> f64 {
    let total = jitter_sigma_for_fwhm(fwhm_ns);
    (total * total - TOA_TICK_NS * TOA_TICK_NS / 12.0).max(0.0).sqrt()
}

/// Efficiency map with the same value on every pixel.
pub fn uniform_efficiency(eta: f64) -> PixelImage {
    PixelImage::from_fn(Units::Efficiency, |_, _| eta)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("pair_rate", self.pair_rate),
            ("anticorrelation_sigma", self.anticorrelation_sigma),
            ("jitter_sigma_ns", self.jitter_sigma_ns),
            ("psf_sigma_px", self.psf_sigma_px),
            ("timewalk_coeff_ns", self.timewalk_coeff_ns),
            ("background_rate", self.background_rate),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config(format!("duration must be > 0, got {}", self.duration)));
        }
        if !(self.mean_cluster_size > 0.0 && self.mean_cluster_size.is_finite()) {
            return Err(Error::Config("mean_cluster_size must be > 0".into()));
        }
        if !(self.tot_scale > 0.0 && self.tot_scale.is_finite()) {
            return Err(Error::Config("tot_scale must be > 0".into()));
        }
        match self.beam {
            BeamProfile::Ring { r0, sigma_r } if r0 >= 0.0 && sigma_r >= 0.0 => {}
            BeamProfile::Spot { sigma, .. } if sigma >= 0.0 => {}
            _ => return Err(Error::Config("beam profile radii must be >= 0".into())),
        }
        let eff = &self.efficiency_truth;
        if eff.width != SENSOR_SIZE || eff.height != SENSOR_SIZE {
            return Err(Error::Config("efficiency_truth must be 256x256".into()));
        }
        if eff.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("efficiency_truth values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Origin of a raw event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventLabel {
    Photon(u32),
    Background,
}

/// One emitted SPDC photon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotonRecord {
    pub id: u32,
    pub pair: Option<u32>,
    /// True landing position in pixel coordinates.
    pub x: f64,
    pub y: f64,
    /// Emission time, ns from the start of the acquisition.
    pub t_ns: f64,
    pub detected: bool,
}

/// Oracle labels for a generated stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub photons: Vec<PhotonRecord>,
    /// One label per event of the generated stream, in stream order.
    pub event_labels: Vec<EventLabel>,
}

impl GroundTruth {
    pub fn detected_photons(&self) -> usize {
        self.photons.iter().filter(|p| p.detected).count()
    }

    /// Pairs whose two photons were both detected.
    pub fn detected_pairs(&self) -> usize {
        // photons of a pair are adjacent by construction
        self.photons
            .chunks_exact(2)
            .filter(|c| c[0].pair.is_some() && c[0].pair == c[1].pair && c[0].detected && c[1].detected)
            .count()
    }

    pub fn write_photon_table<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(sink);
        writeln!(w, "photon_id,pair_id,x,y,t_ns,detected")?;
        for p in &self.photons {
            let pair = p.pair.map_or_else(String::new, |id| id.to_string());
            writeln!(w, "{},{},{},{},{},{}", p.id, pair, p.x, p.y, p.t_ns, u8::from(p.detected))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_label_table<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(sink);
        writeln!(w, "event_index,photon_id")?;
        for (i, l) in self.event_labels.iter().enumerate() {
            match l {
                EventLabel::Photon(id) => writeln!(w, "{i},{id}")?,
                EventLabel::Background => writeln!(w, "{i},bg")?,
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a table written by [`GroundTruth::write_label_table`]. Only the
    /// event labels are recovered.
    pub fn read_label_table<R: Read>(source: R) -> Result<Vec<EventLabel>> {
        let mut labels = Vec::new();
        for (n, line) in BufReader::new(source).lines().enumerate().skip(1) {
            let line = line?;
            let bad = || Error::Parse(format!("label table line {}: {line:?}", n + 1));
            let (index, label) = line.split_once(',').ok_or_else(bad)?;
            if index.parse::<usize>().ok() != Some(labels.len()) {
                return Err(bad());
            }
            labels.push(match label {
                "bg" => EventLabel::Background,
                id => EventLabel::Photon(id.parse().map_err(|_| bad())?),
            });
        }
        Ok(labels)
    }
}

/// Time-walk delay in ns for a pixel with `tot` ticks: `coeff / tot`.
#[inline]
pub fn time_walk(tot: u16, coeff_ns: f64) -> f64 {
    coeff_ns / f64::from(tot.max(1))
}

/// Convert one incident photon into the pixel events of its flash.
pub fn intensify<R: Rng + ?Sized>(x: f64, y: f64, t_ns: f64, cfg: &SynthConfig, rng: &mut R) -> Vec<RawEvent> {
    let n = sample_cluster_size(cfg.mean_cluster_size, rng);
    let sigma = cfg.psf_sigma_px;
    let max = (SENSOR_SIZE - 1) as f64;

    // (x, y, accumulated density)
    let mut pixels: Vec<(u8, u8, f64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let (dx, dy) = if sigma > 0.0 {
            let gx: f64 = rng.sample(StandardNormal);
            let gy: f64 = rng.sample(StandardNormal);
            (sigma * gx, sigma * gy)
        } else {
            (0.0, 0.0)
        };
        let px = (x + dx).round().clamp(0.0, max);
        let py = (y + dy).round().clamp(0.0, max);
        let density = if sigma > 0.0 {
            let r2 = (px - x).powi(2) + (py - y).powi(2);
            (-r2 / (2.0 * sigma * sigma)).exp()
        } else {
            1.0
        };
        let (px, py) = (px as u8, py as u8);
        match pixels.iter_mut().find(|p| p.0 == px && p.1 == py) {
            Some(p) => p.2 += density,
            None => pixels.push((px, py, density)),
        }
    }

    let jitter = if cfg.jitter_sigma_ns > 0.0 {
        let g: f64 = rng.sample(StandardNormal);
        g * cfg.jitter_sigma_ns
    } else {
        0.0
    };

    pixels
        .into_iter()
        .map(|(px, py, density)| {
            let tot = (cfg.tot_scale * density).round().clamp(1.0, f64::from(u16::MAX)) as u16;
            let t = (t_ns + jitter + time_walk(tot, cfg.timewalk_coeff_ns)).max(0.0);
            RawEvent { x: px, y: py, toa: (t / TOA_TICK_NS).floor() as u64, tot }
        })
        .collect()
}

fn sample_cluster_size<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    let poisson = Poisson::new(mean).expect("mean_cluster_size validated > 0");
    loop {
        let n = poisson.sample(rng) as usize;
        if n >= 1 {
            return n;
        }
    }
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    } else {
        0
    }
}

struct SliceOutput {
    events: Vec<(RawEvent, EventLabel)>,
    photons: Vec<PhotonRecord>,
}

fn sample_first_photon<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> (f64, f64) {
    let c = cfg.beam_center;
    match cfg.beam {
        BeamProfile::Ring { r0, sigma_r } if r0 == 0.0 => {
            let gx: f64 = rng.sample(StandardNormal);
            let gy: f64 = rng.sample(StandardNormal);
            (c.cx + sigma_r * gx, c.cy + sigma_r * gy)
        }
        BeamProfile::Ring { r0, sigma_r } => {
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let g: f64 = rng.sample(StandardNormal);
            let r = r0 + sigma_r * g;
            (c.cx + r * phi.cos(), c.cy + r * phi.sin())
        }
        BeamProfile::Spot { offset, sigma } => {
            let gx: f64 = rng.sample(StandardNormal);
            let gy: f64 = rng.sample(StandardNormal);
            (c.cx + offset.0 + sigma * gx, c.cy + offset.1 + sigma * gy)
        }
    }
}

fn on_sensor_pixel(x: f64, y: f64) -> Option<(usize, usize)> {
    let (px, py) = (x.round(), y.round());
    let max = (SENSOR_SIZE - 1) as f64;
    ((0.0..=max).contains(&px) && (0.0..=max).contains(&py)).then_some((px as usize, py as usize))
}

fn generate_slice(cfg: &SynthConfig, index: u64, t0: f64, t1: f64) -> SliceOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(index);
    let span = t1 - t0;
    let scatter = Normal::new(0.0, cfg.anticorrelation_sigma).expect("validated sigma");

    let n_pairs = poisson_count(cfg.pair_rate * span * 1e-9, &mut rng);
    let n_background = poisson_count(cfg.background_rate * span * 1e-9, &mut rng);

    let mut events = Vec::new();
    let mut photons = Vec::with_capacity(2 * n_pairs as usize);
    for pair in 0..n_pairs {
        let t = t0 + rng.random::<f64>() * span;
        let (x1, y1) = sample_first_photon(cfg, &mut rng);
        let x2 = 2.0 * cfg.beam_center.cx - x1 + scatter.sample(&mut rng);
        let y2 = 2.0 * cfg.beam_center.cy - y1 + scatter.sample(&mut rng);
        for (x, y) in [(x1, y1), (x2, y2)] {
            let id = photons.len() as u32;
            let u = rng.random::<f64>();
            let detected = on_sensor_pixel(x, y)
                .is_some_and(|(px, py)| u < cfg.efficiency_truth.get(px, py));
            if detected {
                let label = EventLabel::Photon(id);
                events.extend(intensify(x, y, t, cfg, &mut rng).into_iter().map(|e| (e, label)));
            }
            photons.push(PhotonRecord { id, pair: Some(pair as u32), x, y, t_ns: t, detected });
        }
    }
    let max = SENSOR_SIZE as f64 - 0.5;
    for _ in 0..n_background {
        let t = t0 + rng.random::<f64>() * span;
        let x = -0.5 + rng.random::<f64>() * (max + 0.5);
        let y = -0.5 + rng.random::<f64>() * (max + 0.5);
        events.extend(intensify(x, y, t, cfg, &mut rng).into_iter().map(|e| (e, EventLabel::Background)));
    }
    SliceOutput { events, photons }
}

/// Generate a toa-sorted stream together with its ground truth.
pub fn generate_stream(cfg: &SynthConfig) -> Result<(EventStream, GroundTruth)> {
    cfg.validate()?;
    let total_ns = cfg.duration * 1e9;
    let n_slices = (total_ns / SLICE_NS).ceil().max(1.0) as u64;
    let slices: Vec<SliceOutput> = (0..n_slices)
        .into_par_iter()
        .map(|i| {
            let t0 = i as f64 * SLICE_NS;
            let t1 = ((i + 1) as f64 * SLICE_NS).min(total_ns);
            generate_slice(cfg, i, t0, t1)
        })
        .collect();

    let n_events: usize = slices.iter().map(|s| s.events.len()).sum();
    let n_photons: usize = slices.iter().map(|s| s.photons.len()).sum();
    let mut tagged = Vec::with_capacity(n_events);
    let mut photons = Vec::with_capacity(n_photons);
    let mut pair_offset = 0u32;
    for slice in slices {
        let id_offset = photons.len() as u32;
        tagged.extend(slice.events.into_iter().map(|(e, l)| {
            let l = match l {
                EventLabel::Photon(id) => EventLabel::Photon(id + id_offset),
                bg => bg,
            };
            (e, l)
        }));
        let n_pairs = slice.photons.len() as u32 / 2;
        photons.extend(slice.photons.into_iter().map(|mut p| {
            p.id += id_offset;
            p.pair = p.pair.map(|q| q + pair_offset);
            p
        }));
        pair_offset += n_pairs;
    }
    // stable: ties keep slice and generation order
    tagged.par_sort_by_key(|(e, _)| e.toa);
    let (events, event_labels): (Vec<_>, Vec<_>) = tagged.into_iter().unzip();
    let stream = EventStream::new(events, cfg.duration)?;
    Ok((stream, GroundTruth { photons, event_labels }))
}
