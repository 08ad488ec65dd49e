//! Singles, coincidence and accidental-coincidence images and the per-pixel
//! efficiency map built from them.
//!
//! A pixel's efficiency is its background-subtracted coincidence rate over
//! the smoothed, background-subtracted singles rate at the conjugate pixel
//! (the reflection through the beam center).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_model::{BeamCenter, Centroid, CoincidencePair, PixelImage, Units};

/// Scalar pair-counting efficiency `N_ab / N_b` of detector `a`.
pub fn klyshko_efficiency(coincidences: u64, singles_b: u64) -> Result<f64> {
    if singles_b == 0 {
        return Err(Error::Range("no singles on the partner detector".into()));
    }
    if coincidences > singles_b {
        return Err(Error::Range(format!("{coincidences} coincidences exceed {singles_b} partner singles")));
    }
    Ok(coincidences as f64 / singles_b as f64)
}

/// Binomial standard error of [`klyshko_efficiency`].
pub fn klyshko_sigma(eta: f64, singles_b: u64) -> f64 {
    (eta * (1.0 - eta) / singles_b as f64).sqrt()
}

/// Per-pixel centroid rate.
pub fn singles_image(centroids: &[Centroid], duration: f64) -> PixelImage {
    let mut img = PixelImage::zeros(Units::CountsPerSecond);
    for c in centroids {
        img.add(c.x as usize, c.y as usize, 1.0);
    }
    img.values.iter_mut().for_each(|v| *v /= duration);
    img
}

/// Intensity-weighted centroid of an image.
pub fn estimate_beam_center(s: &PixelImage) -> Result<BeamCenter> {
    let (mut sum, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..s.height {
        for x in 0..s.width {
            let v = s.get(x, y);
            sum += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    if !(sum > 0.0) {
        return Err(Error::EmptyImage);
    }
    Ok(BeamCenter::new(sx / sum, sy / sum))
}

/// Largest `h >= 0` with `h^2 <= r2`.
fn isqrt_floor(r2: f64) -> i64 {
    let mut h = r2.max(0.0).sqrt().floor() as i64;
    while ((h + 1) * (h + 1)) as f64 <= r2 {
        h += 1;
    }
    while h > 0 && (h * h) as f64 > r2 {
        h -= 1;
    }
    h
}

/// Disk moving average: each pixel becomes the mean of the in-sensor pixels
/// within Euclidean distance `radius_px`.
pub fn smooth_image(s: &PixelImage, radius_px: f64) -> Result<PixelImage> {
    if !(radius_px >= 1.0 && radius_px.is_finite()) {
        return Err(Error::Config(format!("smoothing radius must be >= 1, got {radius_px}")));
    }
    let (w, h) = (s.width as i64, s.height as i64);
    let r = radius_px.floor() as i64;
    let r2 = radius_px * radius_px;
    let half: Vec<i64> = (0..=r).map(|dy| isqrt_floor(r2 - (dy * dy) as f64)).collect();

    // prefix[y][x] = sum of row y over columns < x
    let prefix: Vec<Vec<f64>> = (0..h)
        .map(|y| {
            let row = &s.values[(y * w) as usize..((y + 1) * w) as usize];
            let mut p = Vec::with_capacity(row.len() + 1);
            p.push(0.0);
            let mut acc = 0.0;
            for v in row {
                acc += v;
                p.push(acc);
            }
            p
        })
        .collect();

    let mut out = s.clone();
    out.values.par_chunks_mut(w as usize).enumerate().for_each(|(y, row)| {
        let y = y as i64;
        for (x, slot) in row.iter_mut().enumerate() {
            let x = x as i64;
            let (mut sum, mut n) = (0.0, 0i64);
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let hw = half[dy.unsigned_abs() as usize];
                let x0 = (x - hw).max(0);
                let x1 = (x + hw).min(w - 1);
                let p = &prefix[yy as usize];
                sum += p[(x1 + 1) as usize] - p[x0 as usize];
                n += x1 - x0 + 1;
            }
            *slot = sum / n as f64;
        }
    });
    Ok(out)
}

/// Both members of every pair, as a rate.
pub fn coincidence_image(pairs: &[CoincidencePair], duration: f64) -> PixelImage {
    let mut img = PixelImage::zeros(Units::CountsPerSecond);
    for p in pairs {
        img.add(p.a.x as usize, p.a.y as usize, 1.0);
        img.add(p.b.x as usize, p.b.y as usize, 1.0);
    }
    img.values.iter_mut().for_each(|v| *v /= duration);
    img
}

/// Accidental coincidence rate `S(x, y) * S_smooth(conjugate) * dtoa`.
///
/// The window factor is `dtoa` itself. A symmetric `|t1 - t2| <= dtoa` cut
/// spans `2 dtoa`, so Monte-Carlo accidentals per pixel come out at twice
/// this value; see [`SYMMETRIC_WINDOW_FACTOR`].
pub fn background_coincidence_image(s: &PixelImage, s_smooth: &PixelImage, center: BeamCenter, dtoa_ns: f64) -> PixelImage {
    let window_s = dtoa_ns * 1e-9;
    let mut out = PixelImage::zeros_with_size(s.width, s.height, Units::CountsPerSecond).with_beam_center(center);
    for y in 0..s.height {
        for x in 0..s.width {
            if let Some((rx, ry)) = center.reflect_pixel(x, y) {
                out.set(x, y, s.get(x, y) * s_smooth.get(rx, ry) * window_s);
            }
        }
    }
    out
}

/// Ratio between accidentals counted with a symmetric `|t1 - t2| <= dtoa`
/// window and [`background_coincidence_image`].
pub const SYMMETRIC_WINDOW_FACTOR: f64 = 2.0;

/// Acquisition settings recorded alongside an efficiency map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EfficiencyMetadata {
    pub duration_s: f64,
    pub background_duration_s: Option<f64>,
    pub dtoa_ns: f64,
    pub sigma_xy_px: f64,
    pub radius_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyResult {
    pub eta: PixelImage,
    /// Pixel has a usable conjugate denominator.
    pub valid: Vec<bool>,
    /// Raw ratio fell outside `[0, 1]` and was clamped.
    pub flagged: Vec<bool>,
    /// Mean over valid pixels.
    pub mean: f64,
    pub std: f64,
    pub valid_count: usize,
    pub flagged_count: usize,
    pub metadata: EfficiencyMetadata,
}

pub const DEFAULT_DENOM_FLOOR: f64 = 1.0;

fn require_rate(img: &PixelImage, name: &str, reference: &PixelImage) -> Result<()> {
    if !img.same_geometry(reference) {
        return Err(Error::GeometryMismatch(format!(
            "{name} is {}x{}, expected {}x{}",
            img.width, img.height, reference.width, reference.height
        )));
    }
    if img.units != Units::CountsPerSecond {
        return Err(Error::GeometryMismatch(format!("{name} must be in counts per second, got {:?}", img.units)));
    }
    Ok(())
}

/// Per-pixel efficiency `(C - C_B)(p) / (S_smooth - S_B_smooth)(conjugate of p)`.
///
/// Pixels whose conjugate is off-sensor or whose denominator is below
/// `denom_floor` are masked. Ratios outside `[0, 1]` are clamped and flagged.
pub fn efficiency_map(
    c: &PixelImage,
    c_b: &PixelImage,
    s_smooth: &PixelImage,
    s_b_smooth: &PixelImage,
    center: BeamCenter,
    denom_floor: f64,
) -> Result<EfficiencyResult> {
    require_rate(c, "coincidence image", c)?;
    require_rate(c_b, "background coincidence image", c)?;
    require_rate(s_smooth, "smoothed singles image", c)?;
    require_rate(s_b_smooth, "smoothed background singles image", c)?;

    let n = c.width * c.height;
    let mut eta = PixelImage::zeros_with_size(c.width, c.height, Units::Efficiency).with_beam_center(center);
    let mut valid = vec![false; n];
    let mut flagged = vec![false; n];
    for y in 0..c.height {
        for x in 0..c.width {
            let Some((rx, ry)) = center.reflect_pixel(x, y) else { continue };
            if rx >= c.width || ry >= c.height {
                continue;
            }
            let denom = s_smooth.get(rx, ry) - s_b_smooth.get(rx, ry);
            if !(denom >= denom_floor) {
                continue;
            }
            let raw = (c.get(x, y) - c_b.get(x, y)) / denom;
            let i = y * c.width + x;
            valid[i] = true;
            if !(0.0..=1.0).contains(&raw) {
                flagged[i] = true;
            }
            eta.values[i] = raw.clamp(0.0, 1.0);
        }
    }
    let (mean, std, valid_count) = mean_std(eta.values.iter().zip(&valid).filter(|(_, &v)| v).map(|(e, _)| *e));
    Ok(EfficiencyResult {
        eta,
        valid,
        flagged_count: flagged.iter().filter(|&&f| f).count(),
        flagged,
        mean,
        std,
        valid_count,
        metadata: EfficiencyMetadata::default(),
    })
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sum2 += v * v;
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt(), n)
}

/// Regions excluded by [`masked_stats`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsMask {
    /// Side of the square around the beam center hidden by cluster merging.
    pub dead_zone_px: f64,
    /// Radius of the intensifier's circular field around the beam center.
    pub field_radius_px: f64,
}

impl Default for StatsMask {
    fn default() -> Self {
        Self { dead_zone_px: 17.0, field_radius_px: 128.0 }
    }
}

/// Pixel lies inside the `side x side` square centered on `center`.
pub fn in_central_square(x: usize, y: usize, center: BeamCenter, side: f64) -> bool {
    let h = side / 2.0;
    (x as f64 - center.cx).abs() <= h && (y as f64 - center.cy).abs() <= h
}

/// Mean and standard deviation of valid pixels outside the dead zone and
/// inside the intensifier field.
pub fn masked_stats(e: &EfficiencyResult, mask: &StatsMask) -> (f64, f64) {
    let img = &e.eta;
    let c = img.beam_center;
    let r2 = mask.field_radius_px * mask.field_radius_px;
    let values = (0..img.height).flat_map(|y| (0..img.width).map(move |x| (x, y))).filter_map(|(x, y)| {
        let i = y * img.width + x;
        let keep = e.valid[i]
            && !in_central_square(x, y, c, mask.dead_zone_px)
            && (x as f64 - c.cx).powi(2) + (y as f64 - c.cy).powi(2) <= r2;
        keep.then_some(img.values[i])
    });
    let (mean, std, _) = mean_std(values);
    (mean, std)
}

/// Default combined transmission of the optics in front of the intensifier.
pub const DEFAULT_OPTICS_TRANSMISSION: f64 = 0.927;

/// Remove the optics losses from a system efficiency.
pub fn detector_only_efficiency(eta_mean: f64, optics_transmission: f64) -> Result<f64> {
    if !(optics_transmission > 0.0 && optics_transmission <= 1.0) {
        return Err(Error::Range(format!("optics transmission must be in (0, 1], got {optics_transmission}")));
    }
    Ok(eta_mean / optics_transmission)
}
