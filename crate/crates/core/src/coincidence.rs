//! Timing resolution from split-sensor arrival-time differences, exclusive
//! coincidence pairing, and the position-correlation diagnostic used to spot
//! double counting.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::event_model::{ns_to_toa_ticks, BeamCenter, Centroid, CoincidencePair, SENSOR_SIZE, TOA_TICK_NS};

/// Uniform 1-D histogram; bin `i` covers `[lo + i w, lo + (i + 1) w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram1D {
    pub lo_ns: f64,
    pub width_ns: f64,
    pub counts: Vec<u64>,
}

impl Histogram1D {
    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo_ns + (i as f64 + 0.5) * self.width_ns
    }

    pub fn hi_ns(&self) -> f64 {
        self.lo_ns + self.counts.len() as f64 * self.width_ns
    }

    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if v < self.lo_ns {
            return None;
        }
        let i = ((v - self.lo_ns) / self.width_ns).floor() as usize;
        (i < self.counts.len()).then_some(i)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Binning of the arrival-time-difference histogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtoaHistogramConfig {
    pub bin_width_ns: f64,
    /// Bins centered on multiples of the width cover `[-range, +range]`.
    pub range_ns: f64,
}

impl Default for DtoaHistogramConfig {
    fn default() -> Self {
        Self { bin_width_ns: TOA_TICK_NS, range_ns: 500.0 }
    }
}

/// Histogram of `toa_T - toa_B`, with bins symmetric about zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DtoaHistogram {
    pub hist: Histogram1D,
}

impl DtoaHistogram {
    pub fn empty(cfg: &DtoaHistogramConfig) -> Self {
        let w = cfg.bin_width_ns;
        let k = (cfg.range_ns / w + 1e-9).floor() as usize;
        Self {
            hist: Histogram1D { lo_ns: -(k as f64 + 0.5) * w, width_ns: w, counts: vec![0; 2 * k + 1] },
        }
    }
}

/// Histogram `toa_T - toa_B` over every top/bottom centroid pairing that
/// lands inside the histogram range. Top is `y < cy`, bottom `y >= cy`.
pub fn split_sensor_dtoa(centroids: &[Centroid], center: BeamCenter, cfg: &DtoaHistogramConfig) -> DtoaHistogram {
    let mut out = DtoaHistogram::empty(cfg);
    let mut top: Vec<u64> = Vec::new();
    let mut bottom: Vec<u64> = Vec::new();
    for c in centroids {
        if f64::from(c.y) < center.cy {
            top.push(c.toa);
        } else {
            bottom.push(c.toa);
        }
    }
    top.sort_unstable();
    bottom.sort_unstable();

    let h = &mut out.hist;
    let reach = (h.hi_ns().max(-h.lo_ns) / TOA_TICK_NS).ceil() as u64 + 1;
    let mut start = 0;
    for &t in &top {
        while start < bottom.len() && bottom[start] + reach < t {
            start += 1;
        }
        for &b in &bottom[start..] {
            if b > t + reach {
                break;
            }
            let d = (t as i64 - b as i64) as f64 * TOA_TICK_NS;
            if let Some(i) = h.bin_of(d) {
                h.counts[i] += 1;
            }
        }
    }
    out
}

/// Full width at half maximum by linear interpolation of the half-max
/// crossings on either side of the highest bin.
pub fn fwhm(h: &Histogram1D) -> Result<f64> {
    let counts = &h.counts;
    let (imax, &max) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .ok_or(Error::EmptyHistogram)?;
    if max == 0 {
        return Err(Error::EmptyHistogram);
    }
    let half = max as f64 / 2.0;
    let n = |i: usize| counts[i] as f64;

    let mut lo = imax;
    while lo > 0 && n(lo - 1) >= half {
        lo -= 1;
    }
    if lo == 0 {
        return Err(Error::NoHalfCrossing);
    }
    let mut hi = imax;
    while hi + 1 < counts.len() && n(hi + 1) >= half {
        hi += 1;
    }
    if hi + 1 == counts.len() {
        return Err(Error::NoHalfCrossing);
    }
    let left = h.bin_center(lo - 1) + (half - n(lo - 1)) / (n(lo) - n(lo - 1)) * h.width_ns;
    let right = h.bin_center(hi) + (half - n(hi)) / (n(hi + 1) - n(hi)) * h.width_ns;
    Ok(right - left)
}

/// Single-detector resolution from the width of a two-detector difference.
pub fn temporal_resolution(fwhm_ns: f64) -> f64 {
    fwhm_ns / std::f64::consts::SQRT_2
}

/// Coincidence windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairWindows {
    /// Maximum `|toa_1 - toa_2|`, ns.
    pub dtoa_ns: f64,
    /// Maximum `|x_1 + x_2|` and `|y_1 + y_2|` in the beam frame, pixels.
    pub sigma_xy_px: f64,
}

impl Default for PairWindows {
    fn default() -> Self {
        Self { dtoa_ns: 20.0, sigma_xy_px: 20.0 }
    }
}

impl PairWindows {
    pub fn validate(&self) -> Result<()> {
        if !(self.dtoa_ns > 0.0 && self.sigma_xy_px > 0.0) {
            return Err(Error::Config("pair windows must be > 0".into()));
        }
        Ok(())
    }

    /// Spatial anti-correlation residuals `(|x1 + x2 - 2cx|, |y1 + y2 - 2cy|)`.
    pub fn residuals(a: &Centroid, b: &Centroid, center: BeamCenter) -> (f64, f64) {
        (
            (f64::from(a.x) + f64::from(b.x) - 2.0 * center.cx).abs(),
            (f64::from(a.y) + f64::from(b.y) - 2.0 * center.cy).abs(),
        )
    }

    /// All three window conditions.
    pub fn accepts(&self, a: &Centroid, b: &Centroid, center: BeamCenter) -> bool {
        let (sx, sy) = Self::residuals(a, b, center);
        a.toa.abs_diff(b.toa) <= ns_to_toa_ticks(self.dtoa_ns) && sx <= self.sigma_xy_px && sy <= self.sigma_xy_px
    }
}

fn check_sorted(centroids: &[Centroid]) -> Result<()> {
    match centroids.windows(2).position(|w| w[0].toa > w[1].toa) {
        Some(i) => Err(Error::UnsortedInput { index: i + 1 }),
        None => Ok(()),
    }
}

/// Greedy chronological exclusive pairing.
///
/// Each unmatched centroid takes the unmatched later partner inside all
/// three windows with the smallest `|dtoa|`, then the smallest x residual.
pub fn find_pairs(centroids: &[Centroid], w: &PairWindows, center: BeamCenter) -> Result<Vec<CoincidencePair>> {
    w.validate()?;
    check_sorted(centroids)?;
    let dt = ns_to_toa_ticks(w.dtoa_ns);
    let mut matched = vec![false; centroids.len()];
    let mut pairs = Vec::new();

    for i in 0..centroids.len() {
        if matched[i] {
            continue;
        }
        let a = &centroids[i];
        let mut best: Option<(u64, f64, usize)> = None;
        for (j, b) in centroids.iter().enumerate().skip(i + 1) {
            let d = b.toa - a.toa;
            if d > dt {
                break;
            }
            if matched[j] {
                continue;
            }
            let (sx, sy) = PairWindows::residuals(a, b, center);
            if sx > w.sigma_xy_px || sy > w.sigma_xy_px {
                continue;
            }
            if best.is_none_or(|(bd, bsx, _)| (d, sx) < (bd, bsx)) {
                best = Some((d, sx, j));
            }
        }
        if let Some((_, _, j)) = best {
            matched[i] = true;
            matched[j] = true;
            let b = centroids[j];
            pairs.push(CoincidencePair { a: *a, b, dtoa: a.toa as i64 - b.toa as i64 });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Self::X),
            "y" | "Y" => Ok(Self::Y),
            _ => Err(Error::Config(format!("axis must be x or y, got {s:?}"))),
        }
    }
}

/// 2-D histogram of one coordinate of temporally close centroid pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrHist2D {
    pub axis: Axis,
    /// `counts[c1 * 256 + c2]`, `c1` from the earlier centroid.
    pub counts: Vec<u64>,
    pub total: u64,
    /// Fraction of counts with `|c2 - c1| <= band`.
    pub diagonal_fraction: f64,
    /// Fraction of counts with `|c1 + c2 - 2c| <= band`.
    pub anti_diagonal_fraction: f64,
}

impl CorrHist2D {
    pub fn get(&self, c1: usize, c2: usize) -> u64 {
        self.counts[c1 * SENSOR_SIZE + c2]
    }
}

/// Every pair with `|dtoa| <= dtoa_ns`, no spatial cut and no exclusivity.
pub fn correlation_hist(centroids: &[Centroid], dtoa_ns: f64, center: BeamCenter, axis: Axis, band_px: f64) -> CorrHist2D {
    let dt = ns_to_toa_ticks(dtoa_ns);
    let coord = |c: &Centroid| match axis {
        Axis::X => c.x as usize,
        Axis::Y => c.y as usize,
    };
    let mut counts = vec![0u64; SENSOR_SIZE * SENSOR_SIZE];
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            if b.toa.abs_diff(a.toa) > dt {
                break;
            }
            counts[coord(a) * SENSOR_SIZE + coord(b)] += 1;
        }
    }

    let c = match axis {
        Axis::X => center.cx,
        Axis::Y => center.cy,
    };
    let (mut total, mut diag, mut anti) = (0u64, 0u64, 0u64);
    for c1 in 0..SENSOR_SIZE {
        for c2 in 0..SENSOR_SIZE {
            let n = counts[c1 * SENSOR_SIZE + c2];
            if n == 0 {
                continue;
            }
            total += n;
            if (c2 as f64 - c1 as f64).abs() <= band_px {
                diag += n;
            }
            if (c1 as f64 + c2 as f64 - 2.0 * c).abs() <= band_px {
                anti += n;
            }
        }
    }
    let frac = |k: u64| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    CorrHist2D { axis, counts, total, diagonal_fraction: frac(diag), anti_diagonal_fraction: frac(anti) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::GAUSSIAN_FWHM_PER_SIGMA;

    fn cen(x: u8, y: u8, toa: u64) -> Centroid {
        Centroid { x, y, toa, size: 1, total_tot: 1 }
    }

    #[test]
    fn dtoa_histogram_geometry() {
        let h = DtoaHistogram::empty(&DtoaHistogramConfig::default());
        assert_eq!(h.hist.counts.len(), 641);
        assert_eq!(h.hist.bin_center(320), 0.0);
        assert_eq!(h.hist.bin_center(0), -500.0);
    }

    #[test]
    fn equal_toa_lands_in_zero_bin() {
        let c = BeamCenter::sensor_center();
        let h = split_sensor_dtoa(&[cen(100, 10, 5000), cen(150, 200, 5000)], c, &DtoaHistogramConfig::default());
        assert_eq!(h.hist.total(), 1);
        assert_eq!(h.hist.counts[320], 1);
        let only_bottom = split_sensor_dtoa(&[cen(100, 200, 5000), cen(150, 200, 5000)], c, &DtoaHistogramConfig::default());
        assert_eq!(only_bottom.hist.total(), 0);
    }

    #[test]
    fn dtoa_sign_and_range() {
        let c = BeamCenter::sensor_center();
        let cfg = DtoaHistogramConfig::default();
        // T is 8 ticks later than B: +12.5 ns
        let h = split_sensor_dtoa(&[cen(10, 200, 1000), cen(10, 10, 1008)], c, &cfg);
        assert_eq!(h.hist.counts[328], 1);
        // 321 ticks = 501.6 ns is outside the +-500 ns range
        let h = split_sensor_dtoa(&[cen(10, 200, 1000), cen(10, 10, 1321)], c, &cfg);
        assert_eq!(h.hist.total(), 0);
    }

    /// Brute-force all (T, B) pairings against the windowed scan.
    #[test]
    fn split_sensor_matches_brute_force() {
        let c = BeamCenter::new(127.5, 127.5);
        let cfg = DtoaHistogramConfig { bin_width_ns: 3.125, range_ns: 60.0 };
        let mut cs: Vec<Centroid> = (0..400u64)
            .map(|i| cen((i * 37 % 256) as u8, (i * 91 % 256) as u8, i * 7 % 900))
            .collect();
        cs.sort_by_key(|c| c.toa);
        let fast = split_sensor_dtoa(&cs, c, &cfg);
        let mut slow = DtoaHistogram::empty(&cfg);
        for t in cs.iter().filter(|c| f64::from(c.y) < 127.5) {
            for b in cs.iter().filter(|c| f64::from(c.y) >= 127.5) {
                let d = (t.toa as i64 - b.toa as i64) as f64 * TOA_TICK_NS;
                if let Some(i) = slow.hist.bin_of(d) {
                    slow.hist.counts[i] += 1;
                }
            }
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn fwhm_of_sampled_gaussian() {
        let sigma = 10.0;
        let w = 0.25;
        let counts = (0..2001)
            .map(|i| {
                let x = (i as f64 - 1000.0) * w;
                (1e6 * (-x * x / (2.0 * sigma * sigma)).exp()).round() as u64
            })
            .collect();
        let h = Histogram1D { lo_ns: -1000.5 * w, width_ns: w, counts };
        let f = fwhm(&h).unwrap();
        let expected = GAUSSIAN_FWHM_PER_SIGMA * sigma;
        assert!((f - expected).abs() / expected < 0.02, "fwhm {f} vs {expected}");
        assert!((expected - 23.548).abs() < 1e-3);
    }

    #[test]
    fn fwhm_of_flat_top() {
        let h = Histogram1D { lo_ns: 0.0, width_ns: 1.5625, counts: vec![0, 0, 7, 7, 7, 0, 0] };
        assert!((fwhm(&h).unwrap() - 3.0 * 1.5625).abs() < 1e-12);
    }

    #[test]
    fn fwhm_errors() {
        let empty = Histogram1D { lo_ns: 0.0, width_ns: 1.0, counts: vec![0; 5] };
        assert!(matches!(fwhm(&empty), Err(Error::EmptyHistogram)));
        let edge = Histogram1D { lo_ns: 0.0, width_ns: 1.0, counts: vec![9, 8, 1, 0] };
        assert!(matches!(fwhm(&edge), Err(Error::NoHalfCrossing)));
    }

    #[test]
    fn temporal_resolution_examples() {
        assert!((temporal_resolution(10.3) - 7.283).abs() < 1e-3);
        assert_eq!(temporal_resolution(0.0), 0.0);
        assert!((temporal_resolution(11.8) - 8.344).abs() < 1e-3);
    }

    #[test]
    fn pair_predicate_examples() {
        let c = BeamCenter::new(128.0, 128.0);
        let dt = ns_to_toa_ticks(5.0);
        // beam frame (20, 30) and (-19, -32)
        let cs = [cen(148, 158, 1000), cen(109, 96, 1000 + dt)];
        let pairs = find_pairs(&cs, &PairWindows::default(), c).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].dtoa, -(dt as i64));
        // x1 + x2 = 25 in the beam frame
        let cs = [cen(148, 158, 1000), cen(133, 98, 1000)];
        assert!(find_pairs(&cs, &PairWindows::default(), c).unwrap().is_empty());
    }

    #[test]
    fn pairing_prefers_closest_in_time_and_is_exclusive() {
        let c = BeamCenter::new(128.0, 128.0);
        let cs = [cen(148, 148, 100), cen(108, 108, 108), cen(109, 108, 104), cen(147, 148, 109)];
        let mut sorted = cs.to_vec();
        sorted.sort_by_key(|c| c.toa);
        let pairs = find_pairs(&sorted, &PairWindows::default(), c).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].a.toa, pairs[0].b.toa), (100, 104));
        assert_eq!((pairs[1].a.toa, pairs[1].b.toa), (108, 109));
    }

    #[test]
    fn pairing_rejects_unsorted() {
        let cs = [cen(1, 1, 10), cen(1, 1, 9)];
        assert!(matches!(
            find_pairs(&cs, &PairWindows::default(), BeamCenter::default()),
            Err(Error::UnsortedInput { index: 1 })
        ));
    }

    #[test]
    fn correlation_hist_bands() {
        let c = BeamCenter::sensor_center();
        let empty = correlation_hist(&[cen(1, 1, 0), cen(2, 2, 1000)], 20.0, c, Axis::X, 20.0);
        assert_eq!((empty.total, empty.diagonal_fraction, empty.anti_diagonal_fraction), (0, 0.0, 0.0));

        let cs = [cen(40, 0, 0), cen(215, 0, 3), cen(41, 0, 500), cen(42, 0, 501)];
        let h = correlation_hist(&cs, 20.0, c, Axis::X, 20.0);
        assert_eq!(h.total, 2);
        assert_eq!(h.get(40, 215), 1);
        assert_eq!(h.get(41, 42), 1);
        assert_eq!(h.anti_diagonal_fraction, 0.5);
        assert_eq!(h.diagonal_fraction, 0.5);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn pairs_respect_windows_and_symmetry(
            raw in proptest::collection::vec((0u8..=255, 0u8..=255, 0u64..400), 0..150),
            dtoa_ns in 2.0f64..40.0,
            sigma in 1.0f64..30.0,
        ) {
            use proptest::prelude::*;
            let center = BeamCenter::sensor_center();
            let mut cs: Vec<Centroid> = raw.into_iter().map(|(x, y, t)| cen(x, y, t)).collect();
            cs.sort_by_key(|c| c.toa);
            let w = PairWindows { dtoa_ns, sigma_xy_px: sigma };
            let pairs = find_pairs(&cs, &w, center).unwrap();
            for p in &pairs {
                prop_assert!(w.accepts(&p.a, &p.b, center));
                prop_assert!(p.dtoa <= 0);
            }
            let mut used: Vec<Centroid> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
            let n_used = used.len();
            used.sort_by_key(|c| (c.toa, c.x, c.y));
            used.dedup();
            // duplicates in the input are legitimate distinct centroids, so only
            // check that no centroid is used more often than it occurs
            prop_assert!(used.len() <= n_used);
            for u in &used {
                let occurs = cs.iter().filter(|c| *c == u).count();
                let taken = pairs.iter().flat_map(|p| [p.a, p.b]).filter(|c| c == u).count();
                prop_assert!(taken <= occurs);
            }
            let mirrored: Vec<Centroid> = cs.iter().map(|c| cen(255 - c.x, 255 - c.y, c.toa)).collect();
            prop_assert_eq!(find_pairs(&mirrored, &w, center).unwrap().len(), pairs.len());

            let h = correlation_hist(&cs, dtoa_ns, center, Axis::X, sigma);
            let dt = ns_to_toa_ticks(dtoa_ns);
            let brute = (0..cs.len())
                .flat_map(|i| (i + 1..cs.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| cs[i].toa.abs_diff(cs[j].toa) <= dt)
                .count() as u64;
            prop_assert_eq!(h.total, brute);
        }
    }
}
