//! Domain types shared by every stage: raw pixel events, clusters,
//! centroids, pixel images and coincidence pairs.
//!
//! Times are carried as integer ticks. A ToA tick is 1.5625 ns and a ToT
//! tick is 25 ns; every window is converted to ticks once so that all
//! temporal comparisons are exact integer comparisons.

use crate::error::{Error, Result};

/// Duration of one time-of-arrival tick in nanoseconds.
pub const TOA_TICK_NS: f64 = 1.5625;
/// Duration of one time-over-threshold tick in nanoseconds.
pub const TOT_TICK_NS: f64 = 25.0;
/// Sensor side length in pixels.
pub const SENSOR_SIZE: usize = 256;
/// Number of pixels on the sensor.
pub const SENSOR_PIXELS: usize = SENSOR_SIZE * SENSOR_SIZE;

/// Largest tick count `t` with `t * TOA_TICK_NS <= ns`.
///
/// Negative or non-finite windows map to zero ticks.
pub fn ns_to_toa_ticks(ns: f64) -> u64 {
    if !ns.is_finite() || ns <= 0.0 {
        return 0;
    }
    let t = (ns / TOA_TICK_NS).floor();
    // guard against 299.99999 style representation error on exact multiples
    let t = if (t + 1.0) * TOA_TICK_NS <= ns { t + 1.0 } else { t };
    t as u64
}

#[inline]
pub fn toa_ticks_to_ns(ticks: u64) -> f64 {
    ticks as f64 * TOA_TICK_NS
}

#[inline]
pub fn tot_ticks_to_ns(ticks: u16) -> f64 {
    f64::from(ticks) * TOT_TICK_NS
}

/// One thresholded pixel firing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RawEvent {
    pub x: u8,
    pub y: u8,
    /// Time of arrival in 1.5625 ns ticks.
    pub toa: u64,
    /// Time over threshold in 25 ns ticks, at least 1.
    pub tot: u16,
}

impl RawEvent {
    /// Checked constructor from wide coordinates.
    pub fn new(x: u16, y: u16, toa: u64, tot: u16) -> Result<Self> {
        if x as usize >= SENSOR_SIZE || y as usize >= SENSOR_SIZE {
            return Err(Error::Range(format!("pixel ({x}, {y}) outside 256x256 sensor")));
        }
        if tot == 0 {
            return Err(Error::Range("event with tot = 0".into()));
        }
        Ok(Self { x: x as u8, y: y as u8, toa, tot })
    }

    #[inline]
    pub fn toa_ns(&self) -> f64 {
        toa_ticks_to_ns(self.toa)
    }
}

/// A sequence of raw events from one acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub events: Vec<RawEvent>,
    /// Acquisition length in seconds.
    pub duration: f64,
    sorted: bool,
}

impl EventStream {
    /// Builds a stream, deriving the sorted flag with a single scan.
    pub fn new(events: Vec<RawEvent>, duration: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::Range(format!("stream duration must be > 0 s, got {duration}")));
        }
        let sorted = is_toa_sorted(&events);
        Ok(Self { events, duration, sorted })
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Stable sort by toa; sets the sorted flag.
    pub fn sort(&mut self) {
        if !self.sorted {
            self.events.sort_by_key(|e| e.toa);
            self.sorted = true;
        }
    }
}

pub(crate) fn is_toa_sorted(events: &[RawEvent]) -> bool {
    events.windows(2).all(|w| w[0].toa <= w[1].toa)
}

/// Events attributed to one intensifier flash.
///
/// Members are kept in stream order, so the first member is the seed
/// (earliest toa) and toa is non-decreasing across members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub members: Vec<RawEvent>,
    /// Position of each member in the source stream.
    pub indices: Vec<usize>,
}

impl Cluster {
    pub fn singleton(event: RawEvent, index: usize) -> Self {
        Self { members: vec![event], indices: vec![index] }
    }

    /// Position of the seed inside `members`.
    pub fn seed_index(&self) -> usize {
        0
    }

    pub fn seed(&self) -> &RawEvent {
        &self.members[0]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Single space-time coordinate assigned to a cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Centroid {
    pub x: u8,
    pub y: u8,
    /// ToA in 1.5625 ns ticks.
    pub toa: u64,
    /// Number of cluster members.
    pub size: u32,
    /// Summed ToT of all members, 25 ns ticks.
    pub total_tot: u32,
}

/// Real-valued beam center in pixel coordinates (pixel `i` is centered at `i`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamCenter {
    pub cx: f64,
    pub cy: f64,
}

impl BeamCenter {
    pub const fn new(cx: f64, cy: f64) -> Self {
        Self { cx, cy }
    }

    /// Geometric center of the sensor.
    pub const fn sensor_center() -> Self {
        Self { cx: 127.5, cy: 127.5 }
    }

    /// Pixel conjugate to `(x, y)` under reflection through the center,
    /// rounded to the nearest pixel, or `None` when it falls off the sensor.
    pub fn reflect_pixel(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let rx = (2.0 * self.cx - x as f64).round();
        let ry = (2.0 * self.cy - y as f64).round();
        let max = (SENSOR_SIZE - 1) as f64;
        if (0.0..=max).contains(&rx) && (0.0..=max).contains(&ry) {
            Some((rx as usize, ry as usize))
        } else {
            None
        }
    }
}

impl Default for BeamCenter {
    fn default() -> Self {
        Self::sensor_center()
    }
}

/// Shift a pixel coordinate into the frame where the beam center is the origin.
pub fn shift_to_beam_frame(p: (f64, f64), center: BeamCenter) -> (f64, f64) {
    (p.0 - center.cx, p.1 - center.cy)
}

/// Inverse of [`shift_to_beam_frame`].
pub fn shift_from_beam_frame(p: (f64, f64), center: BeamCenter) -> (f64, f64) {
    (p.0 + center.cx, p.1 + center.cy)
}

/// Physical meaning of the values stored in a [`PixelImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    Counts,
    CountsPerSecond,
    Efficiency,
    Dimensionless,
}

/// Row-major scalar field over the sensor (`values[y * width + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub units: Units,
    pub beam_center: BeamCenter,
}

impl PixelImage {
    /// All-zero sensor-sized image.
    pub fn zeros(units: Units) -> Self {
        Self::zeros_with_size(SENSOR_SIZE, SENSOR_SIZE, units)
    }

    pub fn zeros_with_size(width: usize, height: usize, units: Units) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            units,
            beam_center: BeamCenter::sensor_center(),
        }
    }

    pub fn from_fn(units: Units, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(units);
        for y in 0..img.height {
            for x in 0..img.width {
                img.values[y * img.width + x] = f(x, y);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] += v;
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn with_beam_center(mut self, center: BeamCenter) -> Self {
        self.beam_center = center;
        self
    }

    pub(crate) fn same_geometry(&self, other: &PixelImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Two centroids accepted as a coincidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoincidencePair {
    /// Earlier member.
    pub a: Centroid,
    pub b: Centroid,
    /// `toa_a - toa_b` in ticks.
    pub dtoa: i64,
}
