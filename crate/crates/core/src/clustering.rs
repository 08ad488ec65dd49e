//! Greedy seed-anchored box clustering of time-sorted pixel events, and
//! label-based quality metrics against synthetic ground truth.
//!
//! Scanning in toa order, the earliest unassigned event becomes a seed.
//! The next `lookahead` events (assigned or not) are compared against a box
//! of `box_xy x box_xy` pixels centered on the seed and `box_t_ns` after it;
//! unassigned events inside the box join the seed's cluster. The box never
//! moves or grows.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_model::{ns_to_toa_ticks, Cluster, EventStream, RawEvent};
use crate::synth::{EventLabel, GroundTruth};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    /// Full box width in pixels; odd.
    pub box_xy: u32,
    pub box_t_ns: f64,
    /// Number of following events compared against each seed.
    pub lookahead: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { box_xy: 17, box_t_ns: 300.0, lookahead: 200 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.box_xy < 1 || self.box_xy.is_multiple_of(2) {
            return Err(Error::Config(format!("box_xy must be odd and >= 1, got {}", self.box_xy)));
        }
        if !(self.box_t_ns > 0.0 && self.box_t_ns.is_finite()) {
            return Err(Error::Config(format!("box_t_ns must be > 0, got {}", self.box_t_ns)));
        }
        if self.lookahead < 1 {
            return Err(Error::Config("lookahead must be >= 1".into()));
        }
        Ok(())
    }

    fn half_width(&self) -> i32 {
        ((self.box_xy - 1) / 2) as i32
    }
}

fn check_sorted(stream: &EventStream) -> Result<()> {
    if stream.is_sorted() {
        return Ok(());
    }
    let index = stream
        .events
        .windows(2)
        .position(|w| w[0].toa > w[1].toa)
        .map_or(0, |i| i + 1);
    Err(Error::UnsortedInput { index })
}

fn cluster_slice(events: &[RawEvent], offset: usize, p: &ClusterParams) -> Vec<Cluster> {
    let half = p.half_width();
    let box_t = ns_to_toa_ticks(p.box_t_ns);
    let mut assigned = vec![false; events.len()];
    let mut clusters = Vec::new();

    for i in 0..events.len() {
        if assigned[i] {
            continue;
        }
        assigned[i] = true;
        let seed = events[i];
        let mut cluster = Cluster::singleton(seed, offset + i);
        let end = events.len().min(i + 1 + p.lookahead);
        for j in i + 1..end {
            let e = events[j];
            // sorted input: nothing later can fall inside the time box
            if e.toa - seed.toa > box_t {
                break;
            }
            if !assigned[j]
                && (i32::from(e.x) - i32::from(seed.x)).abs() <= half
                && (i32::from(e.y) - i32::from(seed.y)).abs() <= half
            {
                assigned[j] = true;
                cluster.members.push(e);
                cluster.indices.push(offset + j);
            }
        }
        clusters.push(cluster);
    }
    clusters
}

/// Partition a toa-sorted stream into clusters, emitted in seed order.
pub fn identify_clusters(stream: &EventStream, p: &ClusterParams) -> Result<Vec<Cluster>> {
    p.validate()?;
    check_sorted(stream)?;
    Ok(cluster_slice(&stream.events, 0, p))
}

/// Parallel form of [`identify_clusters`] with identical output.
///
/// The stream is cut only where consecutive events are more than the time
/// box apart; no cluster can span such a gap, so chunks are independent.
pub fn identify_clusters_par(stream: &EventStream, p: &ClusterParams) -> Result<Vec<Cluster>> {
    p.validate()?;
    check_sorted(stream)?;
    let events = &stream.events;
    let box_t = ns_to_toa_ticks(p.box_t_ns);
    let n_chunks = (rayon::current_num_threads() * 4).max(1);
    let target = events.len().div_ceil(n_chunks).max(4096);

    let mut bounds = vec![0usize];
    let mut next = target;
    while next < events.len() {
        match (next..events.len()).find(|&k| events[k].toa - events[k - 1].toa > box_t) {
            Some(cut) => {
                bounds.push(cut);
                next = cut + target;
            }
            None => break,
        }
    }
    bounds.push(events.len());

    let parts: Vec<Vec<Cluster>> = bounds
        .par_windows(2)
        .map(|w| cluster_slice(&events[w[0]..w[1]], w[0], p))
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

/// Label-based clustering quality; all fields lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterQuality {
    /// Detected photons whose events ended up in two or more clusters.
    pub split_rate: f64,
    /// Clusters holding events of two or more photons.
    pub merge_rate: f64,
    /// Mean majority-photon fraction per cluster.
    pub purity: f64,
    /// Mean fraction of a photon's events captured by its majority cluster.
    pub completeness: f64,
}

/// Compare clusters against oracle labels. Background events are ignored.
pub fn cluster_quality(clusters: &[Cluster], truth: &GroundTruth) -> Result<ClusterQuality> {
    let labels = &truth.event_labels;
    // (photon, cluster) for every photon-labeled event
    let mut hits: Vec<(u32, u32)> = Vec::new();
    let mut photon_clusters = 0usize;
    let mut merged = 0usize;
    let mut purity_sum = 0.0;
    let mut counts: HashMap<u32, u32> = HashMap::new();

    for (ci, c) in clusters.iter().enumerate() {
        counts.clear();
        for &idx in &c.indices {
            let label = labels
                .get(idx)
                .ok_or(Error::LabelMismatch { index: idx, labels: labels.len() })?;
            if let EventLabel::Photon(id) = *label {
                *counts.entry(id).or_default() += 1;
                hits.push((id, ci as u32));
            }
        }
        if counts.is_empty() {
            continue;
        }
        photon_clusters += 1;
        if counts.len() >= 2 {
            merged += 1;
        }
        let total: u32 = counts.values().sum();
        let majority = *counts.values().max().unwrap();
        purity_sum += f64::from(majority) / f64::from(total);
    }

    hits.sort_unstable();
    let mut photons = 0usize;
    let mut split = 0usize;
    let mut completeness_sum = 0.0;
    let mut i = 0;
    while i < hits.len() {
        let photon = hits[i].0;
        let mut j = i;
        let (mut n_clusters, mut best, mut total) = (0u32, 0u32, 0u32);
        while j < hits.len() && hits[j].0 == photon {
            let cluster = hits[j].1;
            let mut k = j;
            while k < hits.len() && hits[k] == (photon, cluster) {
                k += 1;
            }
            let n = (k - j) as u32;
            n_clusters += 1;
            best = best.max(n);
            total += n;
            j = k;
        }
        photons += 1;
        if n_clusters >= 2 {
            split += 1;
        }
        completeness_sum += f64::from(best) / f64::from(total);
        i = j;
    }

    let ratio = |num: f64, den: usize, empty: f64| if den == 0 { empty } else { num / den as f64 };
    Ok(ClusterQuality {
        split_rate: ratio(split as f64, photons, 0.0),
        merge_rate: ratio(merged as f64, photon_clusters, 0.0),
        purity: ratio(purity_sum, photon_clusters, 1.0),
        completeness: ratio(completeness_sum, photons, 1.0),
    })
}

/// True when `clusters` are disjoint and cover `0..n_events` exactly once.
pub fn is_partition(clusters: &[Cluster], n_events: usize) -> bool {
    let mut seen = vec![false; n_events];
    for c in clusters {
        if c.is_empty() || c.members.len() != c.indices.len() {
            return false;
        }
        for &i in &c.indices {
            if i >= n_events || seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.into_iter().all(|s| s)
}
