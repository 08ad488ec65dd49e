//! Reduce clusters to one space-time coordinate each.
//!
//! The position is the member pixel nearest the unweighted mean member
//! position. The arrival time depends on the [`ToaMethod`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event_model::{Centroid, Cluster, RawEvent};

/// How a cluster's arrival time is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ToaMethod {
    /// Mean of member ToAs, rounded to the nearest tick.
    MeanToa,
    /// ToA of the position-selected pixel.
    CenterPixel,
    /// Earliest member ToA.
    MinToa,
    /// ToA of the member with the largest ToT.
    #[default]
    MaxTot,
}

impl ToaMethod {
    pub const ALL: [ToaMethod; 4] = [Self::MeanToa, Self::CenterPixel, Self::MinToa, Self::MaxTot];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MeanToa => "mean",
            Self::CenterPixel => "center",
            Self::MinToa => "min-toa",
            Self::MaxTot => "max-tot",
        }
    }
}

impl fmt::Display for ToaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown toa method {s:?} (mean|center|min-toa|max-tot)")))
    }
}

/// Index of the member nearest the mean position.
///
/// Ties: earliest toa, then lowest `(y, x)`.
fn position_pixel(members: &[RawEvent]) -> usize {
    let n = members.len() as f64;
    let mx = members.iter().map(|e| f64::from(e.x)).sum::<f64>() / n;
    let my = members.iter().map(|e| f64::from(e.y)).sum::<f64>() / n;
    let key = |e: &RawEvent| {
        let d = (f64::from(e.x) - mx).powi(2) + (f64::from(e.y) - my).powi(2);
        (d, e.toa, e.y, e.x)
    };
    let mut best = 0;
    for i in 1..members.len() {
        if key(&members[i]).partial_cmp(&key(&members[best])) == Some(std::cmp::Ordering::Less) {
            best = i;
        }
    }
    best
}

pub fn centroid(c: &Cluster, method: ToaMethod) -> Result<Centroid> {
    let members = &c.members;
    if members.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let pos = &members[position_pixel(members)];
    let toa = match method {
        ToaMethod::MeanToa => {
            let n = members.len() as u128;
            let sum: u128 = members.iter().map(|e| u128::from(e.toa)).sum();
            ((2 * sum + n) / (2 * n)) as u64
        }
        ToaMethod::CenterPixel => pos.toa,
        ToaMethod::MinToa => members.iter().map(|e| e.toa).min().unwrap(),
        ToaMethod::MaxTot => {
            members
                .iter()
                .reduce(|best, e| if (e.tot, std::cmp::Reverse(e.toa)) > (best.tot, std::cmp::Reverse(best.toa)) { e } else { best })
                .unwrap()
                .toa
        }
    };
    Ok(Centroid {
        x: pos.x,
        y: pos.y,
        toa,
        size: members.len() as u32,
        total_tot: members.iter().map(|e| u32::from(e.tot)).sum(),
    })
}

/// Centroid every cluster and return the result stably sorted by toa.
pub fn centroid_stream(clusters: &[Cluster], method: ToaMethod) -> Result<Vec<Centroid>> {
    let mut out = clusters
        .par_iter()
        .map(|c| centroid(c, method))
        .collect::<Result<Vec<_>>>()?;
    out.par_sort_by_key(|c| c.toa);
    Ok(out)
}
