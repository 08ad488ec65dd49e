//! Cluster counts on realistic streams. Greedy seed-anchored clustering is
//! not monotone event by event, but on SPDC-like data wider windows merge.

use tpxcal::clustering::{identify_clusters_par, ClusterParams};
use tpxcal::synth::{generate_stream, SynthConfig};

fn counts(vary: impl Fn(usize) -> ClusterParams, steps: usize) -> Vec<usize> {
    let (stream, _) = generate_stream(&SynthConfig { duration: 0.02, ..SynthConfig::default() }).unwrap();
    (0..steps).map(|i| identify_clusters_par(&stream, &vary(i)).unwrap().len()).collect()
}

#[test]
fn wider_time_box_does_not_add_clusters() {
    let boxes = [17.0, 50.0, 100.0, 200.0, 300.0];
    let n = counts(|i| ClusterParams { box_t_ns: boxes[i], ..ClusterParams::default() }, boxes.len());
    assert!(n.windows(2).all(|w| w[1] <= w[0]), "{n:?}");
}

#[test]
fn longer_lookahead_does_not_add_clusters() {
    let looks = [5, 20, 50, 200, 400];
    let n = counts(|i| ClusterParams { lookahead: looks[i], ..ClusterParams::default() }, looks.len());
    assert!(n.windows(2).all(|w| w[1] <= w[0]), "{n:?}");
}
