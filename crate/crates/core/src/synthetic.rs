//! Seeded planted-anomaly graph set.
//!
//! Normal graphs (label 0) have 12..=20 nodes split into two halves. Each
//! within-half pair is joined with probability 0.7, each cross pair with
//! probability 0.05, and one bridge edge between node 0 and the first node
//! of the second half is always present.
//!
//! Anomalies (label 1) have 12..=20 nodes and join each pair independently
//! with probability 0.12.
//!
//! Graphs carry no attributes. The first 50 graphs are normal, the last 10
//! anomalous. All draws come from one stream of `seed`.

use rand::Rng;

use crate::graph::{Graph, GraphSet};
use crate::init::derived_rng;
use crate::tensor::Tensor;

pub const NORMAL_GRAPHS: usize = 50;
pub const ANOMALOUS_GRAPHS: usize = 10;
pub const NORMAL_LABEL: i64 = 0;
pub const ANOMALY_LABEL: i64 = 1;
pub const DATASET_NAME: &str = "PLANTED";

const MIN_NODES: usize = 12;
const MAX_NODES: usize = 20;
const P_WITHIN: f64 = 0.7;
const P_ACROSS: f64 = 0.05;
const P_SPARSE: f64 = 0.12;

pub fn two_community_graph(rng: &mut impl Rng) -> Graph {
    let n = rng.random_range(MIN_NODES..=MAX_NODES);
    let half = n / 2;
    let mut edges = vec![(0, half)];
    for i in 0..n {
        for j in i + 1..n {
            if i == 0 && j == half {
                continue;
            }
            let p = if (i < half) == (j < half) { P_WITHIN } else { P_ACROSS };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges, Tensor::zeros(n, 0), NORMAL_LABEL).expect("valid edges")
}

pub fn sparse_random_graph(rng: &mut impl Rng) -> Graph {
    let n = rng.random_range(MIN_NODES..=MAX_NODES);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(P_SPARSE) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges, Tensor::zeros(n, 0), ANOMALY_LABEL).expect("valid edges")
}

pub fn planted_set(seed: u64) -> GraphSet {
    let mut rng = derived_rng(seed, "planted");
    let mut graphs: Vec<Graph> = (0..NORMAL_GRAPHS).map(|_| two_community_graph(&mut rng)).collect();
    graphs.extend((0..ANOMALOUS_GRAPHS).map(|_| sparse_random_graph(&mut rng)));
    GraphSet::new(DATASET_NAME, graphs).expect("non-empty")
}
