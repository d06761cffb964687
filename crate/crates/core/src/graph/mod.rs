//! Attributed undirected graphs and graph collections.

mod canonical;
mod split;
mod tudataset;

use std::collections::BTreeSet;

use rand::seq::index::sample;

pub use canonical::{CanonicalGraph, CanonicalSet};
pub use split::{make_anomaly_split, AnomalySplit};
pub use tudataset::{parse_tudataset, write_tudataset};

use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Tensor,
    features: Tensor,
    label: i64,
}

impl Graph {
    /// Validates that `adjacency` is a symmetric 0/1 matrix and that
    /// `features` has one row per node.
    pub fn new(adjacency: Tensor, features: Tensor, label: i64) -> Result<Self> {
        let n = adjacency.rows();
        if n == 0 {
            return Err(Error::Contract("graph without nodes".into()));
        }
        if adjacency.cols() != n {
            return Err(Error::Contract(format!(
                "adjacency must be square, got {:?}",
                adjacency.shape()
            )));
        }
        if features.rows() != n {
            return Err(Error::Contract(format!(
                "{} feature rows for {n} nodes",
                features.rows()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let a = adjacency.get(i, j);
                if a != 0.0 && a != 1.0 {
                    return Err(Error::Contract(format!("adjacency[{i},{j}] = {a}")));
                }
                if a != adjacency.get(j, i) {
                    return Err(Error::Contract(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Graph {
            adjacency,
            features,
            label,
        })
    }

    /// Graph from 0-based undirected edges; duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], features: Tensor, label: i64) -> Result<Self> {
        let mut adj = Tensor::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Contract(format!("edge ({i},{j}) outside {n} nodes")));
            }
            adj.set(i, j, 1.0);
            adj.set(j, i, 1.0);
        }
        Graph::new(adj, features, label)
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn attr_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn label(&self) -> i64 {
        self.label
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row_slice(i)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, _)| j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Undirected edges `(i, j)` with `i <= j`, self-loops included.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i..n {
                if self.adjacency.get(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        Graph {
            adjacency: self.adjacency.permute_both(perm),
            features: self.features.permute_rows(perm),
            label: self.label,
        }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalized_adjacency(g: &Graph) -> Tensor {
    let n = g.node_count();
    let a = g.adjacency();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row_slice(i).iter().sum::<f64>() + 1.0;
            1.0 / deg.sqrt()
        })
        .collect();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if v != 0.0 {
                out.set(i, j, inv_sqrt[i] * v * inv_sqrt[j]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphStats {
    pub graphs: usize,
    pub avg_nodes: f64,
    /// Each undirected edge counted once.
    pub avg_edges: f64,
    /// Each undirected edge counted in both directions (self-loops once).
    pub avg_edges_directed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    name: String,
    graphs: Vec<Graph>,
    label_vocabulary: BTreeSet<i64>,
}

impl GraphSet {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Contract("graph set must contain at least one graph".into()));
        }
        let d = graphs[0].attr_dim();
        if graphs.iter().any(|g| g.attr_dim() != d) {
            return Err(Error::Contract("graphs disagree on attribute width".into()));
        }
        let label_vocabulary = graphs.iter().map(Graph::label).collect();
        Ok(GraphSet {
            name: name.into(),
            graphs,
            label_vocabulary,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn label_vocabulary(&self) -> &BTreeSet<i64> {
        &self.label_vocabulary
    }

    pub fn attr_dim(&self) -> usize {
        self.graphs[0].attr_dim()
    }

    pub fn stats(&self) -> GraphStats {
        let m = self.graphs.len() as f64;
        let nodes: usize = self.graphs.iter().map(Graph::node_count).sum();
        let (mut undirected, mut directed) = (0usize, 0usize);
        for g in &self.graphs {
            for (i, j) in g.edges() {
                undirected += 1;
                directed += if i == j { 1 } else { 2 };
            }
        }
        GraphStats {
            graphs: self.graphs.len(),
            avg_nodes: nodes as f64 / m,
            avg_edges: undirected as f64 / m,
            avg_edges_directed: directed as f64 / m,
        }
    }

    /// Seeded random subset of at most `max` graphs, original order kept.
    pub fn subsample(&self, max: usize, seed: u64) -> GraphSet {
        if max >= self.graphs.len() {
            return self.clone();
        }
        let mut picked = sample(&mut seeded_rng(seed), self.graphs.len(), max).into_vec();
        picked.sort_unstable();
        let graphs: Vec<Graph> = picked.into_iter().map(|i| self.graphs[i].clone()).collect();
        GraphSet::new(self.name.clone(), graphs).expect("non-empty subset of a valid set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path2() -> Graph {
        Graph::from_edges(2, &[(0, 1)], Tensor::zeros(2, 0), 0).unwrap()
    }

    #[test]
    fn rejects_asymmetric_adjacency() {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(Graph::new(a, Tensor::zeros(2, 0), 0).is_err());
        let w = Tensor::matrix(2, 2, vec![0.0, 2.0, 2.0, 0.0]);
        assert!(Graph::new(w, Tensor::zeros(2, 0), 0).is_err());
    }

    #[test]
    fn single_node_normalized_is_one() {
        let g = Graph::from_edges(1, &[], Tensor::zeros(1, 0), 0).unwrap();
        assert_eq!(normalized_adjacency(&g).data(), &[1.0]);
    }

    #[test]
    fn two_node_path_normalized_is_half() {
        let a = normalized_adjacency(&path2());
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_is_permutation_equivariant() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (1, 3)], Tensor::zeros(4, 0), 0).unwrap();
        let perm = [2, 0, 3, 1];
        let lhs = normalized_adjacency(&g.permuted(&perm));
        let rhs = normalized_adjacency(&g).permute_both(&perm);
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn stats_count_edges_both_ways() {
        let set = GraphSet::new("t", vec![path2(), Graph::from_edges(1, &[], Tensor::zeros(1, 0), 1).unwrap()]).unwrap();
        let s = set.stats();
        assert_eq!(s.graphs, 2);
        assert!((s.avg_nodes - 1.5).abs() < 1e-15);
        assert!((s.avg_edges - 0.5).abs() < 1e-15);
        assert!((s.avg_edges_directed - 1.0).abs() < 1e-15);
    }

    #[test]
    fn subsample_is_seeded() {
        let graphs: Vec<Graph> = (0..20)
            .map(|k| Graph::from_edges(1 + k % 3, &[], Tensor::zeros(1 + k % 3, 0), k as i64).unwrap())
            .collect();
        let set = GraphSet::new("s", graphs).unwrap();
        let a = set.subsample(5, 9);
        assert_eq!(a.len(), 5);
        assert_eq!(a, set.subsample(5, 9));
        assert_eq!(set.subsample(50, 9).len(), 20);
    }
}
