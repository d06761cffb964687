//! Structural node encodings and the concatenated input features.
//!
//! Column `t` (1-based) of the structural encoding is the probability that a
//! `t`-step random walk on `D⁻¹A` returns to its start node. Isolated nodes
//! have an all-zero transition row and therefore an all-zero encoding.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Width of the optional one-hot degree block; degrees at or above the last
/// bin share it.
pub const DEGREE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEncoding {
    matrix: Tensor,
    steps: usize,
}

impl StructuralEncoding {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.matrix.cols()
    }

    /// Appends a one-hot degree block (`DEGREE_BINS` columns).
    pub fn with_degree_one_hot(mut self, g: &Graph) -> Self {
        let n = g.node_count();
        let w = self.matrix.cols();
        let mut m = Tensor::zeros(n, w + DEGREE_BINS);
        for i in 0..n {
            for j in 0..w {
                m.set(i, j, self.matrix.get(i, j));
            }
            m.set(i, w + g.degree(i).min(DEGREE_BINS - 1), 1.0);
        }
        self.matrix = m;
        self
    }
}

pub fn rw_structural_encoding(g: &Graph, k_se: usize) -> Result<StructuralEncoding> {
    if k_se == 0 {
        return Err(Error::Contract("structural encoding needs at least one step".into()));
    }
    let n = g.node_count();
    let nbrs: Vec<Vec<usize>> = (0..n).map(|i| g.neighbors(i).collect()).collect();
    let mut out = Tensor::zeros(n, k_se);
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for start in 0..n {
        p.iter_mut().for_each(|v| *v = 0.0);
        p[start] = 1.0;
        for t in 0..k_se {
            q.iter_mut().for_each(|v| *v = 0.0);
            for (u, &mass) in p.iter().enumerate() {
                if mass == 0.0 || nbrs[u].is_empty() {
                    continue;
                }
                let share = mass / nbrs[u].len() as f64;
                for &j in &nbrs[u] {
                    q[j] += share;
                }
            }
            std::mem::swap(&mut p, &mut q);
            out.set(start, t, p[start]);
        }
    }
    Ok(StructuralEncoding {
        matrix: out,
        steps: k_se,
    })
}

/// `[X || X_struc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitFeatures {
    matrix: Tensor,
    attr_dim: usize,
}

impl InitFeatures {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn width(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn build_init_features(g: &Graph, se: &StructuralEncoding) -> Result<InitFeatures> {
    let n = g.node_count();
    if se.matrix.rows() != n {
        return Err(Error::Contract(format!(
            "structural encoding has {} rows for {n} nodes",
            se.matrix.rows()
        )));
    }
    let (da, ds) = (g.attr_dim(), se.width());
    let mut m = Tensor::zeros(n, da + ds);
    for i in 0..n {
        for j in 0..da {
            m.set(i, j, g.features().get(i, j));
        }
        for j in 0..ds {
            m.set(i, da + j, se.matrix.get(i, j));
        }
    }
    Ok(InitFeatures {
        matrix: m,
        attr_dim: da,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use rand::Rng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_edges(n, edges, Tensor::zeros(n, 0), 0).unwrap()
    }

    /// Dense `D⁻¹A` raised to successive powers.
    fn dense_powers(g: &Graph, k: usize) -> Vec<Tensor> {
        let n = g.node_count();
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            let d = g.degree(i) as f64;
            for j in 0..n {
                if d > 0.0 {
                    m.set(i, j, g.adjacency().get(i, j) / d);
                }
            }
        }
        let mut out = vec![m.clone()];
        for _ in 1..k {
            let next = out.last().unwrap().matmul(&m).unwrap();
            out.push(next);
        }
        out
    }

    fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> Graph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        graph(n, &edges)
    }

    #[test]
    fn isolated_node_is_zero() {
        let se = rw_structural_encoding(&graph(1, &[]), 4).unwrap();
        assert_eq!(se.matrix().data(), &[0.0; 4]);
    }

    #[test]
    fn single_edge_alternates() {
        let se = rw_structural_encoding(&graph(2, &[(0, 1)]), 4).unwrap();
        assert_eq!(se.matrix().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn triangle_two_steps() {
        let se = rw_structural_encoding(&graph(3, &[(0, 1), (1, 2), (0, 2)]), 2).unwrap();
        for i in 0..3 {
            assert_eq!(se.matrix().get(i, 0), 0.0);
            assert!((se.matrix().get(i, 1) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(rw_structural_encoding(&graph(1, &[]), 0).is_err());
    }

    #[test]
    fn matches_dense_powers_and_rows_are_stochastic() {
        let mut rng = seeded_rng(31);
        for _ in 0..20 {
            let n = rng.random_range(1..=8);
            let g = random_graph(n, 0.4, &mut rng);
            let se = rw_structural_encoding(&g, 6).unwrap();
            for (t, power) in dense_powers(&g, 6).iter().enumerate() {
                for i in 0..n {
                    let row_sum: f64 = power.row_slice(i).iter().sum();
                    if g.degree(i) > 0 {
                        assert!((row_sum - 1.0).abs() < 1e-12);
                    }
                    let diag = power.get(i, i);
                    assert!((se.matrix().get(i, t) - diag).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&se.matrix().get(i, t)));
                }
            }
        }
    }

    #[test]
    fn permutation_equivariant() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (3, 4)]);
        let perm = [4, 2, 0, 1, 3];
        let lhs = rw_structural_encoding(&g.permuted(&perm), 5).unwrap();
        let rhs = rw_structural_encoding(&g, 5).unwrap().matrix().permute_rows(&perm);
        assert!(lhs.matrix().max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn disjoint_union_is_blockwise() {
        let a = graph(3, &[(0, 1), (1, 2)]);
        let b = graph(2, &[(0, 1)]);
        let union = graph(5, &[(0, 1), (1, 2), (3, 4)]);
        let u = rw_structural_encoding(&union, 4).unwrap();
        let ea = rw_structural_encoding(&a, 4).unwrap();
        let eb = rw_structural_encoding(&b, 4).unwrap();
        let stacked: Vec<f64> = ea.matrix().data().iter().chain(eb.matrix().data()).copied().collect();
        assert_eq!(u.matrix().data(), stacked.as_slice());
    }

    #[test]
    fn concat_puts_attributes_first() {
        let g = Graph::from_edges(2, &[(0, 1)], Tensor::matrix(2, 1, vec![1.0, 2.0]), 0).unwrap();
        let se = StructuralEncoding {
            matrix: Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]),
            steps: 2,
        };
        let x = build_init_features(&g, &se).unwrap();
        assert_eq!(x.matrix().data(), &[1.0, 0.0, 1.0, 2.0, 0.0, 1.0]);
        assert_eq!(x.attr_dim(), 1);
    }

    #[test]
    fn attribute_free_equals_structure() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let se = rw_structural_encoding(&g, 3).unwrap();
        let x = build_init_features(&g, &se).unwrap();
        assert_eq!(x.matrix(), se.matrix());
    }

    #[test]
    fn row_mismatch_rejected() {
        let se = rw_structural_encoding(&graph(2, &[(0, 1)]), 2).unwrap();
        assert!(build_init_features(&graph(3, &[]), &se).is_err());
    }

    #[test]
    fn encode_then_permute_commutes() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3)], Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]), 0).unwrap();
        let perm = [3, 1, 0, 2];
        let pg = g.permuted(&perm);
        let lhs = build_init_features(&pg, &rw_structural_encoding(&pg, 3).unwrap()).unwrap();
        let rhs = build_init_features(&g, &rw_structural_encoding(&g, 3).unwrap())
            .unwrap()
            .matrix()
            .permute_rows(&perm);
        assert!(lhs.matrix().max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn degree_block_is_one_hot() {
        let g = graph(3, &[(0, 1), (0, 2)]);
        let se = rw_structural_encoding(&g, 2).unwrap().with_degree_one_hot(&g);
        assert_eq!(se.width(), 2 + DEGREE_BINS);
        assert_eq!(se.matrix().get(0, 2 + 2), 1.0);
        assert_eq!(se.matrix().get(1, 2 + 1), 1.0);
        let ones: f64 = se.matrix().row_slice(0)[2..].iter().sum();
        assert_eq!(ones, 1.0);
    }
}
