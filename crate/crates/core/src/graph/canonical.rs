//! JSON dump of a graph set.
//!
//! ```json
//! {"name": "AIDS",
//!  "graphs": [{"n": 2, "edges": [[0, 1]], "features": [[1.0], [0.0]], "label": 0}]}
//! ```
//!
//! Edges are 0-based `[i, j]` pairs with `i <= j`, listed in row-major order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Graph, GraphSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalGraph {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSet {
    pub name: String,
    pub graphs: Vec<CanonicalGraph>,
}

impl From<&Graph> for CanonicalGraph {
    fn from(g: &Graph) -> Self {
        CanonicalGraph {
            n: g.node_count(),
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            features: (0..g.node_count()).map(|i| g.features().row_slice(i).to_vec()).collect(),
            label: g.label(),
        }
    }
}

impl CanonicalGraph {
    pub fn to_graph(&self, attr_dim: usize) -> Result<Graph> {
        if self.features.len() != self.n {
            return Err(Error::Contract(format!(
                "{} feature rows for {} nodes",
                self.features.len(),
                self.n
            )));
        }
        let features = if self.n > 0 && attr_dim > 0 {
            Tensor::from_rows(&self.features)?
        } else {
            Tensor::zeros(self.n, 0)
        };
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::from_edges(self.n, &edges, features, self.label)
    }
}

impl GraphSet {
    pub fn to_canonical(&self) -> CanonicalSet {
        CanonicalSet {
            name: self.name().to_string(),
            graphs: self.graphs().iter().map(CanonicalGraph::from).collect(),
        }
    }

    pub fn from_canonical(c: &CanonicalSet) -> Result<GraphSet> {
        let d = c
            .graphs
            .first()
            .and_then(|g| g.features.first())
            .map_or(0, Vec::len);
        let graphs = c.graphs.iter().map(|g| g.to_graph(d)).collect::<Result<_>>()?;
        GraphSet::new(c.name.clone(), graphs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_canonical()).expect("canonical set serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
