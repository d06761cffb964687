//! Per-graph inputs, the split guard and the shared epoch loop.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_init_features, rw_structural_encoding};
use crate::graph::{normalized_adjacency, AnomalySplit, GraphSet};
use crate::nn::Parameters;
use crate::optim::AdamState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Everything a network needs to process one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub index: usize,
    pub adjacency: Tensor,
    pub a_hat: Tensor,
    pub x_init: Tensor,
}

impl PreparedGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Encodes every graph of the set. Row `i` of the result is graph `i`.
pub fn prepare_graphs(set: &GraphSet, k_se: usize, degree_features: bool) -> Result<Vec<PreparedGraph>> {
    set.graphs()
        .par_iter()
        .enumerate()
        .map(|(index, g)| {
            let mut se = rw_structural_encoding(g, k_se)?;
            if degree_features {
                se = se.with_degree_one_hot(g);
            }
            Ok(PreparedGraph {
                index,
                adjacency: g.adjacency().clone(),
                a_hat: normalized_adjacency(g),
                x_init: build_init_features(g, &se)?.into_matrix(),
            })
        })
        .collect()
}

/// Records every graph index handed to a trainer, per phase.
#[derive(Debug, Default)]
pub struct SplitGuard {
    seen: Mutex<BTreeMap<String, BTreeSet<usize>>>,
}

impl SplitGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, phase: &str, index: usize) {
        self.seen
            .lock()
            .expect("split guard poisoned")
            .entry(phase.to_string())
            .or_default()
            .insert(index);
    }

    pub fn seen(&self) -> BTreeMap<String, BTreeSet<usize>> {
        self.seen.lock().expect("split guard poisoned").clone()
    }

    /// Fails if any recorded index is not a training index of `split`.
    pub fn verify(&self, split: &AnomalySplit) -> Result<()> {
        let train: BTreeSet<usize> = split.train.iter().copied().collect();
        for (phase, indices) in self.seen() {
            if let Some(bad) = indices.iter().find(|i| !train.contains(i)) {
                return Err(Error::Contract(format!(
                    "graph {bad} reached the {phase} trainer but is not a training graph"
                )));
            }
        }
        Ok(())
    }
}

/// The graphs a trainer may touch. Every access is logged to the guard.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    graphs: &'a [PreparedGraph],
    indices: &'a [usize],
    guard: &'a SplitGuard,
}

impl<'a> TrainingSet<'a> {
    /// `graphs` is the full prepared set; `indices` the allowed subset.
    pub fn new(graphs: &'a [PreparedGraph], indices: &'a [usize], guard: &'a SplitGuard) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= graphs.len()) {
            return Err(Error::Contract(format!("training index {bad} out of range")));
        }
        Ok(TrainingSet { graphs, indices, guard })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        self.indices
    }

    pub fn fetch(&self, phase: &str, position: usize) -> &'a PreparedGraph {
        let index = self.indices[position];
        self.guard.record(phase, index);
        &self.graphs[index]
    }

    pub fn fetch_all(&self, phase: &str) -> Vec<&'a PreparedGraph> {
        (0..self.len()).map(|p| self.fetch(phase, p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 1,
        }
    }
}

/// Mean training loss per epoch.
pub type LossTrace = Vec<f64>;

/// Shuffles `0..len` every epoch and calls `step` once per mini-batch of
/// positions. Non-finite losses and numeric faults become training faults.
pub fn run_epochs<F>(phase: &'static str, len: usize, cfg: &TrainConfig, rng: &mut impl Rng, mut step: F) -> Result<LossTrace>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = step(batch).map_err(|e| match e {
                Error::NumericFault { node, op, detail } => Error::TrainingFault {
                    phase,
                    epoch,
                    detail: format!("{op} at node {node}: {detail}"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::TrainingFault {
                    phase,
                    epoch,
                    detail: format!("loss {loss}"),
                });
            }
            total += loss * batch.len() as f64;
        }
        trace.push(total / len.max(1) as f64);
    }
    Ok(trace)
}

/// One optimizer step on the mean of `loss` over `items`. `loss` builds the
/// forward pass on a fresh tape and returns the loss node together with the
/// parameter vars, ordered as `model.parameters_mut()`.
pub fn mean_loss_step<M, T, F>(model: &mut M, adam: &mut AdamState, items: &[T], mut loss: F) -> Result<f64>
where
    M: Parameters,
    F: FnMut(&M, &mut Tape, &T) -> Result<(Var, Vec<Var>)>,
{
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    for item in items {
        let mut tape = Tape::new();
        let (l, vars) = loss(model, &mut tape, item)?;
        total += tape.scalar(l);
        let scaled = tape.scale(l, scale);
        let grads = tape.backward(scaled)?;
        grads.accumulate_into(&vars, &mut model.parameters_mut())?;
    }
    adam.step_accumulated(&mut model.parameters_mut())?;
    Ok(total * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_anomaly_split, Graph};
    use crate::init::seeded_rng;

    fn set() -> GraphSet {
        let graphs = (0..6)
            .map(|i| Graph::from_edges(2, &[(0, 1)], Tensor::zeros(2, 0), (i % 2) as i64).unwrap())
            .collect();
        GraphSet::new("t", graphs).unwrap()
    }

    #[test]
    fn prepare_keeps_order_and_width() {
        let p = prepare_graphs(&set(), 3, false).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p[4].index, 4);
        assert_eq!(p[0].x_init.cols(), 3);
        assert_eq!(prepare_graphs(&set(), 3, true).unwrap()[0].x_init.cols(), 13);
    }

    #[test]
    fn guard_flags_test_index() {
        let s = set();
        let split = make_anomaly_split(&s, 1, 0.34, 0).unwrap();
        let guard = SplitGuard::new();
        let prepared = prepare_graphs(&s, 2, false).unwrap();
        let ts = TrainingSet::new(&prepared, &split.train, &guard).unwrap();
        ts.fetch_all("source");
        guard.verify(&split).unwrap();
        guard.record("flow", split.test[0]);
        assert!(guard.verify(&split).is_err());
    }

    #[test]
    fn epochs_cover_every_position() {
        let mut rng = seeded_rng(0);
        let mut seen = Vec::new();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 2,
        };
        let trace = run_epochs("t", 5, &cfg, &mut rng, |b| {
            seen.extend_from_slice(b);
            Ok(1.0)
        })
        .unwrap();
        assert_eq!(trace, vec![1.0, 1.0]);
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn nan_loss_names_epoch() {
        let mut rng = seeded_rng(0);
        let cfg = TrainConfig::default();
        let mut calls = 0;
        let err = run_epochs("flow", 1, &cfg, &mut rng, |_| {
            calls += 1;
            Ok(if calls == 3 { f64::NAN } else { 0.0 })
        })
        .unwrap_err();
        assert!(matches!(err, Error::TrainingFault { phase: "flow", epoch: 2, .. }));
    }
}
