//! Target network distilled against the frozen source side.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::GraphFlow;
use crate::init::derived_rng;
use crate::nn::{Frozen, Mlp, Parameters};
use crate::optim::AdamState;
use crate::source::{check_weight, GcnEncoder};
use crate::tape::{cosine_distance, Tape, Var};
use crate::tensor::Tensor;
use crate::training::{mean_loss_step, run_epochs, LossTrace, PreparedGraph, TrainConfig, TrainingSet};

/// `H ← MLP((1+ε)·H + A·H)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub epsilon: f64,
    pub mlp: Mlp,
}

/// GIN with relu between layers; the last layer's MLP output is returned
/// as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gin {
    pub layers: Vec<GinLayer>,
}

impl Gin {
    pub fn glorot(input: usize, width: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("GIN needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|l| {
                let i = if l == 0 { input } else { width };
                Ok(GinLayer {
                    epsilon: 0.0,
                    mlp: Mlp::glorot(&[i, width, width], rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Gin { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("gin has layers").mlp.output_dim()
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, adjacency: Var, x: Var, trainable: bool) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut vars = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mlp = layer.mlp.bind(tape, trainable);
            let own = tape.scale(h, 1.0 + layer.epsilon);
            let agg = tape.matmul(adjacency, h);
            let sum = tape.add(own, agg);
            h = mlp.forward(tape, sum);
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
            vars.extend(mlp.vars());
        }
        (h, vars)
    }
}

impl Parameters for Gin {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.mlp.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.mlp.parameters_mut()).collect()
    }
}

pub fn gin_forward(gin: &Gin, adjacency: &Tensor, x_init: &Tensor) -> Result<Tensor> {
    let n = x_init.rows();
    if adjacency.rows() != n || adjacency.cols() != n || x_init.cols() != gin.input_dim() {
        return Err(Error::Contract(format!(
            "GIN with input width {} given adjacency {}x{} and features {}x{}",
            gin.input_dim(),
            adjacency.rows(),
            adjacency.cols(),
            n,
            x_init.cols()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(adjacency);
    let x = tape.constant(x_init);
    let (h, _) = gin.forward_on_tape(&mut tape, a, x, false);
    Ok(tape.tensor(h))
}

/// The student. `Gcn` mirrors the source encoder for the symmetric ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetNet {
    Gin(Gin),
    Gcn(GcnEncoder),
}

impl TargetNet {
    pub fn gin(input: usize, width: usize, layers: usize, seed: u64) -> Result<Self> {
        let mut rng = derived_rng(seed, "target-init");
        Ok(TargetNet::Gin(Gin::glorot(input, width, layers, &mut rng)?))
    }

    pub fn gcn(input: usize, hidden: usize, width: usize, layers: usize, seed: u64) -> Result<Self> {
        let mut rng = derived_rng(seed, "target-init");
        Ok(TargetNet::Gcn(GcnEncoder::glorot(input, hidden, width, layers, &mut rng)?))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TargetNet::Gin(g) => g.input_dim(),
            TargetNet::Gcn(g) => g.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TargetNet::Gin(g) => g.output_dim(),
            TargetNet::Gcn(g) => g.output_dim(),
        }
    }

    fn forward_on_tape(&self, tape: &mut Tape, g: &PreparedGraph, trainable: bool) -> (Var, Vec<Var>) {
        let x = tape.constant(&g.x_init);
        match self {
            TargetNet::Gin(gin) => {
                let a = tape.constant(&g.adjacency);
                gin.forward_on_tape(tape, a, x, trainable)
            }
            TargetNet::Gcn(enc) => {
                let a = tape.constant(&g.a_hat);
                let ws = enc.bind(tape, trainable);
                (GcnEncoder::forward(tape, &ws, a, x), ws)
            }
        }
    }

    /// Node outputs `Ȟ` for one graph.
    pub fn embed(&self, g: &PreparedGraph) -> Result<Tensor> {
        if g.x_init.cols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "target expects width {}, got {}",
                self.input_dim(),
                g.x_init.cols()
            )));
        }
        let mut tape = Tape::new();
        let (h, _) = self.forward_on_tape(&mut tape, g, false);
        Ok(tape.tensor(h))
    }
}

impl Parameters for TargetNet {
    fn parameters(&self) -> Vec<&Tensor> {
        match self {
            TargetNet::Gin(g) => g.parameters(),
            TargetNet::Gcn(g) => g.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            TargetNet::Gin(g) => g.parameters_mut(),
            TargetNet::Gcn(g) => g.parameters_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `(1 − cos)/2`, bounded in `[0, 1]`.
    Cosine,
    SqEuclidean,
}

impl Readout {
    pub fn apply(self, h: &Tensor) -> Result<Tensor> {
        if h.rows() == 0 {
            return Err(Error::Contract("readout of an empty graph".into()));
        }
        let mut tape = Tape::new();
        let v = tape.constant(h);
        let r = self.on_tape(&mut tape, v);
        Ok(tape.tensor(r))
    }

    pub fn on_tape(self, tape: &mut Tape, h: Var) -> Var {
        match self {
            Readout::Max => tape.max_cols(h),
            Readout::Mean => tape.mean_cols(h),
        }
    }
}

/// Column-wise maximum.
pub fn readout_max(h: &Tensor) -> Result<Tensor> {
    Readout::Max.apply(h)
}

impl DistanceKind {
    pub fn apply(self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            DistanceKind::Cosine => cosine_distance(u, v),
            DistanceKind::SqEuclidean => u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum(),
        }
    }

    /// Row-wise distances, `n×1`.
    pub fn on_tape(self, tape: &mut Tape, a: Var, b: Var) -> Var {
        match self {
            DistanceKind::Cosine => tape.row_cosine_distance(a, b),
            DistanceKind::SqEuclidean => tape.row_sq_distance(a, b),
        }
    }
}

pub fn distance(u: &[f64], v: &[f64]) -> f64 {
    cosine_distance(u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub beta: f64,
    pub readout: Readout,
    pub distance: DistanceKind,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            beta: 0.6,
            readout: Readout::Max,
            distance: DistanceKind::Cosine,
        }
    }
}

/// `(graph term, node term)` for one graph on a tape.
pub fn pair_terms_on_tape(tape: &mut Tape, target: Var, source: Var, cfg: &TargetConfig) -> (Var, Var) {
    let tg = cfg.readout.on_tape(tape, target);
    let sg = cfg.readout.on_tape(tape, source);
    let graph = cfg.distance.on_tape(tape, tg, sg);
    let nodes = cfg.distance.on_tape(tape, target, source);
    let node = tape.mean(nodes);
    (graph, node)
}

/// `(1−β)·mean_G f(ȟ_G, ẑ_G) + β·mean_G mean_i f(ȟ_i, ẑ_i)` from node outputs.
pub fn target_loss(target: &[Tensor], source: &[Tensor], cfg: &TargetConfig) -> Result<f64> {
    check_weight("beta", cfg.beta)?;
    if target.len() != source.len() || target.is_empty() {
        return Err(Error::Contract(format!(
            "{} target graphs against {} source graphs",
            target.len(),
            source.len()
        )));
    }
    let mut total = 0.0;
    for (t, s) in target.iter().zip(source) {
        if t.shape() != s.shape() {
            return Err(Error::Contract(format!(
                "target output {:?} does not match source output {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let mut tape = Tape::new();
        let tv = tape.constant(t);
        let sv = tape.constant(s);
        let (g, n) = pair_terms_on_tape(&mut tape, tv, sv, cfg);
        total += (1.0 - cfg.beta) * tape.scalar(g) + cfg.beta * tape.scalar(n);
    }
    Ok(total / target.len() as f64)
}

/// Frozen encoder, optionally followed by a frozen flow. Without a flow the
/// source output is the encoder embedding itself.
#[derive(Debug, Clone)]
pub struct SourceNetwork {
    pub encoder: Frozen<GcnEncoder>,
    pub flow: Option<Frozen<GraphFlow>>,
}

impl SourceNetwork {
    pub fn new(encoder: Frozen<GcnEncoder>, flow: Option<Frozen<GraphFlow>>) -> Result<Self> {
        let s = SourceNetwork { encoder, flow };
        s.verify()?;
        Ok(s)
    }

    /// The flow must have been trained against this exact encoder.
    pub fn verify(&self) -> Result<()> {
        if let Some(flow) = &self.flow {
            let expected = self.encoder.fingerprint();
            let found = flow.upstream().unwrap_or("<none>");
            if found != expected {
                return Err(Error::PhaseOrder(format!(
                    "flow was trained against encoder {found}, but the loaded encoder is {expected}"
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> &str {
        match &self.flow {
            Some(f) => f.fingerprint(),
            None => self.encoder.fingerprint(),
        }
    }

    /// Source embedding `H` before the flow.
    pub fn embed(&self, g: &PreparedGraph) -> Result<Tensor> {
        self.encoder.embed(&g.a_hat, &g.x_init)
    }

    /// Node outputs `Ẑ` (or `H` without a flow).
    pub fn outputs(&self, g: &PreparedGraph) -> Result<Tensor> {
        let h = self.embed(g)?;
        match &self.flow {
            Some(f) => Ok(f.forward(&h, &g.a_hat)?.0),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTarget {
    pub target: Frozen<TargetNet>,
    pub trace: LossTrace,
}

/// Distils `target` against the frozen source outputs of the training graphs.
pub fn train_target(
    source: &SourceNetwork,
    train: &TrainingSet,
    mut target: TargetNet,
    cfg: &TargetConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedTarget> {
    source.verify()?;
    check_weight("beta", cfg.beta)?;
    let graphs = train.fetch_all("target");
    let items = graphs
        .iter()
        .map(|g| Ok((*g, source.outputs(g)?)))
        .collect::<Result<Vec<_>>>()?;
    for (g, z) in &items {
        if target.input_dim() != g.x_init.cols() || target.output_dim() != z.cols() {
            return Err(Error::Contract(format!(
                "target maps {}→{}, data needs {}→{}",
                target.input_dim(),
                target.output_dim(),
                g.x_init.cols(),
                z.cols()
            )));
        }
    }
    let mut adam = AdamState::new(train_cfg.learning_rate);
    let mut rng = derived_rng(seed, "target-order");
    let trace = run_epochs("target", items.len(), train_cfg, &mut rng, |batch| {
        let batch_items: Vec<&(&PreparedGraph, Tensor)> = batch.iter().map(|&p| &items[p]).collect();
        mean_loss_step(&mut target, &mut adam, &batch_items, |t, tape, (g, z)| {
            let (out, vars) = t.forward_on_tape(tape, g, true);
            let zv = tape.constant(z);
            let (graph, node) = pair_terms_on_tape(tape, out, zv, cfg);
            let a = tape.scale(graph, 1.0 - cfg.beta);
            let b = tape.scale(node, cfg.beta);
            Ok((tape.add(a, b), vars))
        })
    })?;
    Ok(TrainedTarget {
        target: Frozen::freeze(target, Some(source.fingerprint().to_string())),
        trace,
    })
}
