//! Reversible graph coupling flow from source embeddings to a standard
//! normal latent.
//!
//! Each step splits the embedding columns into `h0 = H[:, ..d/2]` and
//! `h1 = H[:, d/2..]` and applies
//!
//! ```text
//! s_F = s_max·tanh(F1(h1)/s_max)    h0' = h0 ⊙ exp(s_F) + F2(h1)
//! s_G = s_max·tanh(G1(h0')/s_max)   h1' = h1 ⊙ exp(s_G) + G2(h0')
//! ```
//!
//! so `log|det J| = Σ s_F + Σ s_G`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{derived_rng, glorot};
use crate::nn::{bind_tensor, Frozen, Linear, Parameters};
use crate::optim::AdamState;
use crate::source::GcnEncoder;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{mean_loss_step, run_epochs, LossTrace, TrainConfig, TrainingSet};

/// `relu(Â H W_prop) W_out + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePassingNet {
    pub propagate: Tensor,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy)]
struct BoundNet {
    propagate: Var,
    weight: Var,
    bias: Var,
}

impl MessagePassingNet {
    /// Glorot propagation with a zero output map, so the net starts at 0.
    pub fn init(width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MessagePassingNet {
            propagate: glorot(width, width, rng)?,
            output: Linear::zeros(width, width),
        })
    }

    pub fn zeros(width: usize) -> Self {
        MessagePassingNet {
            propagate: Tensor::zeros(width, width),
            output: Linear::zeros(width, width),
        }
    }

    /// Every tensor Glorot-drawn and multiplied by `gain`.
    pub fn random(width: usize, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut net = MessagePassingNet {
            propagate: glorot(width, width, rng)?,
            output: Linear {
                weight: glorot(width, width, rng)?,
                bias: glorot(1, width, rng)?,
            },
        };
        for t in net.parameters_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
        Ok(net)
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        BoundNet {
            propagate: bind_tensor(tape, &self.propagate, trainable),
            weight: bind_tensor(tape, &self.output.weight, trainable),
            bias: bind_tensor(tape, &self.output.bias, trainable),
        }
    }
}

impl BoundNet {
    fn forward(&self, tape: &mut Tape, a_hat: Var, h: Var) -> Var {
        let ah = tape.matmul(a_hat, h);
        let p = tape.matmul(ah, self.propagate);
        let p = tape.relu(p);
        let o = tape.matmul(p, self.weight);
        tape.add_row(o, self.bias)
    }

    fn vars(&self) -> [Var; 3] {
        [self.propagate, self.weight, self.bias]
    }
}

impl Parameters for MessagePassingNet {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.propagate, &self.output.weight, &self.output.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.propagate, &mut self.output.weight, &mut self.output.bias]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingStep {
    pub f1: MessagePassingNet,
    pub f2: MessagePassingNet,
    pub g1: MessagePassingNet,
    pub g2: MessagePassingNet,
}

#[derive(Debug, Clone, Copy)]
struct BoundStep {
    f1: BoundNet,
    f2: BoundNet,
    g1: BoundNet,
    g2: BoundNet,
}

impl CouplingStep {
    pub fn init(half: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(CouplingStep {
            f1: MessagePassingNet::init(half, rng)?,
            f2: MessagePassingNet::init(half, rng)?,
            g1: MessagePassingNet::init(half, rng)?,
            g2: MessagePassingNet::init(half, rng)?,
        })
    }

    pub fn zeros(half: usize) -> Self {
        CouplingStep {
            f1: MessagePassingNet::zeros(half),
            f2: MessagePassingNet::zeros(half),
            g1: MessagePassingNet::zeros(half),
            g2: MessagePassingNet::zeros(half),
        }
    }

    pub fn random(half: usize, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(CouplingStep {
            f1: MessagePassingNet::random(half, gain, rng)?,
            f2: MessagePassingNet::random(half, gain, rng)?,
            g1: MessagePassingNet::random(half, gain, rng)?,
            g2: MessagePassingNet::random(half, gain, rng)?,
        })
    }

    pub fn half_width(&self) -> usize {
        self.f1.propagate.rows()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundStep {
        BoundStep {
            f1: self.f1.bind(tape, trainable),
            f2: self.f2.bind(tape, trainable),
            g1: self.g1.bind(tape, trainable),
            g2: self.g2.bind(tape, trainable),
        }
    }
}

impl Parameters for CouplingStep {
    fn parameters(&self) -> Vec<&Tensor> {
        [&self.f1, &self.f2, &self.g1, &self.g2]
            .into_iter()
            .flat_map(|n| n.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.f1.parameters_mut();
        p.extend(self.f2.parameters_mut());
        p.extend(self.g1.parameters_mut());
        p.extend(self.g2.parameters_mut());
        p
    }
}

fn clamp_scale(tape: &mut Tape, raw: Var, s_max: f64) -> Var {
    let r = tape.scale(raw, 1.0 / s_max);
    let t = tape.tanh(r);
    tape.scale(t, s_max)
}

/// `h0 ⊙ exp(s) + shift` with `s` the clamped scale; returns the new half and `Σ s`.
fn affine(tape: &mut Tape, h: Var, raw_scale: Var, shift: Var, s_max: f64) -> (Var, Var) {
    let s = clamp_scale(tape, raw_scale, s_max);
    let e = tape.exp(s);
    let scaled = tape.mul(h, e);
    let out = tape.add(scaled, shift);
    (out, tape.sum(s))
}

impl BoundStep {
    /// `(h0', h1', Σ s_F + Σ s_G)`.
    fn forward(&self, tape: &mut Tape, a_hat: Var, h0: Var, h1: Var, s_max: f64) -> (Var, Var, Var) {
        let raw_f = self.f1.forward(tape, a_hat, h1);
        let shift_f = self.f2.forward(tape, a_hat, h1);
        let (h0n, ld_f) = affine(tape, h0, raw_f, shift_f, s_max);
        let raw_g = self.g1.forward(tape, a_hat, h0n);
        let shift_g = self.g2.forward(tape, a_hat, h0n);
        let (h1n, ld_g) = affine(tape, h1, raw_g, shift_g, s_max);
        (h0n, h1n, tape.add(ld_f, ld_g))
    }

    fn vars(&self) -> Vec<Var> {
        [self.f1, self.f2, self.g1, self.g2].iter().flat_map(BoundNet::vars).collect()
    }
}

/// Half-split node embeddings with the log-determinant accumulated so far.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub half0: Tensor,
    pub half1: Tensor,
    pub log_det: f64,
}

impl FlowState {
    pub fn split(h: &Tensor) -> Result<Self> {
        let d = h.cols();
        if !d.is_multiple_of(2) {
            return Err(Error::Contract(format!("flow needs an even width, got {d}")));
        }
        let half = d / 2;
        let (n, mut a, mut b) = (h.rows(), Vec::new(), Vec::new());
        for i in 0..n {
            a.extend_from_slice(&h.row_slice(i)[..half]);
            b.extend_from_slice(&h.row_slice(i)[half..]);
        }
        Ok(FlowState {
            half0: Tensor::matrix(n, half, a),
            half1: Tensor::matrix(n, half, b),
            log_det: 0.0,
        })
    }

    /// `concat(half0, half1)`.
    pub fn joined(&self) -> Tensor {
        let (n, half) = (self.half0.rows(), self.half0.cols());
        let mut out = Vec::with_capacity(n * half * 2);
        for i in 0..n {
            out.extend_from_slice(self.half0.row_slice(i));
            out.extend_from_slice(self.half1.row_slice(i));
        }
        Tensor::matrix(n, 2 * half, out)
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(at) => Err(Error::NumericFault {
            node: at,
            op,
            detail: format!("value {}", t.data()[at]),
        }),
    }
}

fn check_propagation(a_hat: &Tensor, n: usize) -> Result<()> {
    if a_hat.rows() != n || a_hat.cols() != n {
        return Err(Error::Contract(format!(
            "propagation matrix {}x{} for {n} nodes",
            a_hat.rows(),
            a_hat.cols()
        )));
    }
    Ok(())
}

pub fn coupling_forward(state: &FlowState, step: &CouplingStep, a_hat: &Tensor, s_max: f64) -> Result<FlowState> {
    let half = step.half_width();
    if state.half0.cols() != half || state.half1.cols() != half || state.half0.rows() != state.half1.rows() {
        return Err(Error::Contract("flow state width does not match the step".into()));
    }
    check_propagation(a_hat, state.half0.rows())?;
    let mut tape = Tape::new();
    let bound = step.bind(&mut tape, false);
    let a = tape.constant(a_hat);
    let h0 = tape.constant(&state.half0);
    let h1 = tape.constant(&state.half1);
    let (h0n, h1n, ld) = bound.forward(&mut tape, a, h0, h1, s_max);
    let next = FlowState {
        half0: tape.tensor(h0n),
        half1: tape.tensor(h1n),
        log_det: state.log_det + tape.scalar(ld),
    };
    check_finite(&next.half0, "coupling half0")?;
    check_finite(&next.half1, "coupling half1")?;
    if !next.log_det.is_finite() {
        return Err(Error::NumericFault {
            node: 0,
            op: "coupling log_det",
            detail: format!("{}", next.log_det),
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFlow {
    pub steps: Vec<CouplingStep>,
    pub s_max: f64,
}

impl GraphFlow {
    pub fn init(embed_dim: usize, steps: usize, s_max: f64, seed: u64) -> Result<Self> {
        Self::check_shape(embed_dim, steps, s_max)?;
        let mut rng = derived_rng(seed, "flow-init");
        let steps = (0..steps)
            .map(|_| CouplingStep::init(embed_dim / 2, &mut rng))
            .collect::<Result<_>>()?;
        Ok(GraphFlow { steps, s_max })
    }

    pub fn identity(embed_dim: usize, steps: usize, s_max: f64) -> Result<Self> {
        Self::check_shape(embed_dim, steps, s_max)?;
        Ok(GraphFlow {
            steps: (0..steps).map(|_| CouplingStep::zeros(embed_dim / 2)).collect(),
            s_max,
        })
    }

    fn check_shape(embed_dim: usize, steps: usize, s_max: f64) -> Result<()> {
        if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
            return Err(Error::Contract(format!("flow needs an even width, got {embed_dim}")));
        }
        if steps == 0 {
            return Err(Error::Config("flow needs at least one coupling step".into()));
        }
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(Error::Config(format!("s_max must be positive, got {s_max}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        2 * self.steps[0].half_width()
    }

    fn check_input(&self, h: &Tensor, a_hat: &Tensor) -> Result<()> {
        if h.cols() != self.width() {
            return Err(Error::Contract(format!(
                "flow of width {} applied to width {}",
                self.width(),
                h.cols()
            )));
        }
        check_propagation(a_hat, h.rows())
    }

    /// `(Z, log_det)` built on `tape`; `a_hat` and `h` are already on it.
    pub fn forward_on_tape(&self, tape: &mut Tape, a_hat: Var, h: Var, trainable: bool) -> (Var, Var, Vec<Var>) {
        let half = self.width() / 2;
        let mut h0 = tape.slice_cols(h, 0, half);
        let mut h1 = tape.slice_cols(h, half, 2 * half);
        let mut log_det = None;
        let mut vars = Vec::new();
        for step in &self.steps {
            let b = step.bind(tape, trainable);
            let (a, c, ld) = b.forward(tape, a_hat, h0, h1, self.s_max);
            h0 = a;
            h1 = c;
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => tape.add(acc, ld),
            });
            vars.extend(b.vars());
        }
        let z = tape.concat_cols(h0, h1);
        (z, log_det.expect("flow has steps"), vars)
    }

    /// `(Z, log|det ∂Z/∂H|)`.
    pub fn forward(&self, h: &Tensor, a_hat: &Tensor) -> Result<(Tensor, f64)> {
        self.check_input(h, a_hat)?;
        let mut state = FlowState::split(h)?;
        for step in &self.steps {
            state = coupling_forward(&state, step, a_hat, self.s_max)?;
        }
        Ok((state.joined(), state.log_det))
    }

    /// Undoes [`GraphFlow::forward`], last step first.
    pub fn inverse(&self, z: &Tensor, a_hat: &Tensor) -> Result<Tensor> {
        self.check_input(z, a_hat)?;
        let mut state = FlowState::split(z)?;
        for step in self.steps.iter().rev() {
            state = coupling_inverse(&state, step, a_hat, self.s_max)?;
        }
        Ok(state.joined())
    }
}

impl Parameters for GraphFlow {
    fn parameters(&self) -> Vec<&Tensor> {
        self.steps.iter().flat_map(|s| s.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.steps.iter_mut().flat_map(|s| s.parameters_mut()).collect()
    }
}

fn eval_net(net: &MessagePassingNet, a_hat: &Tensor, h: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let b = net.bind(&mut tape, false);
    let a = tape.constant(a_hat);
    let x = tape.constant(h);
    let out = b.forward(&mut tape, a, x);
    tape.tensor(out)
}

/// `(h' − shift) ⊙ exp(−s)`.
fn unaffine(h: &Tensor, raw: &Tensor, shift: &Tensor, s_max: f64) -> Tensor {
    let data = h
        .data()
        .iter()
        .zip(raw.data())
        .zip(shift.data())
        .map(|((&y, &r), &t)| (y - t) * (-(s_max * (r / s_max).tanh())).exp())
        .collect();
    Tensor::matrix(h.rows(), h.cols(), data)
}

pub fn coupling_inverse(state: &FlowState, step: &CouplingStep, a_hat: &Tensor, s_max: f64) -> Result<FlowState> {
    let h0n = &state.half0;
    let h1n = &state.half1;
    let h1 = unaffine(h1n, &eval_net(&step.g1, a_hat, h0n), &eval_net(&step.g2, a_hat, h0n), s_max);
    check_finite(&h1, "inverse half1")?;
    let h0 = unaffine(h0n, &eval_net(&step.f1, a_hat, &h1), &eval_net(&step.f2, a_hat, &h1), s_max);
    check_finite(&h0, "inverse half0")?;
    Ok(FlowState {
        half0: h0,
        half1: h1,
        log_det: state.log_det,
    })
}

pub fn flow_forward(h: &Tensor, flow: &GraphFlow, a_hat: &Tensor) -> Result<(Tensor, f64)> {
    flow.forward(h, a_hat)
}

pub fn flow_inverse(z: &Tensor, flow: &GraphFlow, a_hat: &Tensor) -> Result<Tensor> {
    flow.inverse(z, a_hat)
}

/// Negative log-likelihood under the iid standard normal prior, without the
/// constant `½ log 2π` term: `½‖Z‖² − log_det`.
pub fn nf_loss_unnormalized(z: &Tensor, log_det: f64) -> f64 {
    0.5 * z.data().iter().map(|v| v * v).sum::<f64>() - log_det
}

/// [`nf_loss_unnormalized`] divided by the node count.
pub fn nf_loss(z: &Tensor, log_det: f64, n: usize) -> f64 {
    nf_loss_unnormalized(z, log_det) / n as f64
}

/// `(½‖Z‖² − log_det) / n` on a tape.
pub fn nf_loss_on_tape(tape: &mut Tape, z: Var, log_det: Var) -> Var {
    let n = tape.shape(z).0;
    let sq = tape.mul(z, z);
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let nll = tape.sub(half, log_det);
    tape.scale(nll, 1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { steps: 2, s_max: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub flow: Frozen<GraphFlow>,
    pub trace: LossTrace,
    /// Norm of the mean latent node vector over each epoch's forward passes.
    pub latent_mean_norms: Vec<f64>,
}

/// Fits a flow to fixed `(Â, H)` pairs. Only flow parameters are updated.
pub fn train_flow_on_embeddings(
    items: &[(&Tensor, Tensor)],
    cfg: &FlowConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(GraphFlow, LossTrace, Vec<f64>)> {
    let first = items
        .first()
        .ok_or_else(|| Error::Config("flow training set is empty".into()))?;
    let d = first.1.cols();
    let mut flow = GraphFlow::init(d, cfg.steps, cfg.s_max, seed)?;
    for (a, h) in items {
        flow.check_input(h, a)?;
    }
    let mut adam = AdamState::new(train_cfg.learning_rate);
    let mut rng = derived_rng(seed, "flow-order");
    let mut sums = vec![0.0; d];
    let mut nodes = 0usize;
    let mut norms = Vec::with_capacity(train_cfg.epochs);
    let mut seen = 0usize;
    let trace = run_epochs("flow", items.len(), train_cfg, &mut rng, |batch| {
        let batch_items: Vec<&(&Tensor, Tensor)> = batch.iter().map(|&p| &items[p]).collect();
        let loss = mean_loss_step(&mut flow, &mut adam, &batch_items, |f, tape, (a, h)| {
            let av = tape.constant(a);
            let hv = tape.constant(h);
            let (z, ld, vars) = f.forward_on_tape(tape, av, hv, true);
            for (i, v) in tape.value(z).iter().enumerate() {
                sums[i % d] += v;
            }
            nodes += h.rows();
            Ok((nf_loss_on_tape(tape, z, ld), vars))
        })?;
        seen += batch.len();
        if seen == items.len() {
            let norm = sums.iter().map(|s| (s / nodes as f64).powi(2)).sum::<f64>().sqrt();
            norms.push(norm);
            sums.iter_mut().for_each(|s| *s = 0.0);
            nodes = 0;
            seen = 0;
        }
        Ok(loss)
    })?;
    Ok((flow, trace, norms))
}

/// Trains the flow on frozen source embeddings of the training graphs.
pub fn train_flow(
    encoder: &Frozen<GcnEncoder>,
    train: &TrainingSet,
    cfg: &FlowConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedFlow> {
    let graphs = train.fetch_all("flow");
    let items = graphs
        .iter()
        .map(|g| Ok((&g.a_hat, encoder.embed(&g.a_hat, &g.x_init)?)))
        .collect::<Result<Vec<_>>>()?;
    let (flow, trace, latent_mean_norms) = train_flow_on_embeddings(&items, cfg, train_cfg, seed)?;
    Ok(TrainedFlow {
        flow: Frozen::freeze(flow, Some(encoder.fingerprint().to_string())),
        trace,
        latent_mean_norms,
    })
}
