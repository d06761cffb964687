//! GCN encoder pre-trained by adjacency and feature reconstruction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{derived_rng, glorot};
use crate::nn::{bind_tensor, Frozen, Mlp, Parameters};
use crate::optim::AdamState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{mean_loss_step, run_epochs, LossTrace, PreparedGraph, TrainConfig, TrainingSet};

/// Bias-free GCN: `relu(Â H W)` on every layer but the last, which is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnEncoder {
    pub weights: Vec<Tensor>,
}

impl GcnEncoder {
    /// `layers` weights mapping `input → hidden → … → output`.
    pub fn glorot(input: usize, hidden: usize, output: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let r = if l == 0 { input } else { hidden };
            let c = if l + 1 == layers { output } else { hidden };
            weights.push(glorot(r, c, rng)?);
        }
        Ok(GcnEncoder { weights })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("encoder has layers").cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights.iter().map(|w| bind_tensor(tape, w, trainable)).collect()
    }

    fn check(&self, a_hat: &Tensor, x: &Tensor) -> Result<()> {
        let n = x.rows();
        if a_hat.rows() != n || a_hat.cols() != n {
            return Err(Error::Contract(format!(
                "propagation matrix {}x{} for {n} nodes",
                a_hat.rows(),
                a_hat.cols()
            )));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "encoder expects width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Forward pass on a tape; `a_hat` and `x` are already on it.
    pub fn forward(tape: &mut Tape, weights: &[Var], a_hat: Var, x: Var) -> Var {
        let mut h = x;
        for (l, &w) in weights.iter().enumerate() {
            let ah = tape.matmul(a_hat, h);
            h = tape.matmul(ah, w);
            if l + 1 < weights.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Node embeddings `H` (`n×d`).
    pub fn embed(&self, a_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.check(a_hat, x)?;
        let mut tape = Tape::new();
        let ws = self.bind(&mut tape, false);
        let a = tape.constant(a_hat);
        let xv = tape.constant(x);
        let h = Self::forward(&mut tape, &ws, a, xv);
        Ok(tape.tensor(h))
    }
}

impl Parameters for GcnEncoder {
    fn parameters(&self) -> Vec<&Tensor> {
        self.weights.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().collect()
    }
}

pub fn gcn_forward(encoder: &GcnEncoder, a_hat: &Tensor, x_init: &Tensor) -> Result<Tensor> {
    encoder.embed(a_hat, x_init)
}

/// Encoder plus the feature decoder `d → d → d_init` used only while
/// pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    pub encoder: GcnEncoder,
    pub decoder: Mlp,
}

impl Parameters for SourceModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub alpha: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            layers: 2,
            hidden: 16,
            embed_dim: 16,
            alpha: 0.7,
        }
    }
}

pub(crate) fn check_weight(name: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {value}")))
    }
}

impl SourceModel {
    pub fn init(input: usize, cfg: &SourceConfig, seed: u64) -> Result<Self> {
        let mut rng = derived_rng(seed, "source-init");
        let encoder = GcnEncoder::glorot(input, cfg.hidden, cfg.embed_dim, cfg.layers, &mut rng)?;
        let decoder = Mlp::glorot(&[cfg.embed_dim, cfg.embed_dim, input], &mut rng)?;
        Ok(SourceModel { encoder, decoder })
    }

    /// `L_source` for one graph on a tape, plus the parameter vars.
    pub fn loss_on_tape(&self, tape: &mut Tape, g: &PreparedGraph, alpha: f64, trainable: bool) -> (Var, Vec<Var>) {
        let ws = self.encoder.bind(tape, trainable);
        let dec = self.decoder.bind(tape, trainable);
        let a_hat = tape.constant(&g.a_hat);
        let x = tape.constant(&g.x_init);
        let h = GcnEncoder::forward(tape, &ws, a_hat, x);
        let recon = dec.forward(tape, h);
        let loss = source_loss_vars(tape, h, g.adjacency.data(), x, recon, alpha);
        let mut vars = ws;
        vars.extend(dec.vars());
        (loss, vars)
    }

    /// Per-graph `L_source`; the anomaly score of the reconstruction-only
    /// ablation.
    pub fn graph_loss(&self, g: &PreparedGraph, alpha: f64) -> Result<f64> {
        check_weight("alpha", alpha)?;
        self.encoder.check(&g.a_hat, &g.x_init)?;
        let mut tape = Tape::new();
        let (l, _) = self.loss_on_tape(&mut tape, g, alpha, false);
        Ok(tape.scalar(l))
    }
}

/// `−Σ_ij [A_ij log σ(h_i·h_j) + (1−A_ij) log(1−σ(h_i·h_j))]` over the full
/// `n×n` matrix.
pub fn adjacency_recon_loss_var(tape: &mut Tape, h: Var, adjacency: &[f64]) -> Var {
    let ht = tape.transpose(h);
    let logits = tape.matmul(h, ht);
    tape.bce_with_logits(logits, adjacency)
}

fn source_loss_vars(tape: &mut Tape, h: Var, adjacency: &[f64], x: Var, recon: Var, alpha: f64) -> Var {
    let l1 = adjacency_recon_loss_var(tape, h, adjacency);
    let diff = tape.sub(x, recon);
    let sq = tape.mul(diff, diff);
    let l2 = tape.sum(sq);
    let a = tape.scale(l1, 1.0 - alpha);
    let b = tape.scale(l2, alpha);
    tape.add(a, b)
}

pub fn adjacency_recon_loss(h: &Tensor, adjacency: &Tensor) -> Result<f64> {
    let n = h.rows();
    if adjacency.rows() != n || adjacency.cols() != n {
        return Err(Error::Contract(format!("adjacency does not match {n} embeddings")));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let l = adjacency_recon_loss_var(&mut tape, hv, adjacency.data());
    Ok(tape.scalar(l))
}

/// `(1−α) L1 + α ‖X_init − X*‖²_F`.
pub fn source_loss(h: &Tensor, adjacency: &Tensor, x_init: &Tensor, x_star: &Tensor, alpha: f64) -> Result<f64> {
    check_weight("alpha", alpha)?;
    if x_init.shape() != x_star.shape() {
        return Err(Error::Contract("reconstruction shape differs from X_init".into()));
    }
    let l1 = adjacency_recon_loss(h, adjacency)?;
    let fro: f64 = x_init.data().iter().zip(x_star.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((1.0 - alpha) * l1 + alpha * fro)
}

#[derive(Debug, Clone)]
pub struct PretrainedSource {
    pub encoder: Frozen<GcnEncoder>,
    pub decoder: Mlp,
    pub trace: LossTrace,
}

/// Pre-trains encoder and decoder on `L_source`, then freezes the encoder.
/// `upstream` is the fingerprint the encoder is bound to (the run config).
pub fn pretrain_source(
    train: &TrainingSet,
    cfg: &SourceConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    upstream: Option<String>,
) -> Result<PretrainedSource> {
    check_weight("alpha", cfg.alpha)?;
    let first = train.fetch("source", 0);
    let mut model = SourceModel::init(first.x_init.cols(), cfg, seed)?;
    let mut adam = AdamState::new(train_cfg.learning_rate);
    let mut rng = derived_rng(seed, "source-order");
    let trace = run_epochs("source", train.len(), train_cfg, &mut rng, |batch| {
        let graphs: Vec<&PreparedGraph> = batch.iter().map(|&p| train.fetch("source", p)).collect();
        mean_loss_step(&mut model, &mut adam, &graphs, |m, tape, g| {
            m.encoder.check(&g.a_hat, &g.x_init)?;
            Ok(m.loss_on_tape(tape, g, cfg.alpha, true))
        })
    })?;
    Ok(PretrainedSource {
        encoder: Frozen::freeze(model.encoder, upstream),
        decoder: model.decoder,
        trace,
    })
}
