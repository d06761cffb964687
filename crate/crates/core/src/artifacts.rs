//! On-disk artefacts of a run: manifest, checkpoints, loss traces, report,
//! score and histogram CSVs, and the phase-by-phase drivers that produce
//! them.
//!
//! Layout under `<out_dir>/<run_name>/`:
//!
//! ```text
//! manifest.json
//! report.json  scores.csv
//! <seed>/encoder.ckpt  flow.ckpt  target.ckpt
//! <seed>/source_loss.csv  flow_loss.csv  target_loss.csv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::GraphFlow;
use crate::graph::GraphSet;
use crate::nn::{Frozen, Mlp};
use crate::pipeline::{
    run_seed, seed_anchor, ExperimentConfig, PhaseTimings, PhaseTraces, ScoreReport, SeedContext, SeedModels,
};
use crate::source::GcnEncoder;
use crate::target::{SourceNetwork, TargetNet};
use crate::training::{prepare_graphs, LossTrace, PreparedGraph};

pub const CHECKPOINT_FORMAT: &str = "flowdistill-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Provenance of every artefact of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub dataset_fingerprint: String,
    pub tool_version: String,
    /// Not part of [`RunManifest::hash`].
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, set: &GraphSet) -> Self {
        RunManifest {
            config: config.clone(),
            dataset_fingerprint: set.fingerprint(),
            tool_version: TOOL_VERSION.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.created_unix = 0;
        hex::encode(Sha256::digest(serde_json::to_vec(&m).expect("manifest serializes")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("no run manifest at {}", path.display())));
        }
        serde_json::from_str(&read_file(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(out_dir: &Path, cfg: &ExperimentConfig) -> Self {
        RunLayout {
            root: out_dir.join(cfg.run_name()),
        }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(seed.to_string())
    }

    pub fn checkpoint(&self, seed: u64, kind: CheckpointKind) -> PathBuf {
        self.seed_dir(seed).join(format!("{}.ckpt", kind.name()))
    }

    pub fn loss_trace(&self, seed: u64, phase: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("{phase}_loss.csv"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Flow,
    Target,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Encoder => "encoder",
            CheckpointKind::Flow => "flow",
            CheckpointKind::Target => "target",
        }
    }
}

/// Checkpoint file body. `fingerprint` covers the frozen model and its
/// `upstream`; for encoder checkpoints `model` also holds the decoder,
/// which is not fingerprinted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointFile<T> {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub seed: u64,
    pub manifest_hash: String,
    pub config_fingerprint: String,
    pub upstream: Option<String>,
    pub fingerprint: String,
    pub dims: BTreeMap<String, usize>,
    pub model: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderPayload {
    pub encoder: GcnEncoder,
    pub decoder: Mlp,
}

/// What a loaded checkpoint must agree with.
#[derive(Debug, Clone)]
pub struct Expectation<'a> {
    pub seed: u64,
    pub config_fingerprint: &'a str,
    pub upstream: &'a str,
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint<T: Serialize>(
    path: &Path,
    kind: CheckpointKind,
    seed: u64,
    manifest_hash: &str,
    config_fingerprint: &str,
    frozen_fp: (&str, Option<&str>),
    dims: BTreeMap<String, usize>,
    model: &T,
) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind,
        seed,
        manifest_hash: manifest_hash.into(),
        config_fingerprint: config_fingerprint.into(),
        upstream: frozen_fp.1.map(str::to_string),
        fingerprint: frozen_fp.0.into(),
        dims,
        model,
    };
    let json = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    write_file(path, json.as_bytes())
}

fn load_checkpoint<T: DeserializeOwned>(
    path: &Path,
    kind: CheckpointKind,
    expect: &Expectation,
) -> Result<CheckpointFile<T>> {
    if !path.exists() {
        return Err(Error::PhaseOrder(format!(
            "{} checkpoint {} does not exist; train that phase first",
            kind.name(),
            path.display()
        )));
    }
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let text = read_file(path)?;
    let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if head.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(bad("not a checkpoint file".into()));
    }
    if head.get("version").and_then(|v| v.as_u64()) != Some(CHECKPOINT_VERSION as u64) {
        return Err(bad(format!("unsupported version {}", head["version"])));
    }
    let file: CheckpointFile<T> = serde_json::from_value(head).map_err(|e| bad(e.to_string()))?;
    if file.kind != kind {
        return Err(bad(format!("holds a {} model, expected {}", file.kind.name(), kind.name())));
    }
    if file.seed != expect.seed {
        return Err(Error::PhaseOrder(format!(
            "{} belongs to seed {}, expected seed {}",
            path.display(),
            file.seed,
            expect.seed
        )));
    }
    if file.config_fingerprint != expect.config_fingerprint {
        return Err(Error::PhaseOrder(format!(
            "{} was trained under config {}, current config is {}",
            path.display(),
            file.config_fingerprint,
            expect.config_fingerprint
        )));
    }
    let found = file.upstream.as_deref().unwrap_or("<none>");
    if found != expect.upstream {
        return Err(Error::PhaseOrder(format!(
            "{}: expected upstream fingerprint {}, found {found}",
            path.display(),
            expect.upstream
        )));
    }
    Ok(file)
}

fn verify_integrity<T: Serialize>(path: &Path, frozen: &Frozen<T>, stored: &str) -> Result<()> {
    if frozen.fingerprint() != stored {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("parameters hash to {}, file records {stored}", frozen.fingerprint()),
        });
    }
    Ok(())
}

fn dims(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

pub fn save_encoder(path: &Path, encoder: &Frozen<GcnEncoder>, decoder: &Mlp, seed: u64, manifest_hash: &str, config_fp: &str) -> Result<()> {
    let payload = EncoderPayload {
        encoder: (**encoder).clone(),
        decoder: decoder.clone(),
    };
    save_checkpoint(
        path,
        CheckpointKind::Encoder,
        seed,
        manifest_hash,
        config_fp,
        (encoder.fingerprint(), encoder.upstream()),
        dims(&[
            ("input", encoder.input_dim()),
            ("embed", encoder.output_dim()),
            ("layers", encoder.weights.len()),
        ]),
        &payload,
    )
}

pub fn load_encoder(path: &Path, expect: &Expectation) -> Result<(Frozen<GcnEncoder>, Mlp)> {
    let file: CheckpointFile<EncoderPayload> = load_checkpoint(path, CheckpointKind::Encoder, expect)?;
    let frozen = Frozen::freeze(file.model.encoder, file.upstream);
    verify_integrity(path, &frozen, &file.fingerprint)?;
    Ok((frozen, file.model.decoder))
}

pub fn save_flow(path: &Path, flow: &Frozen<GraphFlow>, seed: u64, manifest_hash: &str, config_fp: &str) -> Result<()> {
    save_checkpoint(
        path,
        CheckpointKind::Flow,
        seed,
        manifest_hash,
        config_fp,
        (flow.fingerprint(), flow.upstream()),
        dims(&[("width", flow.width()), ("steps", flow.steps.len())]),
        &**flow,
    )
}

pub fn load_flow(path: &Path, expect: &Expectation) -> Result<Frozen<GraphFlow>> {
    let file: CheckpointFile<GraphFlow> = load_checkpoint(path, CheckpointKind::Flow, expect)?;
    let frozen = Frozen::freeze(file.model, file.upstream);
    verify_integrity(path, &frozen, &file.fingerprint)?;
    Ok(frozen)
}

pub fn save_target(path: &Path, target: &Frozen<TargetNet>, seed: u64, manifest_hash: &str, config_fp: &str) -> Result<()> {
    save_checkpoint(
        path,
        CheckpointKind::Target,
        seed,
        manifest_hash,
        config_fp,
        (target.fingerprint(), target.upstream()),
        dims(&[("input", target.input_dim()), ("output", target.output_dim())]),
        &**target,
    )
}

pub fn load_target(path: &Path, expect: &Expectation) -> Result<Frozen<TargetNet>> {
    let file: CheckpointFile<TargetNet> = load_checkpoint(path, CheckpointKind::Target, expect)?;
    let frozen = Frozen::freeze(file.model, file.upstream);
    verify_integrity(path, &frozen, &file.fingerprint)?;
    Ok(frozen)
}

/// `# manifest <hash>` followed by `epoch,<columns…>` rows, epochs from 1.
pub fn trace_csv(manifest_hash: &str, columns: &[(&str, &[f64])]) -> String {
    let mut out = format!("# manifest {manifest_hash}\nepoch");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let rows = columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for r in 0..rows {
        out.push_str(&(r + 1).to_string());
        for (_, values) in columns {
            out.push(',');
            if let Some(v) = values.get(r) {
                out.push_str(&format!("{v:?}"));
            }
        }
        out.push('\n');
    }
    out
}

fn write_trace(path: &Path, manifest_hash: &str, columns: &[(&str, &[f64])]) -> Result<()> {
    write_file(path, trace_csv(manifest_hash, columns).as_bytes())
}

/// Prefixes a CSV body with the manifest line.
pub fn with_manifest(manifest_hash: &str, body: &str) -> String {
    format!("# manifest {manifest_hash}\n{body}")
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.02;
pub const HISTOGRAM_BINS: usize = 50;

/// Counts of `scores` in 50 bins of width 0.02 over [0, 1]. The last bin is
/// closed; scores outside [0, 1] are clamped into the end bins.
pub fn histogram(scores: &[f64]) -> [usize; HISTOGRAM_BINS] {
    let mut counts = [0usize; HISTOGRAM_BINS];
    for &s in scores {
        let b = ((s / HISTOGRAM_BIN_WIDTH).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[b] += 1;
    }
    counts
}

/// `bin_lo,bin_hi,count` rows.
pub fn histogram_csv(manifest_hash: &str, counts: &[usize]) -> String {
    let mut body = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in counts.iter().enumerate() {
        body.push_str(&format!(
            "{:.2},{:.2},{c}\n",
            i as f64 * HISTOGRAM_BIN_WIDTH,
            (i + 1) as f64 * HISTOGRAM_BIN_WIDTH
        ));
    }
    with_manifest(manifest_hash, &body)
}

/// Count-weighted mean bin index.
pub fn mean_bin(counts: &[usize]) -> Option<f64> {
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.iter().enumerate().map(|(i, &c)| (i * c) as f64).sum::<f64>() / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    All,
    Source,
    Flow,
    Target,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Phase::All),
            "source" => Ok(Phase::Source),
            "flow" => Ok(Phase::Flow),
            "target" => Ok(Phase::Target),
            other => Err(Error::Config(format!(
                "unknown phase {other:?}; expected all, source, flow or target"
            ))),
        }
    }
}

/// A configured run bound to its dataset and output directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub set: GraphSet,
    pub prepared: Vec<PreparedGraph>,
    pub layout: RunLayout,
    pub manifest: RunManifest,
    pub manifest_hash: String,
}

impl Workspace {
    /// Loads the configured dataset.
    pub fn open(cfg: ExperimentConfig, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let set = cfg.load_dataset()?;
        Self::with_set(cfg, set, out_dir)
    }

    pub fn with_set(cfg: ExperimentConfig, set: GraphSet, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let prepared = prepare_graphs(&set, cfg.k_se, cfg.degree_features)?;
        let manifest = RunManifest::new(&cfg, &set);
        Ok(Workspace {
            layout: RunLayout::new(out_dir, &cfg),
            manifest_hash: manifest.hash(),
            manifest,
            cfg,
            set,
            prepared,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&self.layout.manifest(), json.as_bytes())
    }

    fn context(&self, seed: u64) -> Result<SeedContext<'_>> {
        SeedContext::new(&self.cfg, &self.set, &self.prepared, seed)
    }

    fn expectation<'a>(&'a self, seed: u64, upstream: &'a str, config_fp: &'a str) -> Expectation<'a> {
        Expectation {
            seed,
            config_fingerprint: config_fp,
            upstream,
        }
    }

    fn load_encoder_for(&self, seed: u64) -> Result<(Frozen<GcnEncoder>, Mlp)> {
        let fp = self.cfg.fingerprint();
        let anchor = seed_anchor(&fp, seed);
        load_encoder(
            &self.layout.checkpoint(seed, CheckpointKind::Encoder),
            &self.expectation(seed, &anchor, &fp),
        )
    }

    fn load_source_for(&self, seed: u64) -> Result<(Frozen<GcnEncoder>, Mlp, Option<Frozen<GraphFlow>>)> {
        let (encoder, decoder) = self.load_encoder_for(seed)?;
        let flow = if self.cfg.variant.uses_flow() {
            let fp = self.cfg.fingerprint();
            Some(load_flow(
                &self.layout.checkpoint(seed, CheckpointKind::Flow),
                &self.expectation(seed, encoder.fingerprint(), &fp),
            )?)
        } else {
            None
        };
        Ok((encoder, decoder, flow))
    }

    /// Loads every checkpoint the configured variant needs for `seed`.
    pub fn load_models(&self, seed: u64) -> Result<SeedModels> {
        let (encoder, decoder, flow) = self.load_source_for(seed)?;
        let target = if self.cfg.variant.uses_target() {
            let source = SourceNetwork::new(encoder.clone(), flow.clone())?;
            let fp = self.cfg.fingerprint();
            Some(load_target(
                &self.layout.checkpoint(seed, CheckpointKind::Target),
                &self.expectation(seed, source.fingerprint(), &fp),
            )?)
        } else {
            None
        };
        let models = SeedModels {
            encoder,
            decoder,
            flow,
            target,
        };
        models.check_variant(self.cfg.variant)?;
        Ok(models)
    }

    fn save_models(&self, seed: u64, models: &SeedModels) -> Result<()> {
        let fp = self.cfg.fingerprint();
        let h = &self.manifest_hash;
        save_encoder(
            &self.layout.checkpoint(seed, CheckpointKind::Encoder),
            &models.encoder,
            &models.decoder,
            seed,
            h,
            &fp,
        )?;
        if let Some(flow) = &models.flow {
            save_flow(&self.layout.checkpoint(seed, CheckpointKind::Flow), flow, seed, h, &fp)?;
        }
        if let Some(target) = &models.target {
            save_target(&self.layout.checkpoint(seed, CheckpointKind::Target), target, seed, h, &fp)?;
        }
        Ok(())
    }

    fn save_traces(&self, seed: u64, traces: &PhaseTraces) -> Result<()> {
        let h = &self.manifest_hash;
        if !traces.source.is_empty() {
            write_trace(&self.layout.loss_trace(seed, "source"), h, &[("loss", &traces.source)])?;
        }
        if !traces.flow.is_empty() {
            write_trace(
                &self.layout.loss_trace(seed, "flow"),
                h,
                &[("loss", &traces.flow), ("latent_mean_norm", &traces.latent_mean_norms)],
            )?;
        }
        if !traces.target.is_empty() {
            write_trace(&self.layout.loss_trace(seed, "target"), h, &[("loss", &traces.target)])?;
        }
        Ok(())
    }

    fn write_report(&self, report: &mut ScoreReport) -> Result<()> {
        report.manifest_hash = Some(self.manifest_hash.clone());
        write_file(&self.layout.report(), report.to_json().as_bytes())?;
        write_file(
            &self.layout.scores(),
            with_manifest(&self.manifest_hash, &report.scores_csv()).as_bytes(),
        )
    }

    fn train_one(&self, seed: u64, phase: Phase) -> Result<Option<(crate::pipeline::SeedReport, PhaseTimings)>> {
        match phase {
            Phase::All => {
                let run = run_seed(&self.cfg, &self.set, &self.prepared, seed)?;
                self.save_models(seed, &run.models)?;
                self.save_traces(seed, &run.traces)?;
                Ok(Some((run.report, run.timings)))
            }
            Phase::Source => {
                let ctx = self.context(seed).map_err(|e| e.in_seed(seed, "split"))?;
                let src = ctx.train_source().map_err(|e| e.in_seed(seed, "source"))?;
                ctx.guard.verify(&ctx.split)?;
                let fp = self.cfg.fingerprint();
                save_encoder(
                    &self.layout.checkpoint(seed, CheckpointKind::Encoder),
                    &src.encoder,
                    &src.decoder,
                    seed,
                    &self.manifest_hash,
                    &fp,
                )?;
                let traces = PhaseTraces {
                    source: src.trace,
                    ..PhaseTraces::default()
                };
                self.save_traces(seed, &traces)?;
                Ok(None)
            }
            Phase::Flow => {
                let ctx = self.context(seed).map_err(|e| e.in_seed(seed, "split"))?;
                let (encoder, _) = self.load_encoder_for(seed).map_err(|e| e.in_seed(seed, "flow"))?;
                if let Some(flow) = ctx.train_flow(&encoder).map_err(|e| e.in_seed(seed, "flow"))? {
                    ctx.guard.verify(&ctx.split)?;
                    let fp = self.cfg.fingerprint();
                    save_flow(
                        &self.layout.checkpoint(seed, CheckpointKind::Flow),
                        &flow.flow,
                        seed,
                        &self.manifest_hash,
                        &fp,
                    )?;
                    let traces = PhaseTraces {
                        flow: flow.trace,
                        latent_mean_norms: flow.latent_mean_norms,
                        ..PhaseTraces::default()
                    };
                    self.save_traces(seed, &traces)?;
                }
                Ok(None)
            }
            Phase::Target => {
                let ctx = self.context(seed).map_err(|e| e.in_seed(seed, "split"))?;
                let (encoder, _, flow) = self.load_source_for(seed).map_err(|e| e.in_seed(seed, "target"))?;
                let source = SourceNetwork::new(encoder, flow).map_err(|e| e.in_seed(seed, "target"))?;
                if let Some(t) = ctx.train_target(&source).map_err(|e| e.in_seed(seed, "target"))? {
                    ctx.guard.verify(&ctx.split)?;
                    let fp = self.cfg.fingerprint();
                    save_target(
                        &self.layout.checkpoint(seed, CheckpointKind::Target),
                        &t.target,
                        seed,
                        &self.manifest_hash,
                        &fp,
                    )?;
                    let traces = PhaseTraces {
                        target: t.trace,
                        ..PhaseTraces::default()
                    };
                    self.save_traces(seed, &traces)?;
                }
                Ok(None)
            }
        }
    }

    /// Trains `phase` for every seed. `Phase::All` also scores and writes
    /// the report, which it returns.
    pub fn train(&self, phase: Phase) -> Result<Option<ScoreReport>> {
        self.write_manifest()?;
        let results = self
            .cfg
            .seeds
            .par_iter()
            .map(|&seed| self.train_one(seed, phase))
            .collect::<Result<Vec<_>>>()?;
        if phase != Phase::All {
            return Ok(None);
        }
        let (seeds, timings): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();
        let normal = self.cfg.normal_class()?.resolve(&self.set);
        let mut report = ScoreReport::assemble(&self.cfg, normal, self.set.fingerprint(), seeds, timings);
        self.write_report(&mut report)?;
        Ok(Some(report))
    }

    /// Scores test graphs from saved checkpoints and writes the report.
    pub fn evaluate(&self) -> Result<ScoreReport> {
        let mut needed = vec![CheckpointKind::Encoder];
        if self.cfg.variant.uses_flow() {
            needed.push(CheckpointKind::Flow);
        }
        if self.cfg.variant.uses_target() {
            needed.push(CheckpointKind::Target);
        }
        let missing: Vec<u64> = self
            .cfg
            .seeds
            .iter()
            .copied()
            .filter(|&s| needed.iter().any(|&k| !self.layout.checkpoint(s, k).exists()))
            .collect();
        if !missing.is_empty() {
            return Err(Error::PhaseOrder(format!(
                "missing checkpoints under {} for seeds {missing:?}",
                self.layout.root().display()
            )));
        }
        self.write_manifest()?;
        let results = self
            .cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let models = self.load_models(seed).map_err(|e| e.in_seed(seed, "load"))?;
                let ctx = self.context(seed).map_err(|e| e.in_seed(seed, "split"))?;
                let start = std::time::Instant::now();
                let report = ctx.evaluate(&models).map_err(|e| e.in_seed(seed, "score"))?;
                let timings = PhaseTimings {
                    seed,
                    score_secs: start.elapsed().as_secs_f64(),
                    ..PhaseTimings::default()
                };
                Ok((report, timings))
            })
            .collect::<Result<Vec<_>>>()?;
        let (seeds, timings): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let normal = self.cfg.normal_class()?.resolve(&self.set);
        let mut report = ScoreReport::assemble(&self.cfg, normal, self.set.fingerprint(), seeds, timings);
        self.write_report(&mut report)?;
        Ok(report)
    }
}

/// Reads a trace CSV written by [`trace_csv`] back into its columns.
pub fn read_trace(path: &Path) -> Result<BTreeMap<String, LossTrace>> {
    let text = read_file(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').skip(1).collect();
    let mut cols: BTreeMap<String, LossTrace> = header.iter().map(|h| (h.to_string(), Vec::new())).collect();
    for line in lines {
        for (name, cell) in header.iter().zip(line.split(',').skip(1)) {
            if cell.is_empty() {
                continue;
            }
            let v = cell
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad number {cell:?}", path.display())))?;
            cols.get_mut(*name).expect("header column").push(v);
        }
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{NormalClass, Variant};
    use crate::synthetic::planted_set;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            dataset: "PLANTED".into(),
            normal_class: Some(NormalClass::Label(0)),
            seeds: vec![3, 4],
            hidden: 8,
            embed_dim: 8,
            k_se: 8,
            source_epochs: 2,
            flow_epochs: 2,
            target_epochs: 2,
            ..ExperimentConfig::default()
        }
    }

    fn workspace(cfg: ExperimentConfig, dir: &Path) -> Workspace {
        Workspace::with_set(cfg, planted_set(0), dir).unwrap()
    }

    #[test]
    fn phases_in_sequence_match_all_at_once() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let staged = workspace(cfg(), d1.path());
        for p in [Phase::Source, Phase::Flow, Phase::Target] {
            assert!(staged.train(p).unwrap().is_none());
        }
        let staged_report = staged.evaluate().unwrap();
        let whole = workspace(cfg(), d2.path());
        let whole_report = whole.train(Phase::All).unwrap().unwrap();
        assert_eq!(staged_report.seeds, whole_report.seeds);
        for seed in [3, 4] {
            for kind in [CheckpointKind::Encoder, CheckpointKind::Flow, CheckpointKind::Target] {
                let a = std::fs::read(staged.layout.checkpoint(seed, kind)).unwrap();
                let b = std::fs::read(whole.layout.checkpoint(seed, kind)).unwrap();
                assert_eq!(a, b, "{kind:?}");
            }
            for phase in ["source", "flow", "target"] {
                let a = std::fs::read(staged.layout.loss_trace(seed, phase)).unwrap();
                let b = std::fs::read(whole.layout.loss_trace(seed, phase)).unwrap();
                assert_eq!(a, b, "{phase}");
            }
        }
        let traces = read_trace(&whole.layout.loss_trace(3, "flow")).unwrap();
        assert_eq!(traces["loss"].len(), 2);
        assert_eq!(traces["latent_mean_norm"].len(), 2);
    }

    #[test]
    fn later_phase_without_upstream_is_phase_order() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(cfg(), dir.path());
        let err = ws.train(Phase::Flow).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
        ws.train(Phase::Source).unwrap();
        let err = ws.train(Phase::Target).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
        let err = ws.evaluate().unwrap_err();
        assert!(err.to_string().contains("[3, 4]"), "{err}");
    }

    #[test]
    fn changed_config_or_tampered_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(ExperimentConfig { run_name: Some("r".into()), ..cfg() }, dir.path());
        ws.train(Phase::All).unwrap();
        let changed = workspace(
            ExperimentConfig {
                run_name: Some("r".into()),
                alpha: 0.5,
                ..cfg()
            },
            dir.path(),
        );
        let err = changed.evaluate().unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");

        let path = ws.layout.checkpoint(3, CheckpointKind::Flow);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let w = &mut v["model"]["steps"][0]["f1"]["output"]["bias"]["values"][0];
        *w = serde_json::json!(w.as_f64().unwrap() + 1.0);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let err = ws.evaluate().unwrap_err();
        assert!(err.to_string().contains("parameters hash"), "{err}");

        // Retraining the encoder alone orphans the flow trained on the old one.
        let ws2 = workspace(
            ExperimentConfig {
                run_name: Some("r".into()),
                source_epochs: 2,
                ..cfg()
            },
            dir.path(),
        );
        let (enc, dec) = ws2.load_encoder_for(4).unwrap();
        let mut other = (*enc).clone();
        other.weights[0].data_mut()[0] += 0.25;
        let other = Frozen::freeze(other, enc.upstream().map(str::to_string));
        save_encoder(&ws2.layout.checkpoint(4, CheckpointKind::Encoder), &other, &dec, 4, "x", &ws2.cfg.fingerprint()).unwrap();
        let err = ws2.load_models(4).unwrap_err();
        assert!(err.to_string().contains("expected upstream fingerprint"), "{err}");
    }

    #[test]
    fn variant_without_flow_skips_flow_phase() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(
            ExperimentConfig {
                variant: Variant::NonNf,
                ..cfg()
            },
            dir.path(),
        );
        ws.train(Phase::Source).unwrap();
        ws.train(Phase::Flow).unwrap();
        assert!(!ws.layout.checkpoint(3, CheckpointKind::Flow).exists());
        ws.train(Phase::Target).unwrap();
        let r = ws.evaluate().unwrap();
        assert_eq!(r.variant, Variant::NonNf);
    }

    #[test]
    fn manifest_hash_ignores_timestamp() {
        let set = planted_set(0);
        let mut a = RunManifest::new(&cfg(), &set);
        let h = a.hash();
        a.created_unix += 1000;
        assert_eq!(a.hash(), h);
        a.config.beta = 0.1;
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn histogram_edges_and_conservation() {
        let scores = [0.0, 0.019, 0.02, 0.5, 0.999, 1.0, 1.7, -0.1];
        let h = histogram(&scores);
        assert_eq!(h.iter().sum::<usize>(), scores.len());
        assert_eq!((h[0], h[1], h[25], h[49]), (3, 1, 1, 3));
        assert_eq!(mean_bin(&[0; 50]), None);
        let csv = histogram_csv("abc", &h);
        assert_eq!(csv.lines().count(), 52);
        assert!(csv.lines().nth(2).unwrap().starts_with("0.00,0.02,3"));
    }

    #[test]
    fn trace_csv_format() {
        let csv = trace_csv("h", &[("loss", &[1.5, 0.25]), ("n", &[2.0])]);
        assert_eq!(csv, "# manifest h\nepoch,loss,n\n1,1.5,2.0\n2,0.25,\n");
    }
}
