//! End-to-end runs: configuration, the three training phases per seed,
//! scoring, AUC and the score report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowConfig, GraphFlow, TrainedFlow};
use crate::graph::{make_anomaly_split, parse_tudataset, AnomalySplit, GraphSet};
use crate::metrics::{compute_auc, mean_std};
use crate::nn::{Frozen, Mlp};
use crate::source::{pretrain_source, GcnEncoder, PretrainedSource, SourceConfig, SourceModel};
use crate::target::{
    pair_terms_on_tape, train_target, DistanceKind, Readout, SourceNetwork, TargetConfig, TargetNet, TrainedTarget,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{prepare_graphs, LossTrace, PreparedGraph, SplitGuard, TrainConfig, TrainingSet};

const NORMAL_CLASS_DEFAULTS: &str = include_str!("normal_classes.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder, flow and GIN target.
    Full,
    /// Encoder only; the score is the reconstruction loss.
    NonSt,
    /// Encoder without flow, GCN target of the same shape.
    AsySt,
    /// Encoder without flow, GIN target.
    NonNf,
}

impl Variant {
    pub fn uses_flow(self) -> bool {
        self == Variant::Full
    }

    pub fn uses_target(self) -> bool {
        self != Variant::NonSt
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NonSt => "non_st",
            Variant::AsySt => "asy_st",
            Variant::NonNf => "non_nf",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "non_st" => Ok(Variant::NonSt),
            "asy_st" => Ok(Variant::AsySt),
            "non_nf" => Ok(Variant::NonNf),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected full, non_st, asy_st or non_nf"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalRule {
    /// Most frequent label, ties to the smallest label.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NormalClass {
    Label(i64),
    Rule(NormalRule),
}

impl NormalClass {
    pub fn resolve(self, set: &GraphSet) -> i64 {
        match self {
            NormalClass::Label(l) => l,
            NormalClass::Rule(NormalRule::Majority) => {
                let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
                for g in set.graphs() {
                    *counts.entry(g.label()).or_default() += 1;
                }
                // BTreeMap iterates labels ascending; max_by_key keeps the last
                // maximum, so reverse to prefer the smallest label.
                counts
                    .into_iter()
                    .rev()
                    .max_by_key(|&(_, c)| c)
                    .map(|(l, _)| l)
                    .expect("graph set is non-empty")
            }
        }
    }
}

/// The shipped per-dataset normal-class conventions.
pub fn default_normal_class(dataset: &str) -> Option<NormalClass> {
    let table: BTreeMap<String, NormalClass> = toml::from_str(NORMAL_CLASS_DEFAULTS).expect("defaults table parses");
    table.get(dataset).copied()
}

/// One run's settings. Read from a flat TOML file; every key is optional
/// except `dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub normal_class: Option<NormalClass>,
    pub test_fraction: f64,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub beta: f64,
    pub gcn_layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub mp_steps: usize,
    pub s_max: f64,
    pub gin_layers: usize,
    pub k_se: usize,
    pub degree_features: bool,
    pub source_epochs: usize,
    pub flow_epochs: usize,
    pub target_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub variant: Variant,
    pub distance: DistanceKind,
    pub readout: Readout,
    /// Random subset of the dataset, drawn once with a fixed seed.
    pub max_graphs: Option<usize>,
    pub run_name: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: String::new(),
            data_dir: PathBuf::from("data"),
            normal_class: None,
            test_fraction: 0.15,
            seeds: vec![0, 1, 2, 3, 4],
            alpha: 0.7,
            beta: 0.6,
            gcn_layers: 2,
            hidden: 16,
            embed_dim: 16,
            mp_steps: 2,
            s_max: 2.0,
            gin_layers: 2,
            k_se: 16,
            degree_features: false,
            source_epochs: 100,
            flow_epochs: 100,
            target_epochs: 100,
            lr: 1e-3,
            batch_size: 1,
            variant: Variant::Full,
            distance: DistanceKind::Cosine,
            readout: Readout::Max,
            max_graphs: None,
            run_name: None,
        }
    }
}

/// Seed used to draw the `max_graphs` subset.
pub const SUBSAMPLE_SEED: u64 = 0;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dataset.is_empty() {
            return fail("dataset is required".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return fail(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        for (name, v) in [
            ("gcn_layers", self.gcn_layers),
            ("hidden", self.hidden),
            ("mp_steps", self.mp_steps),
            ("gin_layers", self.gin_layers),
            ("k_se", self.k_se),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return fail(format!("s_max must be positive, got {}", self.s_max));
        }
        if self.max_graphs == Some(0) {
            return fail("max_graphs must be at least 1".into());
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        self.run_name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", self.dataset, self.variant.name()))
    }

    /// Hash of every setting that shapes a trained model. Seeds, variant,
    /// run name and data location are excluded; seeds and variant are bound
    /// separately through checkpoint upstreams.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.variant = Variant::Full;
        c.run_name = None;
        c.data_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn normal_class(&self) -> Result<NormalClass> {
        self.normal_class
            .or_else(|| default_normal_class(&self.dataset))
            .ok_or_else(|| {
                Error::Config(format!(
                    "normal_class is required for {:?}, which has no shipped default",
                    self.dataset
                ))
            })
    }

    pub fn source_config(&self) -> SourceConfig {
        SourceConfig {
            layers: self.gcn_layers,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            alpha: self.alpha,
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            steps: self.mp_steps,
            s_max: self.s_max,
        }
    }

    pub fn target_config(&self) -> TargetConfig {
        TargetConfig {
            beta: self.beta,
            readout: self.readout,
            distance: self.distance,
        }
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
        }
    }

    /// Parses the dataset from `data_dir` (or `data_dir/<dataset>/` when
    /// that directory exists) and applies `max_graphs`.
    pub fn load_dataset(&self) -> Result<GraphSet> {
        let nested = self.data_dir.join(&self.dataset);
        let dir = if nested.is_dir() { nested } else { self.data_dir.clone() };
        let set = parse_tudataset(&dir, &self.dataset)?;
        Ok(self.restrict(set))
    }

    pub fn restrict(&self, set: GraphSet) -> GraphSet {
        match self.max_graphs {
            Some(m) => set.subsample(m, SUBSAMPLE_SEED),
            None => set,
        }
    }
}

/// Binds a seed to a config fingerprint; the encoder's upstream.
pub fn seed_anchor(config_fingerprint: &str, seed: u64) -> String {
    hex::encode(Sha256::digest(format!("{config_fingerprint}/seed/{seed}").as_bytes()))
}

/// Trained parameters of one seed.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub encoder: Frozen<GcnEncoder>,
    pub decoder: Mlp,
    pub flow: Option<Frozen<GraphFlow>>,
    pub target: Option<Frozen<TargetNet>>,
}

impl SeedModels {
    pub fn source_network(&self) -> Result<SourceNetwork> {
        SourceNetwork::new(self.encoder.clone(), self.flow.clone())
    }

    /// Checks that the loaded parameters form the chain `variant` needs.
    pub fn check_variant(&self, variant: Variant) -> Result<()> {
        let source = self.source_network()?;
        if variant.uses_flow() && self.flow.is_none() {
            return Err(Error::PhaseOrder(format!("variant {} needs a trained flow", variant.name())));
        }
        if !variant.uses_target() {
            return Ok(());
        }
        let target = self
            .target
            .as_ref()
            .ok_or_else(|| Error::PhaseOrder(format!("variant {} needs a trained target", variant.name())))?;
        let expected = if variant.uses_flow() {
            source.fingerprint().to_string()
        } else {
            self.encoder.fingerprint().to_string()
        };
        let found = target.upstream().unwrap_or("<none>");
        if found != expected {
            return Err(Error::PhaseOrder(format!(
                "target was trained against {found}, but variant {} expects {expected}",
                variant.name()
            )));
        }
        let kind_ok = matches!(
            (variant, &**target),
            (Variant::AsySt, TargetNet::Gcn(_)) | (Variant::Full | Variant::NonNf, TargetNet::Gin(_))
        );
        if !kind_ok {
            return Err(Error::PhaseOrder(format!(
                "target checkpoint architecture does not match variant {}",
                variant.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTraces {
    pub source: LossTrace,
    pub flow: LossTrace,
    pub latent_mean_norms: Vec<f64>,
    pub target: LossTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    /// Mean of the graph and node terms.
    pub score: f64,
    /// Their sum.
    pub raw: f64,
}

/// `score = (f(ȟ_G, ẑ_G) + mean_i f(ȟ_i, ẑ_i)) / 2`.
pub fn score_graph(g: &PreparedGraph, source: &SourceNetwork, target: &Frozen<TargetNet>, cfg: &TargetConfig) -> Result<GraphScore> {
    let expected = source.fingerprint();
    if target.upstream() != Some(expected) {
        return Err(Error::PhaseOrder(format!(
            "target was trained against {}, scoring against {expected}",
            target.upstream().unwrap_or("<none>")
        )));
    }
    let z = source.outputs(g)?;
    let t = target.embed(g)?;
    Ok(score_outputs(&t, &z, cfg))
}

pub fn score_outputs(target: &Tensor, source: &Tensor, cfg: &TargetConfig) -> GraphScore {
    let mut tape = Tape::new();
    let tv = tape.constant(target);
    let sv = tape.constant(source);
    let (g, n) = pair_terms_on_tape(&mut tape, tv, sv, cfg);
    let raw = tape.scalar(g) + tape.scalar(n);
    GraphScore { score: raw / 2.0, raw }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub graph: usize,
    pub anomaly: bool,
    pub score: f64,
    pub raw_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub auc: f64,
    pub records: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub seed: u64,
    pub source_secs: f64,
    pub flow_secs: f64,
    pub target_secs: f64,
    pub score_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub dataset: String,
    pub variant: Variant,
    pub normal_class: i64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub manifest_hash: Option<String>,
    pub seeds: Vec<SeedReport>,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Excluded from [`ScoreReport::deterministic_json`].
    pub wall_clock: Vec<PhaseTimings>,
}

impl ScoreReport {
    pub fn assemble(
        cfg: &ExperimentConfig,
        normal_class: i64,
        dataset_fingerprint: String,
        mut seeds: Vec<SeedReport>,
        wall_clock: Vec<PhaseTimings>,
    ) -> Self {
        seeds.sort_by_key(|s| s.seed);
        let aucs: Vec<f64> = seeds.iter().map(|s| s.auc).collect();
        let (auc_mean, auc_std) = mean_std(&aucs);
        ScoreReport {
            dataset: cfg.dataset.clone(),
            variant: cfg.variant,
            normal_class,
            config_fingerprint: cfg.fingerprint(),
            dataset_fingerprint,
            manifest_hash: None,
            seeds,
            auc_mean,
            auc_std,
            wall_clock,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The report with wall-clock fields removed.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.wall_clock.clear();
        r.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
    }

    /// `graph,seed,anomaly,score,raw_score` rows.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("seed,graph,anomaly,score,raw_score\n");
        for s in &self.seeds {
            for r in &s.records {
                out.push_str(&format!(
                    "{},{},{},{:?},{:?}\n",
                    s.seed, r.graph, r.anomaly as u8, r.score, r.raw_score
                ));
            }
        }
        out
    }

    /// `name  mean±std` with AUC in percent.
    pub fn table_row(&self) -> String {
        format!(
            "{} [{}]  {:.2}±{:.2}",
            self.dataset,
            self.variant.name(),
            100.0 * self.auc_mean,
            100.0 * self.auc_std
        )
    }
}

/// State shared by the phases of one seed.
pub struct SeedContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub prepared: &'a [PreparedGraph],
    pub split: AnomalySplit,
    pub seed: u64,
    pub anchor: String,
    pub guard: SplitGuard,
}

impl<'a> SeedContext<'a> {
    pub fn new(cfg: &'a ExperimentConfig, set: &GraphSet, prepared: &'a [PreparedGraph], seed: u64) -> Result<Self> {
        let normal = cfg.normal_class()?.resolve(set);
        let split = make_anomaly_split(set, normal, cfg.test_fraction, seed)?;
        Ok(SeedContext {
            cfg,
            prepared,
            split,
            seed,
            anchor: seed_anchor(&cfg.fingerprint(), seed),
            guard: SplitGuard::new(),
        })
    }

    pub fn training_set(&self) -> Result<TrainingSet<'_>> {
        TrainingSet::new(self.prepared, &self.split.train, &self.guard)
    }

    pub fn train_source(&self) -> Result<PretrainedSource> {
        let ts = self.training_set()?;
        pretrain_source(
            &ts,
            &self.cfg.source_config(),
            &self.cfg.train_config(self.cfg.source_epochs),
            self.seed,
            Some(self.anchor.clone()),
        )
    }

    pub fn check_encoder(&self, encoder: &Frozen<GcnEncoder>) -> Result<()> {
        if encoder.upstream() != Some(self.anchor.as_str()) {
            return Err(Error::PhaseOrder(format!(
                "encoder belongs to {}, this run expects {}",
                encoder.upstream().unwrap_or("<none>"),
                self.anchor
            )));
        }
        Ok(())
    }

    /// `None` for variants without a flow.
    pub fn train_flow(&self, encoder: &Frozen<GcnEncoder>) -> Result<Option<TrainedFlow>> {
        self.check_encoder(encoder)?;
        if !self.cfg.variant.uses_flow() {
            return Ok(None);
        }
        let ts = self.training_set()?;
        train_flow(
            encoder,
            &ts,
            &self.cfg.flow_config(),
            &self.cfg.train_config(self.cfg.flow_epochs),
            self.seed,
        )
        .map(Some)
    }

    /// `None` for the reconstruction-only variant.
    pub fn train_target(&self, source: &SourceNetwork) -> Result<Option<TrainedTarget>> {
        self.check_encoder(&source.encoder)?;
        let variant = self.cfg.variant;
        if !variant.uses_target() {
            return Ok(None);
        }
        if variant.uses_flow() != source.flow.is_some() {
            return Err(Error::PhaseOrder(format!(
                "variant {} {} a flow",
                variant.name(),
                if variant.uses_flow() { "needs" } else { "must not use" }
            )));
        }
        let ts = self.training_set()?;
        let input = self.prepared[self.split.train[0]].x_init.cols();
        let d = self.cfg.embed_dim;
        let init = match variant {
            Variant::AsySt => TargetNet::gcn(input, self.cfg.hidden, d, self.cfg.gcn_layers, self.seed)?,
            _ => TargetNet::gin(input, d, self.cfg.gin_layers, self.seed)?,
        };
        train_target(
            source,
            &ts,
            init,
            &self.cfg.target_config(),
            &self.cfg.train_config(self.cfg.target_epochs),
            self.seed,
        )
        .map(Some)
    }

    /// Scores every test graph and computes the AUC.
    pub fn evaluate(&self, models: &SeedModels) -> Result<SeedReport> {
        self.check_encoder(&models.encoder)?;
        models.check_variant(self.cfg.variant)?;
        let source = models.source_network()?;
        let tcfg = self.cfg.target_config();
        let records = self
            .split
            .test
            .par_iter()
            .zip(self.split.test_flags.par_iter())
            .map(|(&i, &anomaly)| {
                let g = &self.prepared[i];
                let s = match &models.target {
                    Some(t) if self.cfg.variant.uses_target() => score_graph(g, &source, t, &tcfg)?,
                    _ => {
                        let model = SourceModel {
                            encoder: (*models.encoder).clone(),
                            decoder: models.decoder.clone(),
                        };
                        let l = model.graph_loss(g, self.cfg.alpha)?;
                        GraphScore { score: l, raw: l }
                    }
                };
                Ok(ScoreRecord {
                    graph: i,
                    anomaly,
                    score: s.score,
                    raw_score: s.raw,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        let flags: Vec<bool> = records.iter().map(|r| r.anomaly).collect();
        if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::NumericFault {
                node: r.graph,
                op: "score",
                detail: format!("graph {} scored {}", r.graph, r.score),
            });
        }
        let auc = compute_auc(&scores, &flags)?;
        Ok(SeedReport {
            seed: self.seed,
            auc,
            records,
        })
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub models: SeedModels,
    pub traces: PhaseTraces,
    pub report: SeedReport,
    pub timings: PhaseTimings,
    pub split: AnomalySplit,
    /// Graph indices each trainer touched, by phase.
    pub seen: BTreeMap<String, std::collections::BTreeSet<usize>>,
}

/// All three phases and scoring for one seed. Errors carry the seed and
/// phase.
pub fn run_seed(cfg: &ExperimentConfig, set: &GraphSet, prepared: &[PreparedGraph], seed: u64) -> Result<SeedRun> {
    let ctx = SeedContext::new(cfg, set, prepared, seed).map_err(|e| e.in_seed(seed, "split"))?;
    let mut timings = PhaseTimings {
        seed,
        ..PhaseTimings::default()
    };
    let mut traces = PhaseTraces::default();

    let t = Instant::now();
    let src = ctx.train_source().map_err(|e| e.in_seed(seed, "source"))?;
    timings.source_secs = t.elapsed().as_secs_f64();
    traces.source = src.trace;

    let t = Instant::now();
    let flow = ctx.train_flow(&src.encoder).map_err(|e| e.in_seed(seed, "flow"))?;
    timings.flow_secs = t.elapsed().as_secs_f64();
    let flow = flow.map(|f| {
        traces.flow = f.trace;
        traces.latent_mean_norms = f.latent_mean_norms;
        f.flow
    });

    let source = SourceNetwork::new(src.encoder.clone(), flow.clone()).map_err(|e| e.in_seed(seed, "target"))?;
    let t = Instant::now();
    let target = ctx.train_target(&source).map_err(|e| e.in_seed(seed, "target"))?;
    timings.target_secs = t.elapsed().as_secs_f64();
    let target = target.map(|t| {
        traces.target = t.trace;
        t.target
    });

    ctx.guard.verify(&ctx.split).map_err(|e| e.in_seed(seed, "split"))?;
    let models = SeedModels {
        encoder: src.encoder,
        decoder: src.decoder,
        flow,
        target,
    };
    let t = Instant::now();
    let report = ctx.evaluate(&models).map_err(|e| e.in_seed(seed, "score"))?;
    timings.score_secs = t.elapsed().as_secs_f64();
    Ok(SeedRun {
        models,
        traces,
        report,
        timings,
        seen: ctx.guard.seen(),
        split: ctx.split,
    })
}

/// Result of [`run_experiment_on`]: the report plus per-seed artefacts.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ScoreReport,
    pub seeds: Vec<SeedRun>,
}

/// Runs every seed of `cfg` on an already loaded set. Seeds run in parallel.
pub fn run_experiment_on(cfg: &ExperimentConfig, set: &GraphSet) -> Result<ExperimentRun> {
    cfg.validate()?;
    let normal = cfg.normal_class()?.resolve(set);
    let prepared = prepare_graphs(set, cfg.k_se, cfg.degree_features)?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, set, &prepared, seed))
        .collect::<Result<Vec<_>>>()?;
    let report = ScoreReport::assemble(
        cfg,
        normal,
        set.fingerprint(),
        runs.iter().map(|r| r.report.clone()).collect(),
        runs.iter().map(|r| r.timings.clone()).collect(),
    );
    Ok(ExperimentRun { report, seeds: runs })
}

/// Loads the dataset named by `cfg` and runs every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let set = cfg.load_dataset()?;
    Ok(run_experiment_on(cfg, &set)?.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Source,
    Flow,
    Target,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Stage::Source),
            "flow" => Ok(Stage::Flow),
            "target" => Ok(Stage::Target),
            other => Err(Error::Config(format!(
                "unknown stage {other:?}; expected source, flow or target"
            ))),
        }
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::Flow => "flow",
            Stage::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub graph: usize,
    pub anomaly: bool,
    pub vector: Vec<f64>,
}

/// Graph-level representation of each `(graph, flag)` at `stage`.
pub fn export_embeddings(
    prepared: &[PreparedGraph],
    graphs: &[(usize, bool)],
    models: &SeedModels,
    stage: Stage,
    readout: Readout,
) -> Result<Vec<EmbeddingRow>> {
    let source = models.source_network()?;
    if stage == Stage::Flow && models.flow.is_none() {
        return Err(Error::Config("no flow parameters are loaded for the flow stage".into()));
    }
    if stage == Stage::Target && models.target.is_none() {
        return Err(Error::Config("no target parameters are loaded for the target stage".into()));
    }
    graphs
        .par_iter()
        .map(|&(i, anomaly)| {
            let g = prepared
                .get(i)
                .ok_or_else(|| Error::Contract(format!("graph {i} out of range")))?;
            let nodes = match stage {
                Stage::Source => source.embed(g)?,
                Stage::Flow => source.outputs(g)?,
                Stage::Target => models.target.as_ref().expect("checked above").embed(g)?,
            };
            Ok(EmbeddingRow {
                graph: i,
                anomaly,
                vector: readout.apply(&nodes)?.into_data(),
            })
        })
        .collect()
}

/// `graph,anomaly,e0,…` rows.
pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("graph,anomaly");
    for j in 0..d {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.graph, r.anomaly as u8));
        for v in &r.vector {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::synthetic::planted_set;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: "synthetic".into(),
            normal_class: Some(NormalClass::Label(0)),
            seeds: vec![7],
            hidden: 8,
            embed_dim: 8,
            k_se: 8,
            source_epochs: 3,
            flow_epochs: 3,
            target_epochs: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_toml_str("dataset = \"AIDS\"").unwrap();
        assert_eq!(cfg.embed_dim, 16);
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.normal_class().unwrap(), NormalClass::Rule(NormalRule::Majority));
        for bad in [
            "dataset = \"A\"\nembed_dim = 15",
            "dataset = \"A\"\nalpha = 1.5",
            "dataset = \"A\"\nseeds = []",
            "dataset = \"A\"\nunknown_key = 1",
            "alpha = 0.5",
            "dataset = \"A\"\nvariant = \"other\"",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
        let cfg = ExperimentConfig::from_toml_str("dataset = \"mine\"").unwrap();
        assert!(matches!(cfg.normal_class(), Err(Error::Config(_))));
        let cfg = ExperimentConfig::from_toml_str("dataset = \"mine\"\nnormal_class = 3\nvariant = \"non_st\"").unwrap();
        assert_eq!(cfg.normal_class().unwrap(), NormalClass::Label(3));
        assert_eq!(cfg.variant, Variant::NonSt);
        let round = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn defaults_table_covers_fifteen_datasets() {
        let table: BTreeMap<String, NormalClass> = toml::from_str(NORMAL_CLASS_DEFAULTS).unwrap();
        assert_eq!(table.len(), 15);
    }

    #[test]
    fn majority_breaks_ties_low() {
        let g = |l| Graph::from_edges(1, &[], Tensor::zeros(1, 0), l).unwrap();
        let set = GraphSet::new("m", vec![g(2), g(1), g(2), g(1), g(5)]).unwrap();
        assert_eq!(NormalClass::Rule(NormalRule::Majority).resolve(&set), 1);
    }

    #[test]
    fn fingerprint_ignores_seeds_and_variant() {
        let a = tiny_config();
        let mut b = a.clone();
        b.seeds = vec![1, 2];
        b.variant = Variant::NonNf;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.alpha = 0.5;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn score_examples() {
        let cfg = TargetConfig::default();
        let s = Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, 2.0]);
        assert!(score_outputs(&s, &s, &cfg).score < 1e-12);
        let neg = Tensor::matrix(2, 2, vec![-1.0, -0.5, 1.0, -2.0]);
        // max readout of -s is not -max(s), so use a single node where both
        // terms are anti-colinear.
        let one = Tensor::row(vec![1.0, 2.0]);
        let minus = Tensor::row(vec![-1.0, -2.0]);
        let r = score_outputs(&minus, &one, &cfg);
        assert!((r.score - 1.0).abs() < 1e-15 && (r.raw - 2.0).abs() < 1e-15);
        assert!(score_outputs(&neg, &s, &cfg).score > 0.5);
    }

    #[test]
    fn tiny_run_is_deterministic_and_pure() {
        let cfg = tiny_config();
        let set = planted_set(3);
        let a = run_experiment_on(&cfg, &set).unwrap();
        let b = run_experiment_on(&cfg, &set).unwrap();
        assert_eq!(a.report.deterministic_json(), b.report.deterministic_json());
        assert_eq!(a.report.seeds.len(), 1);
        let run = &a.seeds[0];
        for phase in ["source", "flow", "target"] {
            let seen = &run.seen[phase];
            assert_eq!(seen.len(), run.split.train.len());
            assert!(run.split.test.iter().all(|t| !seen.contains(t)));
        }
    }

    #[test]
    fn variants_produce_reports() {
        let set = planted_set(3);
        for v in [Variant::NonSt, Variant::AsySt, Variant::NonNf] {
            let cfg = ExperimentConfig {
                variant: v,
                ..tiny_config()
            };
            let run = run_experiment_on(&cfg, &set).unwrap();
            let m = &run.seeds[0].models;
            assert_eq!(m.flow.is_some(), v.uses_flow());
            assert_eq!(m.target.is_some(), v.uses_target());
            assert!((0.0..=1.0).contains(&run.report.auc_mean));
        }
    }

    #[test]
    fn score_is_invariant_under_relabeling() {
        let set = planted_set(3);
        let cfg = tiny_config();
        let run = run_experiment_on(&cfg, &set).unwrap();
        let models = &run.seeds[0].models;
        let source = models.source_network().unwrap();
        let target = models.target.as_ref().unwrap();
        for idx in [0, 52] {
            let g = &set.graphs()[idx];
            let n = g.node_count();
            let perm: Vec<usize> = (0..n).map(|i| (i + 3) % n).rev().collect();
            let pair = GraphSet::new("p", vec![g.clone(), g.permuted(&perm)]).unwrap();
            let prepared = prepare_graphs(&pair, cfg.k_se, false).unwrap();
            let a = score_graph(&prepared[0], &source, target, &cfg.target_config()).unwrap();
            let b = score_graph(&prepared[1], &source, target, &cfg.target_config()).unwrap();
            assert!((a.score - b.score).abs() < 1e-9, "{} {}", a.score, b.score);
        }
    }

    #[test]
    fn score_rejects_foreign_target() {
        let set = planted_set(3);
        let cfg = tiny_config();
        let run = run_experiment_on(&cfg, &set).unwrap();
        let other = run_experiment_on(&ExperimentConfig { seeds: vec![8], ..cfg.clone() }, &set).unwrap();
        let mut mixed = run.seeds[0].models.clone();
        mixed.target = other.seeds[0].models.target.clone();
        assert!(matches!(mixed.check_variant(Variant::Full), Err(Error::PhaseOrder(_))));
        let prepared = prepare_graphs(&set, cfg.k_se, false).unwrap();
        let source = run.seeds[0].models.source_network().unwrap();
        let err = score_graph(&prepared[0], &source, mixed.target.as_ref().unwrap(), &cfg.target_config());
        assert!(matches!(err, Err(Error::PhaseOrder(_))));
    }

    #[test]
    fn export_shapes_and_repeatability() {
        let set = planted_set(3);
        let cfg = tiny_config();
        let run = run_experiment_on(&cfg, &set).unwrap();
        let prepared = prepare_graphs(&set, cfg.k_se, false).unwrap();
        let graphs = [(0, false), (1, false), (55, true)];
        let models = &run.seeds[0].models;
        for stage in [Stage::Source, Stage::Flow, Stage::Target] {
            let rows = export_embeddings(&prepared, &graphs, models, stage, Readout::Max).unwrap();
            assert_eq!(rows.len(), 3);
            let csv = embeddings_csv(&rows);
            assert!(csv.lines().all(|l| l.split(',').count() == cfg.embed_dim + 2));
            assert_eq!(rows, export_embeddings(&prepared, &graphs, models, stage, Readout::Max).unwrap());
        }
        assert!(matches!("latent".parse::<Stage>(), Err(Error::Config(_))));
    }

    #[test]
    fn per_seed_errors_name_seed_and_phase() {
        let set = planted_set(3);
        let cfg = ExperimentConfig {
            normal_class: Some(NormalClass::Label(42)),
            ..tiny_config()
        };
        let err = run_experiment_on(&cfg, &set).unwrap_err();
        assert!(matches!(err, Error::InSeed { seed: 7, phase: "split", .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn all_normal_test_set_is_undefined_metric() {
        let g = |l| Graph::from_edges(2, &[(0, 1)], Tensor::zeros(2, 0), l).unwrap();
        let set = GraphSet::new("one", (0..10).map(|_| g(0)).collect()).unwrap();
        let err = run_experiment_on(&tiny_config(), &set).unwrap_err();
        assert_eq!(err.exit_code(), 6, "{err}");
    }
}
