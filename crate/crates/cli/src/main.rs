use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowdistill::artifacts::{histogram, histogram_csv, with_manifest, Phase, RunLayout, RunManifest, Workspace};
use flowdistill::graph::{parse_tudataset, write_tudataset};
use flowdistill::pipeline::{embeddings_csv, export_embeddings, ExperimentConfig, NormalClass, ScoreReport, Stage, Variant};
use flowdistill::synthetic::{planted_set, NORMAL_LABEL};
use flowdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Graph-level anomaly detection by flow-conditioned distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Replace the config's seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,

    /// Output root. Defaults: `runs` for train/eval, the dataset directory
    /// for prepare, the report's directory for plotdata.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a TUDataset directory, print statistics, write canonical JSON.
    Prepare { dir: PathBuf, name: String },
    /// Train one phase or all phases for every seed.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "all")]
        phase: String,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score test graphs from saved checkpoints.
    Eval {
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score histograms and embedding tables for a report.
    Plotdata { report: PathBuf },
    /// Write the seeded planted-anomaly set and a config for it.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a config; a relative `data_dir` is taken relative to the file.
fn load_config(path: &Path, cli: &Cli, variant: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if cfg.data_dir.is_relative() {
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
    }
    if let Some(seeds) = &cli.seed_override {
        cfg.seeds = seeds.clone();
    }
    if let Some(v) = variant {
        cfg.variant = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare(cli: &Cli, dir: &Path, name: &str) -> Result<()> {
    let set = parse_tudataset(dir, name)?;
    let stats = set.stats();
    println!(
        "{} graphs, avg nodes {:.2}, avg edges {:.2}",
        stats.graphs, stats.avg_nodes, stats.avg_edges
    );
    let out = cli.out_dir.clone().unwrap_or_else(|| dir.to_path_buf());
    let path = out.join(format!("{name}.canonical.json"));
    write(&path, &set.to_json())?;
    println!("fingerprint {}", set.fingerprint());
    println!("wrote {}", path.display());
    Ok(())
}

fn train(cli: &Cli, config: &Path, phase: &str, variant: Option<&str>) -> Result<()> {
    let phase: Phase = phase.parse()?;
    let cfg = load_config(config, cli, variant)?;
    let ws = Workspace::open(cfg, &out_root(cli))?;
    eprintln!("training {:?} for seeds {:?} into {}", phase, ws.cfg.seeds, ws.layout.root().display());
    if let Some(report) = ws.train(phase)? {
        println!("{}", report.table_row());
        println!("wrote {}", ws.layout.report().display());
    }
    Ok(())
}

fn eval(cli: &Cli, config: &Path, variant: Option<&str>) -> Result<()> {
    let cfg = load_config(config, cli, variant)?;
    let ws = Workspace::open(cfg, &out_root(cli))?;
    let report = ws.evaluate()?;
    println!("{}", report.table_row());
    println!("wrote {}", ws.layout.report().display());
    Ok(())
}

fn plotdata(cli: &Cli, report_path: &Path) -> Result<()> {
    if !report_path.exists() {
        return Err(Error::Config(format!("report {} not found", report_path.display())));
    }
    let text = std::fs::read_to_string(report_path).map_err(|e| Error::io(report_path, e))?;
    let report = ScoreReport::from_json(&text)?;
    if report.seeds.iter().all(|s| s.records.is_empty()) {
        return Err(Error::Config(format!("report {} holds no scored graphs", report_path.display())));
    }
    let run_dir = report_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = cli.out_dir.clone().unwrap_or_else(|| run_dir.clone());
    let hash = report.manifest_hash.clone().unwrap_or_else(|| "none".into());

    let scores = |anomaly: bool| -> Vec<f64> {
        report
            .seeds
            .iter()
            .flat_map(|s| s.records.iter())
            .filter(|r| r.anomaly == anomaly)
            .map(|r| r.score)
            .collect()
    };
    for (file, anomaly) in [("hist_normal.csv", false), ("hist_anomaly.csv", true)] {
        let path = out.join(file);
        write(&path, &histogram_csv(&hash, &histogram(&scores(anomaly))))?;
        println!("wrote {}", path.display());
    }

    let layout = RunLayout::at(&run_dir);
    if !layout.manifest().exists() {
        eprintln!("no manifest next to the report; skipping embeddings");
        return Ok(());
    }
    let manifest = RunManifest::load(&layout.manifest())?;
    let mut cfg = manifest.config;
    cfg.variant = report.variant;
    let mut ws = Workspace::open(cfg, &run_dir)?;
    ws.layout = layout;
    let mut stages = vec![Stage::Source];
    if report.variant.uses_flow() {
        stages.push(Stage::Flow);
    }
    if report.variant.uses_target() {
        stages.push(Stage::Target);
    }
    for seed in &report.seeds {
        let models = ws.load_models(seed.seed)?;
        let graphs: Vec<(usize, bool)> = seed.records.iter().map(|r| (r.graph, r.anomaly)).collect();
        for &stage in &stages {
            let rows = export_embeddings(&ws.prepared, &graphs, &models, stage, ws.cfg.readout)?;
            let path = out.join(format!("embeddings_{}_seed{}.csv", stage.name(), seed.seed));
            write(&path, &with_manifest(&hash, &embeddings_csv(&rows)))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn synth(dir: &Path, seed: u64) -> Result<()> {
    let set = planted_set(seed);
    write_tudataset(&set, dir)?;
    let cfg = ExperimentConfig {
        dataset: set.name().to_string(),
        data_dir: PathBuf::from("."),
        normal_class: Some(NormalClass::Label(NORMAL_LABEL)),
        variant: Variant::Full,
        ..ExperimentConfig::default()
    };
    let path = dir.join("planted.toml");
    write(&path, &cfg.to_toml())?;
    println!("{} graphs written to {}", set.len(), dir.display());
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare { dir, name } => prepare(cli, dir, name),
        Command::Train { config, phase, variant } => train(cli, config, phase, variant.as_deref()),
        Command::Eval { config, variant } => eval(cli, config, variant.as_deref()),
        Command::Plotdata { report } => plotdata(cli, report),
        Command::Synth { dir, seed } => synth(dir, *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
