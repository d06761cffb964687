use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowdistill::artifacts::mean_bin;
use flowdistill::pipeline::{ScoreReport, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowdistill"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

/// Planted set plus a short-training config in `dir`.
fn planted(dir: &Path, extra: &str) -> PathBuf {
    ok(&run(&["synth", "data"], dir));
    let cfg = dir.join("run.toml");
    let body = format!(
        "dataset = \"PLANTED\"\ndata_dir = \"data\"\nnormal_class = 0\nseeds = [0, 1]\n\
         source_epochs = 20\nflow_epochs = 20\ntarget_epochs = 20\n{extra}"
    );
    std::fs::write(&cfg, body).unwrap();
    cfg
}

fn read_hist(path: &Path) -> Vec<usize> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn prepare_counts_fixture_graphs() {
    let dir = tempfile::tempdir().unwrap();
    for (suffix, body) in [("A", "1, 2\n2, 1"), ("graph_indicator", "1\n1\n2"), ("graph_labels", "0\n1")] {
        std::fs::write(dir.path().join(format!("FX_{suffix}.txt")), body).unwrap();
    }
    let o = run(&["prepare", ".", "FX"], dir.path());
    ok(&o);
    assert!(stdout(&o).starts_with("2 graphs, avg nodes 1.50"), "{}", stdout(&o));
    assert!(dir.path().join("FX.canonical.json").exists());

    std::fs::remove_file(dir.path().join("FX_graph_indicator.txt")).unwrap();
    let o = run(&["prepare", ".", "FX"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("FX_graph_indicator.txt"), "{}", stderr(&o));
}

#[test]
fn train_all_writes_checkpoints_report_and_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = planted(dir.path(), "");
    let o = run(&["train", "run.toml", "--phase", "all"], dir.path());
    ok(&o);
    assert!(stdout(&o).contains("PLANTED [full]"), "{}", stdout(&o));
    let root = dir.path().join("runs/PLANTED_full");
    for seed in ["0", "1"] {
        for f in ["encoder.ckpt", "flow.ckpt", "target.ckpt", "source_loss.csv", "flow_loss.csv", "target_loss.csv"] {
            assert!(root.join(seed).join(f).exists(), "{seed}/{f}");
        }
    }
    let report_text = std::fs::read_to_string(root.join("report.json")).unwrap();
    let report = ScoreReport::from_json(&report_text).unwrap();
    assert_eq!(report.seeds.len(), 2);
    let hash = report.manifest_hash.clone().unwrap();
    assert!(std::fs::read_to_string(root.join("scores.csv")).unwrap().contains(&hash));

    // Same config and seeds again: identical traces and checkpoints.
    let before: Vec<Vec<u8>> = ["source_loss.csv", "flow_loss.csv", "target_loss.csv", "target.ckpt"]
        .iter()
        .map(|f| std::fs::read(root.join("1").join(f)).unwrap())
        .collect();
    ok(&run(&["train", "run.toml"], dir.path()));
    for (f, b) in ["source_loss.csv", "flow_loss.csv", "target_loss.csv", "target.ckpt"].iter().zip(&before) {
        assert_eq!(&std::fs::read(root.join("1").join(f)).unwrap(), b, "{f}");
    }
    let again = ScoreReport::from_json(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(again.deterministic_json(), report.deterministic_json());

    let o = run(&["eval", cfg.to_str().unwrap()], dir.path());
    ok(&o);
    assert!(stdout(&o).contains("PLANTED [full]"));

    let o = run(&["plotdata", "runs/PLANTED_full/report.json"], dir.path());
    ok(&o);
    let normal = read_hist(&root.join("hist_normal.csv"));
    let anomaly = read_hist(&root.join("hist_anomaly.csv"));
    assert_eq!(normal.len(), 50);
    let count = |a: bool| report.seeds.iter().flat_map(|s| &s.records).filter(|r| r.anomaly == a).count();
    assert_eq!(normal.iter().sum::<usize>(), count(false));
    assert_eq!(anomaly.iter().sum::<usize>(), count(true));
    assert!(mean_bin(&anomaly).unwrap() > mean_bin(&normal).unwrap());
    for stage in ["source", "flow", "target"] {
        let csv = std::fs::read_to_string(root.join(format!("embeddings_{stage}_seed0.csv"))).unwrap();
        // manifest line + header + one row per test graph, 16 + 2 columns
        assert_eq!(csv.lines().count(), 2 + report.seeds[0].records.len());
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 18);
    }

    // All-normal report: anomaly histogram present and all zero.
    let mut flat = report.clone();
    for s in &mut flat.seeds {
        for r in &mut s.records {
            r.anomaly = false;
        }
    }
    let other = dir.path().join("normal_only");
    std::fs::create_dir_all(&other).unwrap();
    std::fs::write(other.join("report.json"), flat.to_json()).unwrap();
    ok(&run(&["plotdata", "normal_only/report.json"], dir.path()));
    assert!(read_hist(&other.join("hist_anomaly.csv")).iter().all(|&c| c == 0));

    let mut empty = report;
    for s in &mut empty.seeds {
        s.records.clear();
    }
    std::fs::write(other.join("report.json"), empty.to_json()).unwrap();
    let o = run(&["plotdata", "normal_only/report.json"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn phase_order_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "");
    let o = run(&["train", "run.toml", "--phase", "flow"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("encoder checkpoint"), "{}", stderr(&o));

    ok(&run(&["train", "run.toml", "--phase", "source"], dir.path()));
    let o = run(&["eval", "run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("[0, 1]"), "{}", stderr(&o));

    // A changed setting makes the stored encoder foreign to this config.
    let text = std::fs::read_to_string(dir.path().join("run.toml")).unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{text}alpha = 0.5\n")).unwrap();
    let o = run(&["train", "run.toml", "--phase", "flow"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("trained under config"), "{}", stderr(&o));
}

#[test]
fn variant_flag_reaches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    planted(dir.path(), "");
    for phase in ["source", "flow", "target"] {
        ok(&run(&["train", "run.toml", "--phase", phase, "--variant", "non_st"], dir.path()));
    }
    let o = run(&["eval", "run.toml", "--variant", "non_st", "--seed-override", "1"], dir.path());
    ok(&o);
    assert!(stdout(&o).contains("[non_st]"));
    let root = dir.path().join("runs/PLANTED_non_st");
    assert!(!root.join("0/flow.ckpt").exists() && !root.join("0/target.ckpt").exists());
    let report = ScoreReport::from_json(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.variant, Variant::NonSt);
    assert_eq!(report.seeds.len(), 1);
    assert_eq!(report.seeds[0].seed, 1);

    let o = run(&["train", "run.toml", "--variant", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn single_class_test_set_is_undefined_metric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut edges = String::new();
    let mut indicator = String::new();
    for g in 0..6 {
        edges.push_str(&format!("{}, {}\n{}, {}\n", 2 * g + 1, 2 * g + 2, 2 * g + 2, 2 * g + 1));
        indicator.push_str(&format!("{}\n{}\n", g + 1, g + 1));
    }
    std::fs::write(d.join("ONE_A.txt"), edges).unwrap();
    std::fs::write(d.join("ONE_graph_indicator.txt"), indicator).unwrap();
    std::fs::write(d.join("ONE_graph_labels.txt"), "0\n".repeat(6)).unwrap();
    std::fs::write(
        d.join("one.toml"),
        "dataset = \"ONE\"\ndata_dir = \".\"\nnormal_class = 0\nseeds = [0]\nsource_epochs = 2\nflow_epochs = 2\ntarget_epochs = 2\n",
    )
    .unwrap();
    for phase in ["source", "flow", "target"] {
        ok(&run(&["train", "one.toml", "--phase", phase], d));
    }
    let o = run(&["eval", "one.toml"], d);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    assert!(stderr(&o).contains("undefined metric"));
}

#[test]
fn bad_config_is_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "dataset = \"X\"\nembed_dim = 7\n").unwrap();
    let o = run(&["train", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("embed_dim"));
    let o = run(&["train", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}
