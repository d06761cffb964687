//! Reader and writer for the TUDataset text layout.
//!
//! A dataset `DS` lives in one directory as:
//!
//! - `DS_A.txt`: one `i, j` edge per line, 1-based global node ids
//! - `DS_graph_indicator.txt`: line `i` holds the 1-based graph id of node `i`
//! - `DS_graph_labels.txt`: one integer class label per graph
//! - `DS_node_labels.txt` (optional): one integer label per node
//! - `DS_node_attributes.txt` (optional): comma-separated reals per node
//!
//! Node labels become one-hot columns (one per distinct value, ascending)
//! followed by the attribute columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{Graph, GraphSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct TextFile {
    name: String,
    lines: Vec<(usize, String)>,
}

fn file_path(dir: &Path, ds: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{ds}_{suffix}.txt"))
}

fn read_lines(path: &Path) -> Result<Option<TextFile>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .collect();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Some(TextFile { name, lines }))
}

fn required(dir: &Path, ds: &str, suffix: &str) -> Result<TextFile> {
    let path = file_path(dir, ds, suffix);
    read_lines(&path)?.ok_or(Error::MissingFile { path })
}

fn parse_field<T: FromStr>(file: &TextFile, line: usize, raw: &str, what: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        file: file.name.clone(),
        line,
        msg: format!("expected {what}, found {:?}", raw.trim()),
    })
}

pub fn parse_tudataset(dir: impl AsRef<Path>, name: &str) -> Result<GraphSet> {
    let dir = dir.as_ref();
    let edges_file = required(dir, name, "A")?;
    let indicator_file = required(dir, name, "graph_indicator")?;
    let labels_file = required(dir, name, "graph_labels")?;
    let node_labels_file = read_lines(&file_path(dir, name, "node_labels"))?;
    let attrs_file = read_lines(&file_path(dir, name, "node_attributes"))?;

    let graph_labels: Vec<i64> = labels_file
        .lines
        .iter()
        .map(|(ln, l)| parse_field(&labels_file, *ln, l, "integer graph label"))
        .collect::<Result<_>>()?;
    let m = graph_labels.len();
    if m == 0 {
        return Err(Error::Malformed {
            file: labels_file.name,
            line: 1,
            msg: "no graph labels".into(),
        });
    }

    // graph (0-based) and local index of every global node
    let mut owner = Vec::with_capacity(indicator_file.lines.len());
    let mut sizes = vec![0usize; m];
    for (ln, l) in &indicator_file.lines {
        let gid: usize = parse_field(&indicator_file, *ln, l, "integer graph id")?;
        if gid == 0 || gid > m {
            return Err(Error::Malformed {
                file: indicator_file.name.clone(),
                line: *ln,
                msg: format!("graph id {gid} outside 1..={m}"),
            });
        }
        owner.push((gid - 1, sizes[gid - 1]));
        sizes[gid - 1] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Malformed {
            file: indicator_file.name.clone(),
            line: indicator_file.lines.last().map_or(1, |(ln, _)| *ln),
            msg: format!("graph {} has no nodes", empty + 1),
        });
    }
    let total_nodes = owner.len();

    let node_cols = |file: &TextFile| -> Result<()> {
        if file.lines.len() != total_nodes {
            return Err(Error::Malformed {
                file: file.name.clone(),
                line: file.lines.last().map_or(1, |(ln, _)| *ln),
                msg: format!("{} rows for {total_nodes} nodes", file.lines.len()),
            });
        }
        Ok(())
    };

    let mut one_hot: Option<(Vec<usize>, usize)> = None;
    if let Some(f) = &node_labels_file {
        node_cols(f)?;
        let raw: Vec<i64> = f
            .lines
            .iter()
            .map(|(ln, l)| {
                // some datasets carry several comma-separated node labels; the first is used
                let first = l.split(',').next().unwrap_or("");
                parse_field(f, *ln, first, "integer node label")
            })
            .collect::<Result<_>>()?;
        let vocab: BTreeMap<i64, usize> = raw
            .iter()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        one_hot = Some((raw.iter().map(|v| vocab[v]).collect(), vocab.len()));
    }

    let mut attrs: Option<(Vec<Vec<f64>>, usize)> = None;
    if let Some(f) = &attrs_file {
        node_cols(f)?;
        let rows: Vec<Vec<f64>> = f
            .lines
            .iter()
            .map(|(ln, l)| {
                l.split(',')
                    .map(|v| parse_field(f, *ln, v, "real node attribute"))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let width = rows[0].len();
        if let Some(k) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::Malformed {
                file: f.name.clone(),
                line: f.lines[k].0,
                msg: format!("expected {width} attributes, found {}", rows[k].len()),
            });
        }
        attrs = Some((rows, width));
    }

    let label_width = one_hot.as_ref().map_or(0, |(_, w)| *w);
    let attr_width = attrs.as_ref().map_or(0, |(_, w)| *w);
    let d = label_width + attr_width;

    let mut adjacency: Vec<Tensor> = sizes.iter().map(|&n| Tensor::zeros(n, n)).collect();
    let mut features: Vec<Tensor> = sizes.iter().map(|&n| Tensor::zeros(n, d)).collect();
    for (node, &(g, local)) in owner.iter().enumerate() {
        if let Some((idx, _)) = &one_hot {
            features[g].set(local, idx[node], 1.0);
        }
        if let Some((rows, _)) = &attrs {
            for (c, v) in rows[node].iter().enumerate() {
                features[g].set(local, label_width + c, *v);
            }
        }
    }

    for (ln, l) in &edges_file.lines {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                file: edges_file.name.clone(),
                line: *ln,
                msg: format!("expected `i, j`, found {l:?}"),
            });
        };
        let a: usize = parse_field(&edges_file, *ln, a, "integer node id")?;
        let b: usize = parse_field(&edges_file, *ln, b, "integer node id")?;
        for v in [a, b] {
            if v == 0 || v > total_nodes {
                return Err(Error::Malformed {
                    file: edges_file.name.clone(),
                    line: *ln,
                    msg: format!("node id {v} outside 1..={total_nodes}"),
                });
            }
        }
        let (ga, la) = owner[a - 1];
        let (gb, lb) = owner[b - 1];
        if ga != gb {
            return Err(Error::Malformed {
                file: edges_file.name.clone(),
                line: *ln,
                msg: format!("edge ({a}, {b}) joins graphs {} and {}", ga + 1, gb + 1),
            });
        }
        adjacency[ga].set(la, lb, 1.0);
        adjacency[ga].set(lb, la, 1.0);
    }

    let graphs = adjacency
        .into_iter()
        .zip(features)
        .zip(graph_labels)
        .map(|((a, x), y)| Graph::new(a, x, y))
        .collect::<Result<Vec<_>>>()?;
    GraphSet::new(name, graphs)
}

/// Writes `set` in the TUDataset layout under `dir` using `set.name()` as the
/// file prefix. Features are written as node attributes.
pub fn write_tudataset(set: &GraphSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ds = set.name();
    let (mut edges, mut indicator, mut labels, mut attrs) =
        (String::new(), String::new(), String::new(), String::new());
    let mut offset = 0usize;
    for (gi, g) in set.graphs().iter().enumerate() {
        let n = g.node_count();
        for i in 0..n {
            let _ = writeln!(indicator, "{}", gi + 1);
            if g.attr_dim() > 0 {
                let row: Vec<String> = g.features().row_slice(i).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(attrs, "{}", row.join(", "));
            }
            for j in g.neighbors(i) {
                let _ = writeln!(edges, "{}, {}", offset + i + 1, offset + j + 1);
            }
        }
        let _ = writeln!(labels, "{}", g.label());
        offset += n;
    }
    let write = |suffix: &str, body: &str| -> Result<()> {
        let p = file_path(dir, ds, suffix);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("A", &edges)?;
    write("graph_indicator", &indicator)?;
    write("graph_labels", &labels)?;
    if set.attr_dim() > 0 {
        write("node_attributes", &attrs)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (suffix, body) in files {
            fs::write(dir.path().join(format!("FX_{suffix}.txt")), body).unwrap();
        }
        dir
    }

    #[test]
    fn five_line_fixture() {
        let dir = fixture(&[("A", "1, 2\n2, 1"), ("graph_indicator", "1\n1\n2"), ("graph_labels", "0\n1")]);
        let set = parse_tudataset(dir.path(), "FX").unwrap();
        assert_eq!(set.len(), 2);
        let (g0, g1) = (&set.graphs()[0], &set.graphs()[1]);
        assert_eq!(g0.node_count(), 2);
        assert_eq!(g0.edges(), vec![(0, 1)]);
        assert_eq!(g0.label(), 0);
        assert_eq!(g1.node_count(), 1);
        assert!(g1.edges().is_empty());
        assert_eq!(g1.label(), 1);
        assert_eq!(set.attr_dim(), 0);
    }

    #[test]
    fn empty_edge_file() {
        let dir = fixture(&[("A", ""), ("graph_indicator", "1"), ("graph_labels", "3")]);
        let set = parse_tudataset(dir.path(), "FX").unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.graphs()[0].node_count(), 1);
        assert!(set.graphs()[0].edges().is_empty());
    }

    #[test]
    fn node_labels_one_hot_then_attributes() {
        let dir = fixture(&[
            ("A", "1, 2\n2, 1\n2, 2"),
            ("graph_indicator", "1\n1"),
            ("graph_labels", "1"),
            ("node_labels", "7\n3"),
            ("node_attributes", "0.5, 1.5\n-2, 4e-1"),
        ]);
        let set = parse_tudataset(dir.path(), "FX").unwrap();
        let g = &set.graphs()[0];
        assert_eq!(g.features().data(), &[0.0, 1.0, 0.5, 1.5, 1.0, 0.0, -2.0, 0.4]);
        // self-loop preserved, duplicate edge collapsed
        assert_eq!(g.edges(), vec![(0, 1), (1, 1)]);
    }

    #[test]
    fn missing_file_named() {
        let dir = fixture(&[("A", ""), ("graph_labels", "0")]);
        match parse_tudataset(dir.path(), "FX") {
            Err(Error::MissingFile { path }) => {
                assert!(path.ends_with("FX_graph_indicator.txt"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_graph_edge_reports_line() {
        let dir = fixture(&[("A", "1, 2\n2, 3"), ("graph_indicator", "1\n1\n2"), ("graph_labels", "0\n1")]);
        match parse_tudataset(dir.path(), "FX") {
            Err(Error::Malformed { line, file, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(file, "FX_A.txt");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_integer_reports_line() {
        let dir = fixture(&[("A", "1, 2"), ("graph_indicator", "1\nx"), ("graph_labels", "0")]);
        match parse_tudataset(dir.path(), "FX") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn graph_without_nodes_is_malformed() {
        let dir = fixture(&[("A", ""), ("graph_indicator", "1"), ("graph_labels", "0\n1")]);
        assert!(matches!(parse_tudataset(dir.path(), "FX"), Err(Error::Malformed { .. })));
    }

    #[test]
    fn write_then_parse_round_trips() {
        let dir = fixture(&[
            ("A", "1, 2\n2, 1\n3, 3\n4, 5\n5, 4"),
            ("graph_indicator", "1\n1\n2\n3\n3"),
            ("graph_labels", "0\n1\n0"),
            ("node_attributes", "0.1\n0.2\n1e-7\n-3\n0.30000000000000004"),
        ]);
        let set = parse_tudataset(dir.path(), "FX").unwrap();
        let out = tempfile::tempdir().unwrap();
        write_tudataset(&set, out.path()).unwrap();
        assert_eq!(parse_tudataset(out.path(), "FX").unwrap(), set);
    }
}
