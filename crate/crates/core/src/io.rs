//! Text dataset bundles. A bundle directory holds:
//!
//! - `meta.json`: node count, feature dimension, class count, name
//! - `edges.tsv`: one `src<TAB>dst` per undirected edge
//! - `features.csv`: one comma-separated row per node
//! - `labels.csv`: one class id per line
//! - `splits.json` (optional): train/val/test index sets
//! - `patterns.csv` (optional): 0 = homophilic, 1 = heterophilic, per node
//!
//! Floats are written in Rust's shortest round-trip decimal form, so a
//! save/load/save cycle is byte-identical and loaded values are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csbm::{CsbmSample, Pattern};
use crate::graph::{Graph, LabelVector};
use crate::matrix::Matrix;
use crate::train::Split;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub name: String,
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub meta: BundleMeta,
    pub graph: Graph,
    pub features: Matrix,
    pub labels: LabelVector,
    pub splits: Option<Split>,
    pub patterns: Option<Vec<Pattern>>,
}

/// What the loader cleaned up; duplicates collapse to one stored edge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub duplicate_edges: usize,
    pub self_loops: usize,
}

impl DatasetBundle {
    pub fn from_sample(sample: &CsbmSample, name: impl Into<String>) -> DatasetBundle {
        DatasetBundle {
            meta: BundleMeta {
                name: name.into(),
                num_nodes: sample.graph.num_nodes(),
                feature_dim: sample.features.cols(),
                num_classes: sample.labels.num_classes(),
            },
            graph: sample.graph.clone(),
            features: sample.features.clone(),
            labels: sample.labels.clone(),
            splits: None,
            patterns: Some(sample.patterns.clone()),
        }
    }
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&bundle.meta)?,
    )?;

    let mut edges = String::new();
    for (a, b) in bundle.graph.edge_list() {
        edges.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(dir.join("edges.tsv"), edges)?;

    let mut feats = String::new();
    for i in 0..bundle.features.rows() {
        let row: Vec<String> = bundle.features.row(i).iter().map(|v| format!("{v}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    fs::write(dir.join("features.csv"), feats)?;

    let mut labels = String::new();
    for &l in bundle.labels.labels() {
        labels.push_str(&format!("{l}\n"));
    }
    fs::write(dir.join("labels.csv"), labels)?;

    if let Some(splits) = &bundle.splits {
        fs::write(dir.join("splits.json"), serde_json::to_string_pretty(splits)?)?;
    }
    if let Some(patterns) = &bundle.patterns {
        let mut text = String::new();
        for p in patterns {
            text.push_str(match p {
                Pattern::Homophilic => "0\n",
                Pattern::Heterophilic => "1\n",
            });
        }
        fs::write(dir.join("patterns.csv"), text)?;
    }
    Ok(())
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    load_bundle_with_stats(dir).map(|(b, _)| b)
}

pub fn load_bundle_with_stats(dir: &Path) -> Result<(DatasetBundle, LoadStats)> {
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.num_nodes == 0 {
        return Err(Error::invalid("bundle has no nodes"));
    }

    // Edges with line-number diagnostics.
    let edges_path = dir.join("edges.tsv");
    let mut pairs = Vec::new();
    let mut stats = LoadStats::default();
    for (lineno, line) in fs::read_to_string(&edges_path)?.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let (a, b) = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(parse_error(
                    &edges_path,
                    lineno,
                    "expected exactly 'src<TAB>dst'",
                ))
            }
        };
        let a: usize = a
            .trim()
            .parse()
            .map_err(|_| parse_error(&edges_path, lineno, format!("bad source '{a}'")))?;
        let b: usize = b
            .trim()
            .parse()
            .map_err(|_| parse_error(&edges_path, lineno, format!("bad target '{b}'")))?;
        if a >= meta.num_nodes || b >= meta.num_nodes {
            return Err(parse_error(
                &edges_path,
                lineno,
                format!("endpoint out of range for {} nodes", meta.num_nodes),
            ));
        }
        if a == b {
            stats.self_loops += 1;
            continue;
        }
        pairs.push(if a < b { (a, b) } else { (b, a) });
    }
    let total = pairs.len();
    pairs.sort_unstable();
    pairs.dedup();
    stats.duplicate_edges = total - pairs.len();
    let graph = Graph::build(&pairs, meta.num_nodes)?;

    // Features.
    let feat_path = dir.join("features.csv");
    let mut features = Matrix::zeros(meta.num_nodes, meta.feature_dim);
    let text = fs::read_to_string(&feat_path)?;
    let mut row_count = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if row_count >= meta.num_nodes {
            return Err(parse_error(&feat_path, lineno, "more rows than nodes"));
        }
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != meta.feature_dim {
            return Err(parse_error(
                &feat_path,
                lineno,
                format!("expected {} values, got {}", meta.feature_dim, values.len()),
            ));
        }
        for (j, v) in values.iter().enumerate() {
            let parsed: f64 = v.trim().parse().map_err(|_| {
                parse_error(&feat_path, lineno, format!("non-numeric field '{v}'"))
            })?;
            features.set(row_count, j, parsed);
        }
        row_count += 1;
    }
    if row_count != meta.num_nodes {
        return Err(Error::invalid(format!(
            "features.csv has {row_count} rows for {} nodes",
            meta.num_nodes
        )));
    }

    // Labels.
    let label_path = dir.join("labels.csv");
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (lineno, line) in fs::read_to_string(&label_path)?.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let l: usize = line
            .trim()
            .parse()
            .map_err(|_| parse_error(&label_path, lineno, format!("bad label '{line}'")))?;
        if l >= meta.num_classes {
            return Err(parse_error(
                &label_path,
                lineno,
                format!("label {l} out of range for {} classes", meta.num_classes),
            ));
        }
        labels.push(l);
    }
    if labels.len() != meta.num_nodes {
        return Err(Error::invalid(format!(
            "labels.csv has {} rows for {} nodes",
            labels.len(),
            meta.num_nodes
        )));
    }
    let labels = LabelVector::new(labels, meta.num_classes)?;

    // Optional splits.
    let splits_path = dir.join("splits.json");
    let splits = if splits_path.exists() {
        let s: Split = serde_json::from_str(&fs::read_to_string(&splits_path)?)?;
        for &i in s.train.iter().chain(&s.val).chain(&s.test) {
            if i >= meta.num_nodes {
                return Err(Error::invalid(format!("split index {i} out of range")));
            }
        }
        Some(s)
    } else {
        None
    };

    // Optional pattern flags.
    let pat_path = dir.join("patterns.csv");
    let patterns = if pat_path.exists() {
        let mut out = Vec::with_capacity(meta.num_nodes);
        for (lineno, line) in fs::read_to_string(&pat_path)?.lines().enumerate() {
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            out.push(match line.trim() {
                "0" => Pattern::Homophilic,
                "1" => Pattern::Heterophilic,
                other => {
                    return Err(parse_error(
                        &pat_path,
                        lineno,
                        format!("bad pattern flag '{other}' (expected 0 or 1)"),
                    ))
                }
            });
        }
        if out.len() != meta.num_nodes {
            return Err(Error::invalid(format!(
                "patterns.csv has {} rows for {} nodes",
                out.len(),
                meta.num_nodes
            )));
        }
        Some(out)
    } else {
        None
    };

    Ok((
        DatasetBundle {
            meta,
            graph,
            features,
            labels,
            splits,
            patterns,
        },
        stats,
    ))
}
