//! Node-classification dataset loading, random splits, and statistics.
//!
//! On-disk layout is a directory with `meta.json`, `edges.tsv` (one
//! `i<TAB>j` per line), `features.tsv` (`node_count` rows of `d_in` reals)
//! and `labels.tsv` (`node_count` integers). The loader canonicalizes the
//! edge set (undirected, deduplicated, self loops removed) and row-
//! normalizes features to unit L1 norm, leaving all-zero rows untouched.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TanError};
use crate::graph::{build_topology, GraphTopology};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub d_in: usize,
    pub node_count: usize,
    /// Train, validation, test fractions; must sum to 1.
    pub split_ratios: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub topology: GraphTopology,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_ratios: [f64; 3],
}

/// Per-node split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct SplitMask {
    pub assignment: Vec<Split>,
    pub seed: u64,
}

impl SplitMask {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.assignment.iter().filter(|&&s| s == which).count()
    }
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> TanError {
    TanError::Parse {
        line,
        msg: format!("{file}: {}", msg.into()),
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(&meta_path).map_err(|e| {
            TanError::InvalidInput(format!("{}: {e}", meta_path.display()))
        })?,
    ))?;
    let ratio_sum: f64 = meta.split_ratios.iter().sum();
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(TanError::InvalidInput(format!(
            "split ratios sum to {ratio_sum}, expected 1"
        )));
    }
    if meta.split_ratios.iter().any(|&r| r < 0.0) {
        return Err(TanError::InvalidInput("split ratios must be nonnegative".into()));
    }
    if meta.node_count == 0 || meta.num_classes == 0 || meta.d_in == 0 {
        return Err(TanError::InvalidInput(
            "node_count, num_classes and d_in must be positive".into(),
        ));
    }

    let edges = read_edges(&dir.join("edges.tsv"), meta.node_count)?;
    let topology = build_topology(meta.node_count, &edges)?;
    let features = read_features(&dir.join("features.tsv"), meta.node_count, meta.d_in)?;
    let labels = read_labels(&dir.join("labels.tsv"), meta.node_count, meta.num_classes)?;

    Ok(Dataset {
        name: meta.name,
        topology,
        features,
        labels,
        num_classes: meta.num_classes,
        split_ratios: meta.split_ratios,
    })
}

fn read_edges(path: &Path, node_count: usize) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TanError::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| parse_err("edges.tsv", idx + 1, "expected two node ids"))?
                .parse()
                .map_err(|_| parse_err("edges.tsv", idx + 1, format!("bad node id in `{line}`")))
        };
        let i = parse(parts.next())?;
        let j = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(parse_err("edges.tsv", idx + 1, "expected exactly two node ids"));
        }
        if i >= node_count || j >= node_count {
            return Err(parse_err(
                "edges.tsv",
                idx + 1,
                format!("node id out of range in `{line}` (node_count {node_count})"),
            ));
        }
        edges.push((i, j));
    }
    Ok(edges)
}

fn read_features(path: &Path, node_count: usize, d_in: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TanError::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::with_capacity(node_count);
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::with_capacity(d_in);
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err("features.tsv", idx + 1, format!("bad real `{tok}`")))?;
            if !v.is_finite() {
                return Err(parse_err("features.tsv", idx + 1, format!("non-finite value {v}")));
            }
            row.push(v);
        }
        if row.len() != d_in {
            return Err(parse_err(
                "features.tsv",
                idx + 1,
                format!("expected {d_in} values, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != node_count {
        return Err(TanError::InvalidInput(format!(
            "features.tsv has {} rows for {node_count} nodes",
            rows.len()
        )));
    }
    let mut features = Array2::zeros((node_count, d_in));
    for (i, row) in rows.iter().enumerate() {
        let l1: f64 = row.iter().map(|v| v.abs()).sum();
        for (c, &v) in row.iter().enumerate() {
            features[(i, c)] = if l1 > 0.0 { v / l1 } else { v };
        }
    }
    Ok(features)
}

fn read_labels(path: &Path, node_count: usize, num_classes: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TanError::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut labels = Vec::with_capacity(node_count);
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let label: usize = line
            .parse()
            .map_err(|_| parse_err("labels.tsv", idx + 1, format!("bad label `{line}`")))?;
        if label >= num_classes {
            return Err(parse_err(
                "labels.tsv",
                idx + 1,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        labels.push(label);
    }
    if labels.len() != node_count {
        return Err(TanError::InvalidInput(format!(
            "labels.tsv has {} labels for {node_count} nodes",
            labels.len()
        )));
    }
    Ok(labels)
}

/// Writes a dataset back to disk in the same directory layout.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        d_in: dataset.features.ncols(),
        node_count: dataset.topology.node_count(),
        split_ratios: dataset.split_ratios,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut edges = String::new();
    for &(i, j) in dataset.topology.edges() {
        edges.push_str(&format!("{i}\t{j}\n"));
    }
    std::fs::write(dir.join("edges.tsv"), edges)?;
    let mut feats = String::new();
    for row in dataset.features.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        feats.push_str(&line.join("\t"));
        feats.push('\n');
    }
    std::fs::write(dir.join("features.tsv"), feats)?;
    let mut labels = String::new();
    for &l in &dataset.labels {
        labels.push_str(&format!("{l}\n"));
    }
    std::fs::write(dir.join("labels.tsv"), labels)?;
    Ok(())
}

/// Uniformly random permutation sliced by the dataset's split ratios.
/// No stratification: class balance within splits is whatever the
/// permutation produces.
pub fn random_split(dataset: &Dataset, seed: u64) -> SplitMask {
    let n = dataset.topology.node_count();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (dataset.split_ratios[0] * n as f64).round() as usize;
    let n_val = (dataset.split_ratios[1] * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let mut assignment = vec![Split::Test; n];
    for &i in &order[..n_train] {
        assignment[i] = Split::Train;
    }
    for &i in &order[n_train..n_train + n_val] {
        assignment[i] = Split::Val;
    }
    SplitMask { assignment, seed }
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(dataset: &Dataset) -> Result<f64> {
    let edges = dataset.topology.edges();
    if edges.is_empty() {
        return Err(TanError::InvalidInput("edge homophily needs at least one edge".into()));
    }
    let same = edges
        .iter()
        .filter(|&&(i, j)| dataset.labels[i] == dataset.labels[j])
        .count();
    Ok(same as f64 / edges.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_toy(dir: &Path) {
        std::fs::write(
            dir.join("meta.json"),
            r#"{"name":"toy","num_classes":2,"d_in":2,"node_count":4,"split_ratios":[0.5,0.25,0.25]}"#,
        )
        .unwrap();
        // Reversed duplicate and a self loop exercise canonicalization.
        std::fs::write(dir.join("edges.tsv"), "0\t1\n1\t0\n2\t2\n1\t2\n2\t3\n").unwrap();
        std::fs::write(dir.join("features.tsv"), "1 3\n0 0\n2 2\n-1 1\n").unwrap();
        std::fs::write(dir.join("labels.tsv"), "0\n0\n1\n1\n").unwrap();
    }

    #[test]
    fn loads_canonicalized_and_l1_normalized() {
        let dir = tempdir().unwrap();
        write_toy(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.topology.edges(), &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(ds.features.row(0).to_vec(), vec![0.25, 0.75]);
        assert_eq!(ds.features.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(ds.features.row(3).to_vec(), vec![-0.5, 0.5]);
        assert_eq!(ds.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn label_out_of_range_reports_line() {
        let dir = tempdir().unwrap();
        write_toy(dir.path());
        std::fs::write(dir.path().join("labels.tsv"), "0\n0\n5\n1\n").unwrap();
        match load_dataset(dir.path()) {
            Err(TanError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_count_mismatch_rejected() {
        let dir = tempdir().unwrap();
        write_toy(dir.path());
        std::fs::write(dir.path().join("features.tsv"), "1 2\n3\n4 5\n6 7\n").unwrap();
        match load_dataset(dir.path()) {
            Err(TanError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_export() {
        let dir = tempdir().unwrap();
        write_toy(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        let out = tempdir().unwrap();
        export_dataset(&ds, out.path()).unwrap();
        let back = load_dataset(out.path()).unwrap();
        assert_eq!(ds.topology.edges(), back.topology.edges());
        assert_eq!(ds.features, back.features);
        assert_eq!(ds.labels, back.labels);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let dir = tempdir().unwrap();
        write_toy(dir.path());
        let mut ds = load_dataset(dir.path()).unwrap();
        ds.split_ratios = [0.5, 0.25, 0.25];
        let mask = random_split(&ds, 9);
        assert_eq!(mask.count(Split::Train), 2);
        assert_eq!(mask.count(Split::Val), 1);
        assert_eq!(mask.count(Split::Test), 1);
        let again = random_split(&ds, 9);
        assert_eq!(mask.assignment, again.assignment);
        assert_eq!(
            mask.count(Split::Train) + mask.count(Split::Val) + mask.count(Split::Test),
            4
        );
    }

    #[test]
    fn splits_are_not_stratified() {
        // On a 2-class dataset some seed must overshoot the global class
        // ratio in the train mask by at least 10 points.
        let dir = tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"name":"flat","num_classes":2,"d_in":1,"node_count":10,"split_ratios":[0.5,0.25,0.25]}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("edges.tsv"), "0\t1\n").unwrap();
        std::fs::write(dir.path().join("features.tsv"), "1\n".repeat(10)).unwrap();
        std::fs::write(dir.path().join("labels.tsv"), "0\n0\n0\n0\n0\n1\n1\n1\n1\n1\n").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let mut found = false;
        for seed in 0..1000 {
            let mask = random_split(&ds, seed);
            let train = mask.indices(Split::Train);
            let ones = train.iter().filter(|&&i| ds.labels[i] == 1).count();
            let frac = ones as f64 / train.len() as f64;
            if (frac - 0.5).abs() >= 0.1 {
                found = true;
                break;
            }
        }
        assert!(found, "1000 seeds never deviated from the class ratio");
    }

    #[test]
    fn homophily_counts_matching_endpoints() {
        let dir = tempdir().unwrap();
        write_toy(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        // Edges (0,1) same, (1,2) differ, (2,3) same.
        let h = edge_homophily(&ds).unwrap();
        assert!((h - 2.0 / 3.0).abs() < 1e-12);
    }
}
