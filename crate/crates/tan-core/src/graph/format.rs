//! Plain-text matrix and vector exchange formats used by the CLI.
//!
//! Matrix file: line 1 `n m`, then `m` lines `i j value` (off-diagonals,
//! `i < j`), then `n` lines `i value` (diagonal). Whitespace-separated,
//! `#` starts a comment.
//!
//! Vector file: `n` lines of `d` whitespace-separated reals.

use std::fmt::Write as _;
use std::path::Path;

use super::{build_topology, SparseSymmetricMatrix};
use crate::error::{Result, TanError};

fn parse_err(line: usize, msg: impl Into<String>) -> TanError {
    TanError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Content lines with their original 1-based line numbers, comments stripped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(idx, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            None
        } else {
            Some((idx + 1, line))
        }
    })
}

pub fn read_matrix(path: &Path) -> Result<SparseSymmetricMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = content_lines(&text);

    let (lineno, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty matrix file"))?;
    let mut parts = header.split_whitespace();
    let n: usize = parse_field(&mut parts, lineno, "node count")?;
    let m: usize = parse_field(&mut parts, lineno, "edge count")?;

    let mut edges = Vec::with_capacity(m);
    let mut off = Vec::with_capacity(m);
    for _ in 0..m {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("expected {m} off-diagonal lines")))?;
        let mut parts = line.split_whitespace();
        let i: usize = parse_field(&mut parts, lineno, "row index")?;
        let j: usize = parse_field(&mut parts, lineno, "col index")?;
        let v: f64 = parse_field(&mut parts, lineno, "value")?;
        if i >= j {
            return Err(parse_err(lineno, format!("off-diagonal requires i < j, got {i} {j}")));
        }
        edges.push((i, j));
        off.push(v);
    }

    let mut diag = vec![f64::NAN; n];
    for _ in 0..n {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, format!("expected {n} diagonal lines")))?;
        let mut parts = line.split_whitespace();
        let i: usize = parse_field(&mut parts, lineno, "node index")?;
        let v: f64 = parse_field(&mut parts, lineno, "value")?;
        if i >= n {
            return Err(parse_err(lineno, format!("diagonal index {i} out of range")));
        }
        diag[i] = v;
    }
    if let Some(i) = diag.iter().position(|v| v.is_nan()) {
        return Err(parse_err(0, format!("diagonal entry {i} missing")));
    }

    let topology = build_topology(n, &edges)?;
    if topology.edge_count() != m {
        return Err(parse_err(0, "duplicate or self-loop edges in matrix file"));
    }
    // build_topology sorts edges; permute values to match.
    let mut sorted_off = vec![0.0; m];
    for (pair, v) in edges.iter().zip(&off) {
        let e = topology
            .edges()
            .binary_search(pair)
            .expect("edge present by construction");
        sorted_off[e] = *v;
    }
    SparseSymmetricMatrix::new(topology, diag, sorted_off)
}

pub fn write_matrix(path: &Path, j: &SparseSymmetricMatrix) -> Result<()> {
    let mut out = String::new();
    let n = j.node_count();
    let m = j.topology.edge_count();
    writeln!(out, "{n} {m}").unwrap();
    for (e, &(a, b)) in j.topology.edges().iter().enumerate() {
        writeln!(out, "{a} {b} {:.17e}", j.off_diagonal[e]).unwrap();
    }
    for (i, &d) in j.diagonal.iter().enumerate() {
        writeln!(out, "{i} {d:.17e}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an `n x d` whitespace-separated real matrix (e.g. the `h` file).
pub fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut width = None;
    for (lineno, line) in content_lines(&text) {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("bad real value `{tok}`")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {w} columns, found {}", row.len()),
                ));
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(1, "empty vector file"));
    }
    Ok(rows)
}

pub fn write_vectors(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_field<'a, T: std::str::FromStr>(
    parts: &mut impl Iterator<Item = &'a str>,
    lineno: usize,
    what: &str,
) -> Result<T> {
    let tok = parts
        .next()
        .ok_or_else(|| parse_err(lineno, format!("missing {what}")))?;
    tok.parse::<T>()
        .map_err(|_| parse_err(lineno, format!("bad {what} `{tok}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn matrix_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("j.txt");
        let t = build_topology(3, &[(0, 1), (1, 2)]).unwrap();
        let j = SparseSymmetricMatrix::new(t, vec![2.0, 3.0, 4.0], vec![0.5, -0.25]).unwrap();
        write_matrix(&path, &j).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(j, back);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("j.txt");
        std::fs::write(&path, "# header\n2 1\n\n0 1 0.5 # coupling\n0 2.0\n1 2.0\n").unwrap();
        let j = read_matrix(&path).unwrap();
        assert_eq!(j.off_diagonal, vec![0.5]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("j.txt");
        std::fs::write(&path, "2 1\n0 1 oops\n0 2.0\n1 2.0\n").unwrap();
        let err = read_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn vectors_require_consistent_width() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.txt");
        std::fs::write(&path, "1.0 2.0\n3.0\n").unwrap();
        assert!(read_vectors(&path).is_err());
    }
}
