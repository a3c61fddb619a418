//! Loader for raw citation datasets in `.content`/`.cites` text form.
//!
//! `<name>.content` rows: `node_key f_1 ... f_d label_name`, whitespace
//! delimited with a consistent feature arity. `<name>.cites` rows: two node
//! keys per line. Node ids follow content-file order; citation edges are
//! mapped to ids and treated as undirected. Edges naming unknown keys are
//! dropped with a counted warning, which the public Citeseer files require.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use crate::dense::Dense;
use crate::error::{Error, Result};
use crate::graph::GraphDataset;

/// One parsed content row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContentRow {
    pub node_key: String,
    pub feature_bits: Vec<f64>,
    pub label_name: String,
}

/// Parse the content file: one node per line.
pub fn parse_content(path: &Path) -> Result<Vec<RawContentRow>> {
    let reader = BufReader::new(File::open(path)?);
    parse_content_lines(reader.lines(), path)
}

/// Parse content text directly; `origin` names the source in errors.
pub fn parse_content_str(text: &str, origin: &Path) -> Result<Vec<RawContentRow>> {
    parse_content_lines(text.lines().map(|l| Ok(l.to_string())), origin)
}

fn parse_content_lines(
    lines: impl Iterator<Item = std::io::Result<String>>,
    path: &Path,
) -> Result<Vec<RawContentRow>> {
    let mut rows: Vec<RawContentRow> = Vec::new();
    let mut arity = None;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < 3 {
            return Err(parse_err(
                line_no,
                format!("expected node_key, features and label, got {} tokens", tokens.len()),
            ));
        }
        let d = tokens.len() - 2;
        match arity {
            None => arity = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(
                    line_no,
                    format!("inconsistent feature arity: {d} here, {expected} before"),
                ));
            }
            _ => {}
        }
        let mut feature_bits = Vec::with_capacity(d);
        for tok in &tokens[1..=d] {
            let v: f64 = tok.parse().map_err(|_| {
                parse_err(line_no, format!("feature token {tok:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite feature {tok:?}")));
            }
            feature_bits.push(v);
        }
        rows.push(RawContentRow {
            node_key: tokens[0].to_string(),
            feature_bits,
            label_name: tokens[d + 1].to_string(),
        });
    }
    if rows.is_empty() {
        return Err(parse_err(0, "content file has no rows".into()));
    }
    Ok(rows)
}

/// Parse the cites file into key pairs. Lines with fewer than two tokens are
/// malformed; extra tokens are rejected too.
pub fn parse_cites(path: &Path) -> Result<Vec<(String, String)>> {
    let reader = BufReader::new(File::open(path)?);
    parse_cites_lines(reader.lines(), path)
}

/// Parse cites text directly; `origin` names the source in errors.
pub fn parse_cites_str(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    parse_cites_lines(text.lines().map(|l| Ok(l.to_string())), origin)
}

fn parse_cites_lines(
    lines: impl Iterator<Item = std::io::Result<String>>,
    path: &Path,
) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 2 {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: idx + 1,
                msg: format!("expected two node keys, got {} tokens", tokens.len()),
            });
        }
        pairs.push((tokens[0].to_string(), tokens[1].to_string()));
    }
    Ok(pairs)
}

/// Load a citation graph from its content and cites files.
pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<GraphDataset> {
    let rows = parse_content(content_path)?;
    let pairs = parse_cites(cites_path)?;

    let n = rows.len();
    let d = rows[0].feature_bits.len();
    let mut key_to_id = HashMap::with_capacity(n);
    for (id, row) in rows.iter().enumerate() {
        if key_to_id.insert(row.node_key.clone(), id).is_some() {
            return Err(Error::Contract(format!(
                "duplicate node key {:?} in {}",
                row.node_key,
                content_path.display()
            )));
        }
    }

    let mut features = Dense::zeros(n, d);
    for (id, row) in rows.iter().enumerate() {
        for (f, &v) in row.feature_bits.iter().enumerate() {
            features.set(id, f, v);
        }
    }

    let label_names_per_node: Vec<&str> = rows.iter().map(|r| r.label_name.as_str()).collect();
    let (labels, label_names) = encode_labels(&label_names_per_node);

    let mut edges = Vec::with_capacity(pairs.len());
    let mut dropped = 0usize;
    for (a, b) in &pairs {
        match (key_to_id.get(a), key_to_id.get(b)) {
            (Some(&u), Some(&v)) => edges.push((u, v)),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} citation(s) referencing unknown node keys",
            cites_path.display()
        );
    }

    Ok(GraphDataset {
        n,
        features,
        labels,
        edges,
        label_names,
    })
}

/// Divide each nonzero row by its sum; zero rows stay zero.
pub fn row_normalize_features(x: &Dense) -> Dense {
    let mut out = x.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        let total: f64 = out.row(r).iter().sum();
        if total != 0.0 {
            let inv = 1.0 / total;
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v *= inv;
            }
        }
    }
    out
}

/// Deterministic label encoding: ids by ascending lexicographic label name.
/// Returns per-node ids and the id → name map.
pub fn encode_labels(names_per_node: &[&str]) -> (Vec<usize>, Vec<String>) {
    assert!(!names_per_node.is_empty(), "encode_labels: empty input");
    let mut unique: Vec<&str> = names_per_node.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let index: HashMap<&str, usize> = unique.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let ids = names_per_node.iter().map(|n| index[n]).collect();
    (ids, unique.into_iter().map(String::from).collect())
}
