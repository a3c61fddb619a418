//! Sparse adjacency handling: CSR storage, symmetric renormalization and
//! multi-hop feature propagation.
//!
//! The propagation operator is the renormalized adjacency with self-loops,
//! `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`, shared by the layered and the
//! precomputed-propagation classifiers. Features and edges always cover the
//! full graph; only labels are ever partitioned.

use crate::dense::Dense;
use crate::error::{Error, Result};

/// Compressed sparse row matrix.
///
/// Column indices are strictly increasing within each row and (row, col)
/// pairs are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets. Duplicate coordinates are
    /// collapsed by summation.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= n_rows {
                return Err(Error::Index {
                    what: "sparse row",
                    index: r,
                    bound: n_rows,
                });
            }
            if c >= n_cols {
                return Err(Error::Index {
                    what: "sparse col",
                    index: c,
                    bound: n_cols,
                });
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_counts = vec![0usize; n_rows];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_counts[r] += 1;
                last = Some((r, c));
            }
        }
        let mut row_offsets = vec![0usize; n_rows + 1];
        for r in 0..n_rows {
            row_offsets[r + 1] = row_offsets[r] + row_counts[r];
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// Sparse × dense product, (r×c)·(c×n) → r×n.
    pub fn spmm(&self, x: &Dense) -> Result<Dense> {
        if self.n_cols != x.rows() {
            return Err(Error::Dim {
                op: "spmm",
                lhs: (self.n_rows, self.n_cols),
                rhs: x.shape(),
            });
        }
        let n = x.cols();
        let mut out = Dense::zeros(self.n_rows, n);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let out_row = &mut out.data_mut()[r * n..(r + 1) * n];
            for (&c, &v) in cols.iter().zip(vals) {
                let x_row = &x.data()[c * n..(c + 1) * n];
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o += v * xv;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        SparseMatrix::from_triplets(self.n_cols, self.n_rows, triplets)
            .expect("transpose of a valid matrix is valid")
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Exact value-for-value symmetry check.
    pub fn is_symmetric(&self) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        *self == self.transpose()
    }

    /// Restriction to the given rows. Returns the submatrix over the union of
    /// referenced columns (sorted ascending) together with that column set,
    /// so `sub · y[cols]` reproduces `self[rows] · y`.
    pub fn select_rows(&self, rows: &[usize]) -> Result<(SparseMatrix, Vec<usize>)> {
        let mut seen = vec![false; self.n_cols];
        for &r in rows {
            if r >= self.n_rows {
                return Err(Error::Index {
                    what: "sparse row select",
                    index: r,
                    bound: self.n_rows,
                });
            }
            let (cols, _) = self.row(r);
            for &c in cols {
                seen[c] = true;
            }
        }
        let cols: Vec<usize> = (0..self.n_cols).filter(|&c| seen[c]).collect();
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            remap[old] = new;
        }
        let mut triplets = Vec::new();
        for (new_r, &r) in rows.iter().enumerate() {
            let (rcols, rvals) = self.row(r);
            for (&c, &v) in rcols.iter().zip(rvals) {
                triplets.push((new_r, remap[c], v));
            }
        }
        let sub = SparseMatrix::from_triplets(rows.len(), cols.len(), triplets)?;
        Ok((sub, cols))
    }

    pub fn to_dense(&self) -> Dense {
        let mut d = Dense::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.iter() {
            d.set(r, c, v);
        }
        d
    }
}

/// One citation graph: features X, integer labels y, undirected edge list and
/// the label id → name map.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub n: usize,
    pub features: Dense,
    pub labels: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub label_names: Vec<String>,
}

impl GraphDataset {
    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Node ids of every class, ascending within each class.
    pub fn nodes_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes()];
        for (node, &label) in self.labels.iter().enumerate() {
            by_class[label].push(node);
        }
        by_class
    }
}

/// Symmetric binary adjacency from an undirected edge list. Duplicate edges
/// collapse to a single entry; self-loops in the input are dropped (the
/// normalization adds its own).
pub fn build_adjacency(edges: &[(usize, usize)], n: usize) -> Result<SparseMatrix> {
    let mut triplets = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        if u >= n {
            return Err(Error::Index {
                what: "edge endpoint",
                index: u,
                bound: n,
            });
        }
        if v >= n {
            return Err(Error::Index {
                what: "edge endpoint",
                index: v,
                bound: n,
            });
        }
        if u == v {
            continue;
        }
        triplets.push((u, v, 1.0));
        triplets.push((v, u, 1.0));
    }
    // duplicate edges would sum above 1; clamp back to binary
    let mut adj = SparseMatrix::from_triplets(n, n, triplets)?;
    for v in adj.values.iter_mut() {
        *v = 1.0;
    }
    Ok(adj)
}

/// Renormalization with self-loops: `Â = D̃^{-1/2} (A + I) D̃^{-1/2}` where
/// D̃ is the degree matrix of A + I.
pub fn normalize_adjacency(a: &SparseMatrix) -> Result<SparseMatrix> {
    if a.n_rows() != a.n_cols() {
        return Err(Error::Contract(format!(
            "normalize_adjacency: matrix must be square, got {}x{}",
            a.n_rows(),
            a.n_cols()
        )));
    }
    if !a.is_symmetric() {
        return Err(Error::Contract(
            "normalize_adjacency: matrix must be symmetric".into(),
        ));
    }
    if a.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract(
            "normalize_adjacency: matrix must be nonnegative".into(),
        ));
    }
    let n = a.n_rows();
    let mut triplets: Vec<(usize, usize, f64)> = a.iter().collect();
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    let with_loops = SparseMatrix::from_triplets(n, n, triplets)?;
    let degrees: Vec<f64> = (0..n).map(|r| with_loops.row(r).1.iter().sum()).collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let scaled = with_loops
        .iter()
        .map(|(r, c, v)| (r, c, inv_sqrt[r] * v * inv_sqrt[c]))
        .collect();
    SparseMatrix::from_triplets(n, n, scaled)
}

/// `Â^hops · X` by successive sparse-dense products.
pub fn propagate_features(adj: &SparseMatrix, x: &Dense, hops: usize) -> Result<Dense> {
    let mut out = x.clone();
    for _ in 0..hops {
        out = adj.spmm(&out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SparseMatrix {
        build_adjacency(&[(0, 1), (1, 2)], 3).unwrap()
    }

    #[test]
    fn single_edge_symmetrized() {
        let a = build_adjacency(&[(0, 1)], 2).unwrap();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.to_dense().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let a = build_adjacency(&[(0, 1), (1, 0), (0, 1)], 2).unwrap();
        let b = build_adjacency(&[(0, 1)], 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_loops_dropped() {
        let a = build_adjacency(&[(0, 0), (0, 1)], 2).unwrap();
        assert_eq!(a.to_dense().get(0, 0), 0.0);
    }

    #[test]
    fn endpoint_out_of_range() {
        assert!(build_adjacency(&[(0, 2)], 2).is_err());
    }

    #[test]
    fn normalize_isolated_node() {
        let a = SparseMatrix::from_triplets(1, 1, vec![]).unwrap();
        let norm = normalize_adjacency(&a).unwrap();
        assert_eq!(norm.to_dense().data(), &[1.0]);
    }

    #[test]
    fn normalize_single_edge() {
        // A+I is all-ones, every degree 2, so every entry becomes 0.5
        let a = build_adjacency(&[(0, 1)], 2).unwrap();
        let norm = normalize_adjacency(&a).unwrap();
        for &v in norm.to_dense().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_path_graph() {
        // hand computation for the path 0-1-2: degrees (2, 3, 2) after loops
        let norm = normalize_adjacency(&path3()).unwrap();
        let d = norm.to_dense();
        let s6 = 1.0 / 6.0f64.sqrt();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((d.get(0, 1) - s6).abs() < 1e-15);
        assert!((d.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.get(1, 2) - s6).abs() < 1e-15);
        assert!((d.get(2, 2) - 0.5).abs() < 1e-15);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(1, 0), d.get(0, 1));
        assert_eq!(d.get(2, 1), d.get(1, 2));
    }

    #[test]
    fn normalize_output_exactly_symmetric() {
        let a = build_adjacency(&[(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)], 4).unwrap();
        let norm = normalize_adjacency(&a).unwrap();
        assert!(norm.is_symmetric());
    }

    #[test]
    fn propagate_zero_hops_is_identity() {
        let a = normalize_adjacency(&path3()).unwrap();
        let x = Dense::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(propagate_features(&a, &x, 0).unwrap(), x);
    }

    #[test]
    fn propagate_one_hop_hand_computed() {
        let adj = SparseMatrix::from_triplets(
            2,
            2,
            vec![(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)],
        )
        .unwrap();
        let x = Dense::from_vec(2, 1, vec![1.0, 3.0]);
        let out = propagate_features(&adj, &x, 1).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    #[test]
    fn select_rows_reproduces_full_product() {
        let adj = normalize_adjacency(&build_adjacency(&[(0, 1), (1, 2), (2, 3), (3, 4)], 5).unwrap()).unwrap();
        let x = Dense::from_vec(5, 2, (0..10).map(|v| v as f64).collect());
        let full = adj.spmm(&x).unwrap();
        let rows = [1usize, 3];
        let (sub, cols) = adj.select_rows(&rows).unwrap();
        let xr = x.gather_rows(&cols).unwrap();
        let part = sub.spmm(&xr).unwrap();
        assert_eq!(part.row(0), full.row(1));
        assert_eq!(part.row(1), full.row(3));
    }

    #[test]
    fn csr_invariants_hold() {
        let adj = build_adjacency(&[(0, 1), (1, 2), (0, 2), (2, 3)], 4).unwrap();
        let offs = adj.row_offsets();
        assert_eq!(offs.len(), 5);
        assert_eq!(*offs.last().unwrap(), adj.nnz());
        for r in 0..4 {
            assert!(offs[r] <= offs[r + 1]);
            let (cols, _) = adj.row(r);
            for w in cols.windows(2) {
                assert!(w[0] < w[1], "columns must be strictly increasing");
            }
        }
    }
}
