//! Dense row-major matrices over f64.
//!
//! The differentiation tape, the models and the graph routines all move data
//! through this one type. A scalar is a 1×1 matrix.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Dense { rows, cols, data }
    }

    /// 1×1 matrix holding a single value.
    pub fn scalar(v: f64) -> Self {
        Dense::from_vec(1, 1, vec![v])
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Dense { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1×1 matrix.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "not a scalar: {:?}", self.shape());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        Dense {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Dense, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Dense> {
        if self.shape() != other.shape() {
            return Err(Error::Dim {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Dense {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// self · other, (m×k)·(k×n) → m×n.
    pub fn matmul(&self, other: &Dense) -> Result<Dense> {
        if self.cols != other.rows {
            return Err(Error::Dim {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both `other` and `out`.
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Dense {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// selfᵀ · other, (m×k)ᵀ·(m×n) → k×n, without materializing the
    /// transpose.
    pub fn matmul_ta(&self, other: &Dense) -> Result<Dense> {
        if self.rows != other.rows {
            return Err(Error::Dim {
                op: "matmul_ta",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * n];
        for row in 0..m {
            let a_row = &self.data[row * k..(row + 1) * k];
            let b_row = &other.data[row * n..(row + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Dense {
            rows: k,
            cols: n,
            data: out,
        })
    }

    /// self · otherᵀ, (m×k)·(n×k)ᵀ → m×n, without materializing the
    /// transpose.
    pub fn matmul_tb(&self, other: &Dense) -> Result<Dense> {
        if self.cols != other.cols {
            return Err(Error::Dim {
                op: "matmul_tb",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok(Dense {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Dense {
        let mut out = Dense::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Dense {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copy of the given rows, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Dense> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::Index {
                    what: "row gather",
                    index: r,
                    bound: self.rows,
                });
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Dense {
            rows: rows.len(),
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Dense) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
