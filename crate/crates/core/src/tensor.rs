use serde::{Deserialize, Serialize};

use crate::nnkit::Real;
use crate::{Error, Result};

/// Dense row-major `f32` matrix. Linear-layer weights are stored
/// `out_features x in_features`, so columns are input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Multiplies column `c` by `scale[c]` for every column.
    pub fn scale_columns(&mut self, scale: &[f32]) -> Result<()> {
        if scale.len() != self.cols {
            return Err(Error::Shape(format!(
                "{} column scales for a matrix with {} columns",
                scale.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_mut(self.cols) {
            for (w, s) in row.iter_mut().zip(scale) {
                *w *= s;
            }
        }
        Ok(())
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.cols];
        for row in self.data.chunks(self.cols) {
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += f64::from(w) * f64::from(w);
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&w| f64::from(w) * f64::from(w))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x (n x in) * W^T` for a weight `W (out x in)`, returning `n x out`.
pub(crate) fn linear(x: &[f32], n: usize, w: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; n * w.rows];
    f32::gemm(
        n,
        w.cols,
        w.rows,
        1.0,
        x,
        w.cols as isize,
        1,
        &w.data,
        1,
        w.cols as isize,
        0.0,
        &mut out,
        w.rows as isize,
        1,
    );
    out
}

/// Relative Frobenius distance `||a - b|| / ||a||` (0 when `a` is all zero
/// and `b == a`).
pub fn relative_frobenius_error(a: &Matrix, b: &Matrix) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = f64::from(x) - f64::from(y);
        num += d * d;
        den += f64::from(x) * f64::from(x);
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}
