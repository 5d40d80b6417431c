//! Dense row-major f64 matrices sized for desk-scale training.
//!
//! Weight matrices are stored `(out, in)` so that both the forward affine
//! map and the gradient accumulations walk contiguous rows.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (B, in) @ w^T (in, out) + bias -> (B, out)` with `w` stored `(out, in)`.
    pub fn affine(&self, w: &Matrix, bias: &[f64]) -> Matrix {
        debug_assert_eq!(self.cols, w.cols, "affine input width");
        debug_assert_eq!(w.rows, bias.len(), "affine bias length");
        let mut out = Matrix::zeros(self.rows, w.rows);
        for b in 0..self.rows {
            let x = self.row(b);
            let y = out.row_mut(b);
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = w.row(o);
                let mut acc = bias[o];
                for i in 0..x.len() {
                    acc += x[i] * wr[i];
                }
                *yo = acc;
            }
        }
        out
    }

    /// `self (B, out) @ w (out, in) -> (B, in)`; pushes an output-side gradient
    /// back through a weight matrix stored `(out, in)`.
    pub fn matmul(&self, w: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, w.rows, "matmul inner dim");
        let mut out = Matrix::zeros(self.rows, w.cols);
        for b in 0..self.rows {
            let g = self.row(b);
            let y = out.row_mut(b);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let wr = w.row(o);
                for i in 0..y.len() {
                    y[i] += go * wr[i];
                }
            }
        }
        out
    }

    /// `self^T (out, B) @ x (B, in) -> (out, in)`; accumulates a weight
    /// gradient from paired output-side gradients and inputs.
    pub fn t_matmul(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, x.rows, "t_matmul batch dim");
        let mut out = Matrix::zeros(self.cols, x.cols);
        for b in 0..self.rows {
            let g = self.row(b);
            let xr = x.row(b);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let or = out.row_mut(o);
                for i in 0..or.len() {
                    or[i] += go * xr[i];
                }
            }
        }
        out
    }

    /// Column sums, i.e. the bias gradient for an output-side gradient.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for b in 0..self.rows {
            let r = self.row(b);
            for (o, acc) in out.iter_mut().enumerate() {
                *acc += r[o];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Element-wise ReLU.
    pub fn relu(&self) -> Matrix {
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}
