//! Dense row-major f64 tensors and the shared numeric kernels.
//!
//! Both the grad-free forward path and the tape-recorded forward path call
//! the same kernels, so the two paths produce bit-identical values.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new".into(),
                expected: format!("{expected} elements for shape {shape:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Build a 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::from_rows".into(),
                    expected: format!("{m} columns"),
                    actual: format!("{} columns in row {i}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading extent; the batch axis for 2-D tensors.
    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&0)
    }

    /// Trailing extent of a 2-D tensor.
    pub fn cols(&self) -> usize {
        *self.shape.get(1).unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshape".into(),
                expected: format!("{} elements", self.data.len()),
                actual: format!("shape {shape:?} ({expected} elements)"),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gather rows of a 2-D tensor by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let m = self.cols();
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), m],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── numeric kernels ──────────────────────────────────────────────────

/// (n,k) @ (k,m) -> (n,m)
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Add a row vector to every row of a 2-D tensor.
pub(crate) fn add_row(mat: &Tensor, row: &Tensor) -> Tensor {
    let (n, m) = (mat.rows(), mat.cols());
    debug_assert_eq!(m, row.len());
    let mut out = mat.data.clone();
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] += row.data[j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

pub(crate) fn tanh_map(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.tanh()).collect(),
    }
}

pub(crate) fn sigmoid_map(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

pub(crate) fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    }
}

/// Per-row softmax cross-entropy against integer targets; numerically
/// stable via the log-sum-exp shift. Returns one loss per row.
pub(crate) fn softmax_xent_rows(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    let (n, m) = (logits.rows(), logits.cols());
    debug_assert_eq!(n, targets.len());
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        losses.push(lse - row[targets[i].min(m - 1)]);
    }
    losses
}

/// Per-row softmax probabilities (stable); used by the xent backward.
pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, m) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..m {
            let e = (row[j] - max).exp();
            out[i * m + j] = e;
            sum += e;
        }
        for j in 0..m {
            out[i * m + j] /= sum;
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Per-row mean squared error against a target tensor of the same shape.
pub(crate) fn mse_rows(pred: &Tensor, target: &Tensor) -> Vec<f64> {
    let (n, m) = (pred.rows(), pred.cols());
    debug_assert_eq!(pred.shape(), target.shape());
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let p = pred.row(i);
        let t = target.row(i);
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        losses.push(s / m as f64);
    }
    losses
}

/// Row-wise quadratic loss c + s + a/2 s^2 from projections s.
pub(crate) fn quad_loss_rows(proj: &Tensor, curvature: &[f64], offset: &[f64]) -> Vec<f64> {
    proj.data
        .iter()
        .enumerate()
        .map(|(i, &s)| offset[i] + s + 0.5 * curvature[i] * s * s)
        .collect()
}

pub(crate) fn dot_weights(x: &Tensor, weights: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), weights.len());
    x.data.iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn softmax_xent_uniform_logits_is_ln_k() {
        let logits = Tensor::zeros(vec![3, 2]);
        let l = softmax_xent_rows(&logits, &[0, 1, 0]);
        for v in l {
            assert!((v - 2f64.ln()).abs() < 1e-15, "loss {v} != ln 2");
        }
    }

    #[test]
    fn mse_zero_when_equal() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l = mse_rows(&p, &p.clone());
        assert_eq!(l, vec![0.0, 0.0]);
    }

    #[test]
    fn gather_rows_picks_rows() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
