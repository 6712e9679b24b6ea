//! Flat parameter vectors with a named segment layout.
//!
//! Model weights, gradients, and every perturbation live in the same
//! D-dimensional space; a shared `Layout` makes two vectors element-wise
//! combinable and maps segments back to tensors for the forward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition of [0, D) into named segments, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn build(parts: Vec<(String, Vec<usize>)>) -> Arc<Layout> {
        let mut segments = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (name, shape) in parts {
            let len: usize = shape.iter().product();
            segments.push(Segment {
                name,
                shape,
                offset,
            });
            offset += len;
        }
        Arc::new(Layout {
            segments,
            total: offset,
        })
    }

    /// Single anonymous segment covering the whole vector.
    pub fn flat(dim: usize) -> Arc<Layout> {
        Layout::build(vec![("w".into(), vec![dim])])
    }

    pub fn dim(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn same(&self, other: &Layout) -> bool {
        std::ptr::eq(self, other) || self == other
    }
}

/// One contiguous f64 vector over a shared layout. Immutable by convention:
/// arithmetic returns new vectors, so the original weights survive any
/// perturbation untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.dim();
        ParamVector {
            layout,
            data: vec![0.0; n],
        }
    }

    pub fn from_data(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "layout dimension {} != data length {}",
                layout.dim(),
                data.len()
            )));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_layout(&self, other: &ParamVector, op: &str) -> Result<()> {
        if !self.layout.same(&other.layout) {
            return Err(Error::LayoutMismatch(format!(
                "{op} on vectors with different layouts"
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other, "add")?;
        Ok(ParamVector {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other, "sub")?;
        Ok(ParamVector {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    /// self + c * other
    pub fn add_scaled(&self, c: f64, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other, "add_scaled")?;
        Ok(ParamVector {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy a segment out as a tensor with the segment's shape.
    pub fn segment_tensor(&self, idx: usize) -> Tensor {
        let seg = &self.layout.segments()[idx];
        Tensor::new(
            seg.shape.clone(),
            self.data[seg.offset..seg.offset + seg.len()].to_vec(),
        )
        .expect("segment shape is consistent by construction")
    }

    pub fn set_segment(&mut self, idx: usize, values: &[f64]) {
        let seg = &self.layout.segments()[idx];
        assert_eq!(seg.len(), values.len(), "segment length mismatch");
        self.data[seg.offset..seg.offset + seg.len()].copy_from_slice(values);
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let na = a.norm_l2();
    let nb = b.norm_l2();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Vector of i.i.d. N(0, sigma^2) coordinates over the given layout.
pub fn gaussian_vector(rng: &mut Rng, layout: &Arc<Layout>, sigma: f64) -> Result<ParamVector> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gaussian_vector requires sigma > 0, got {sigma}"
        )));
    }
    let data = (0..layout.dim()).map(|_| rng.normal(sigma)).collect();
    Ok(ParamVector {
        layout: layout.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout2() -> Arc<Layout> {
        Layout::build(vec![("a".into(), vec![2]), ("b".into(), vec![1, 2])])
    }

    #[test]
    fn layout_offsets_partition_without_gaps() {
        let l = layout2();
        assert_eq!(l.dim(), 4);
        assert_eq!(l.segments()[0].offset, 0);
        assert_eq!(l.segments()[1].offset, 2);
    }

    #[test]
    fn add_sub_roundtrip() {
        let l = layout2();
        let a = ParamVector::from_data(l.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = ParamVector::from_data(l, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let c = a.add(&b).unwrap().sub(&b).unwrap();
        // Fine for these exactly-representable values; the apply/revert
        // contract in `perturb` does not rely on this in general.
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let a = ParamVector::zeros(layout2());
        let b = ParamVector::zeros(Layout::flat(4));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn gaussian_same_seed_identical() {
        let l = Layout::flat(64);
        let mut r1 = Rng::new(3);
        let mut r2 = Rng::new(3);
        let a = gaussian_vector(&mut r1, &l, 1.0).unwrap();
        let b = gaussian_vector(&mut r2, &l, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gaussian_moments_at_scale() {
        let l = Layout::flat(100_000);
        let mut r = Rng::new(3);
        let v = gaussian_vector(&mut r, &l, 1.0).unwrap();
        let n = v.dim() as f64;
        let mean = v.data().iter().sum::<f64>() / n;
        let std = (v.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!(mean > -0.02 && mean < 0.02, "mean {mean}");
        assert!(std > 0.99 && std < 1.01, "std {std}");
    }

    #[test]
    fn gaussian_sigma_scaling_exact() {
        let l = Layout::flat(1000);
        let a = gaussian_vector(&mut Rng::new(9), &l, 0.5).unwrap();
        let b = gaussian_vector(&mut Rng::new(9), &l, 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, 0.5 * *y);
        }
    }

    #[test]
    fn gaussian_rejects_nonpositive_sigma() {
        let l = Layout::flat(4);
        assert!(gaussian_vector(&mut Rng::new(0), &l, 0.0).is_err());
        assert!(gaussian_vector(&mut Rng::new(0), &l, -1.0).is_err());
    }

    #[test]
    fn segment_tensor_round_trip() {
        let l = layout2();
        let mut v = ParamVector::zeros(l);
        v.set_segment(1, &[7.0, 8.0]);
        let t = v.segment_tensor(1);
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.data(), &[7.0, 8.0]);
        assert_eq!(v.data(), &[0.0, 0.0, 7.0, 8.0]);
    }
}
