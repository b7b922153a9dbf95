//! Flat parameter-space vectors: the unit of aggregation and attack.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        GradientVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        GradientVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn check(&self, other: &GradientVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        self.check(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &GradientVector) -> Result<f64> {
        self.check(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn scaled(&self, c: f64) -> GradientVector {
        GradientVector(self.0.iter().map(|v| v * c).collect())
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: f64, other: &GradientVector, b: f64) -> Result<GradientVector> {
        self.check(other)?;
        Ok(GradientVector(self.0.iter().zip(&other.0).map(|(x, y)| a * x + b * y).collect()))
    }

    pub fn sub(&self, other: &GradientVector) -> Result<GradientVector> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Cosine similarity; zero (and `false`) when either vector has zero norm.
    pub fn cosine(&self, other: &GradientVector) -> Result<(f64, bool)> {
        let d = self.dot(other)?;
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return Ok((0.0, false));
        }
        Ok((d / (na * nb), true))
    }

    /// Mean of `vectors`, accumulated in index order.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a GradientVector>) -> Result<GradientVector> {
        let mut iter = vectors.into_iter();
        let first = iter.next().ok_or_else(|| Error::config("mean of an empty set of vectors"))?;
        let mut acc = first.0.clone();
        let mut count = 1usize;
        for v in iter {
            first.check(v)?;
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += x;
            }
            count += 1;
        }
        let count = count as f64;
        acc.iter_mut().for_each(|a| *a /= count);
        Ok(GradientVector(acc))
    }
}

/// Concatenates per-parameter gradients in canonical (declaration) order.
pub fn flatten(grads: &[Tensor]) -> GradientVector {
    GradientVector(grads.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Splits a flat vector back into tensors of the given shapes.
pub fn unflatten(flat: &GradientVector, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != flat.dim() {
        return Err(Error::DimMismatch {
            expected: total,
            actual: flat.dim(),
        });
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat.0[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}
