//! Flat parameter vectors tied to a model layout.

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// A finite parameter vector whose length matches its model layout.
///
/// All reductions iterate coordinates and operands in a fixed order so that
/// the same inputs always produce the same bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        let expected = spec.param_count();
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        Self { spec, values: vec![0.0; spec.param_count()] }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.ensure_same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        ParamVector::new(self.spec, values)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<ParamVector> {
        ParamVector::new(self.spec, self.values.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_same_layout(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance_sq(&self, other: &ParamVector) -> Result<f64> {
        self.ensure_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum())
    }

    /// `Σ weights[i] · vectors[i]`, accumulated left to right per coordinate.
    pub fn weighted_sum(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
        let first = vectors.first().ok_or(Error::InvalidArgument("no vectors to sum".into()))?;
        if vectors.len() != weights.len() {
            return Err(Error::DimensionMismatch { expected: vectors.len(), found: weights.len() });
        }
        let mut out = vec![0.0; first.len()];
        for (v, &w) in vectors.iter().zip(weights) {
            first.ensure_same_layout(v)?;
            for (o, x) in out.iter_mut().zip(&v.values) {
                *o += w * x;
            }
        }
        ParamVector::new(first.spec, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::linear(1, 1)
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        assert!(matches!(ParamVector::new(spec(), vec![1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        assert!(matches!(ParamVector::new(spec(), vec![1.0]), Err(Error::DimensionMismatch { expected: 2, found: 1 })));
    }

    #[test]
    fn arithmetic_preserves_layout() {
        let a = ParamVector::new(spec(), vec![1.0, 2.0]).unwrap();
        let b = ParamVector::new(spec(), vec![3.0, -1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().values(), &[4.0, 1.0]);
        assert_eq!(a.sub(&b).unwrap().values(), &[-2.0, 3.0]);
        assert_eq!(a.scale(2.0).unwrap().values(), &[2.0, 4.0]);
        assert_eq!(a.dot(&b).unwrap(), 1.0);
        assert_eq!(a.distance_sq(&b).unwrap(), 13.0);
        let other = ParamVector::zeros(ModelSpec::linear(2, 1));
        assert!(matches!(a.add(&other), Err(Error::LayoutMismatch)));
    }
}
