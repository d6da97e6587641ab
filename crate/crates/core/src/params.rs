//! Dense parameter-vector arithmetic.
//!
//! Every model, share and masked sum in the simulator is a [`WeightVector`].
//! Sums always run in ascending input order so that two runs over the same
//! inputs produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat vector of finite model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wraps `values`, rejecting empty vectors and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("weight vector must have positive dimension"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Arithmetic(format!(
                "element {i} is {} (must be finite)",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Largest absolute element.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub(crate) fn ensure_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::Shape {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }

    /// Builds a vector from values computed internally, checking finiteness.
    pub(crate) fn from_computed(values: Vec<f64>, what: &str) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Arithmetic(format!("{what} produced a non-finite value")));
        }
        Ok(Self(values))
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `a * w`, elementwise.
pub fn scale(w: &WeightVector, a: f64) -> Result<WeightVector> {
    if !a.is_finite() {
        return Err(Error::Arithmetic(format!("scale factor {a} is not finite")));
    }
    WeightVector::from_computed(w.0.iter().map(|v| a * v).collect(), "scale")
}

/// Elementwise sum, accumulated in ascending list order.
pub fn vec_sum(vs: &[WeightVector]) -> Result<WeightVector> {
    let (first, rest) = vs
        .split_first()
        .ok_or_else(|| Error::usage("cannot sum an empty list of vectors"))?;
    let mut acc = first.0.clone();
    for v in rest {
        v.ensure_dim(acc.len())?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
    }
    WeightVector::from_computed(acc, "vec_sum")
}

/// `vec_sum(vs)` scaled by `1 / vs.len()`.
pub fn vec_mean(vs: &[WeightVector]) -> Result<WeightVector> {
    let total = vec_sum(vs)?;
    scale(&total, 1.0 / vs.len() as f64)
}

/// Chebyshev distance `max_i |a[i] - b[i]|`.
pub fn linf_dist(a: &WeightVector, b: &WeightVector) -> Result<f64> {
    b.ensure_dim(a.dim())?;
    Ok(a
        .0
        .iter()
        .zip(&b.0)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())))
}
