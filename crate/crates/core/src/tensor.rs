//! Dense row-major tensors of `f64` (last dimension fastest).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interprets the tensor as a `(C, H, W)` feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a 3-d feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            shape: vec![n],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Error statistics of an approximation against a reference of equal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub max_abs: f64,
    /// `max |a - r| / max |r|`
    pub max_rel: f64,
    /// `sum |a - r| / sum |r|`
    pub mean_rel: f64,
}

impl ErrorStats {
    pub fn between(approx: &[f64], reference: &[f64]) -> Self {
        let mut acc = ErrorAccumulator::default();
        acc.add(approx, reference);
        acc.stats()
    }
}

/// Running sums behind [`ErrorStats`], mergeable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorAccumulator {
    max_abs: f64,
    sum_abs: f64,
    ref_max: f64,
    ref_sum: f64,
}

impl ErrorAccumulator {
    pub fn add(&mut self, approx: &[f64], reference: &[f64]) {
        assert_eq!(approx.len(), reference.len(), "length mismatch");
        for (&a, &r) in approx.iter().zip(reference) {
            let d = (a - r).abs();
            self.max_abs = self.max_abs.max(d);
            self.sum_abs += d;
            self.ref_max = self.ref_max.max(r.abs());
            self.ref_sum += r.abs();
        }
    }

    pub fn merge(&mut self, other: &ErrorAccumulator) {
        self.max_abs = self.max_abs.max(other.max_abs);
        self.sum_abs += other.sum_abs;
        self.ref_max = self.ref_max.max(other.ref_max);
        self.ref_sum += other.ref_sum;
    }

    pub fn stats(&self) -> ErrorStats {
        let ratio = |num: f64, den: f64| {
            if den > 0.0 {
                num / den
            } else if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        };
        ErrorStats {
            max_abs: self.max_abs,
            max_rel: ratio(self.max_abs, self.ref_max),
            mean_rel: ratio(self.sum_abs, self.ref_sum),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![0.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn error_stats_zero_reference() {
        let s = ErrorStats::between(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(s.max_rel, 0.0);
        let s = ErrorStats::between(&[1.0, 3.0], &[1.0, 2.0]);
        assert_eq!(s.max_abs, 1.0);
        assert_eq!(s.max_rel, 0.5);
        assert!((s.mean_rel - 1.0 / 3.0).abs() < 1e-15);
    }
}
