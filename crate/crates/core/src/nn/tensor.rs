//! Dense NCHW tensor of `f64`.

use super::NnError;
use crate::math;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::RngExt;
use rand_distr::StandardNormal;

/// Four-axis tensor, laid out batch-major: index `[n][c][y][x]` maps to
/// `((n * C + c) * H + y) * W + x`. Weights reuse the same container with
/// their own axis conventions (documented at each layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, NnError> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(NnError::Shape(format!(
                "{} values for shape {shape:?} (need {want})",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Gaussian-initialized tensor, `std` scaled.
    pub fn randn<R: rand::Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor4 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x]
    }

    /// Contiguous `[y][x]` plane for one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let base = (n * self.shape[1] + c) * hw;
        &self.data[base..base + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let base = (n * self.shape[1] + c) * hw;
        &mut self.data[base..base + hw]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|d| *d = v);
    }

    /// `self += k * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor4, k: f64) -> Result<(), NnError> {
        if self.shape != other.shape {
            return Err(NnError::Shape(format!(
                "add_scaled {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += k * *s;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|d| *d *= k);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Tensor4) -> Result<f64, NnError> {
        if self.shape != other.shape {
            return Err(NnError::Shape(format!("mse {:?} vs {:?}", self.shape, other.shape)));
        }
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc / self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(math::abs(v)))
    }
}
