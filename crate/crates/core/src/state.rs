//! Flat real state vectors shared by every equation in the crate.
//!
//! A complex spectrogram with `K` frames and `F` bins is stored frame-major
//! with interleaved `(re, im)` pairs, i.e. `data[2 * (k * F + f)]` is the real
//! part of bin `f` in frame `k`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Toy(usize),
    Spectrogram { frames: usize, bins: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Toy(d) => d,
            Shape::Spectrogram { frames, bins } => 2 * frames * bins,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of one independently processed frame: the whole vector for toy
    /// states, `2 * bins` for spectrograms.
    pub fn frame_len(&self) -> usize {
        match *self {
            Shape::Toy(d) => d,
            Shape::Spectrogram { bins, .. } => 2 * bins,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Toy(d) => write!(f, "toy({d})"),
            Shape::Spectrogram { frames, bins } => write!(f, "spectrogram({frames}x{bins}x2)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    data: Vec<f64>,
    shape: Shape,
}

impl StateVector {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape, format!("{} values", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("entry {i} of {shape} state")));
        }
        Ok(Self { data, shape })
    }

    pub fn toy(data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Toy(data.len()), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            data: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            data: vec![value; shape.len()],
            shape,
        }
    }

    /// Standard normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self { data, shape }
    }

    /// Skips the finiteness check; callers that can produce non-finite values
    /// must check with [`StateVector::is_finite`].
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { data, shape }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &StateVector) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// `a * self + b * other`, coordinatewise.
    pub fn lin_comb(&self, a: f64, other: &StateVector, b: f64) -> StateVector {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::from_raw(self.shape, data)
    }

    pub fn add(&self, other: &StateVector) -> StateVector {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &StateVector) -> StateVector {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, a: f64) -> StateVector {
        self.map(|v| a * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> StateVector {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &StateVector) {
        debug_assert_eq!(self.shape, other.shape);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn dot(&self, other: &StateVector) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}
