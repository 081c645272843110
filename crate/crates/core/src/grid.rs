//! Image rasters stored row-major with the channel index varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value-range semantics of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// Model space, nominally `[-1, 1]`. Values may overshoot during optimization.
    Model,
    /// Memory space, every value in `[0, 1]`.
    Memory,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same spatial layout with a single channel.
    pub const fn single_channel(&self) -> Self {
        Self::new(self.height, self.width, 1)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    dims: Dims,
    values: Vec<f64>,
    range: RangeTag,
}

impl ImageGrid {
    pub fn new(dims: Dims, values: Vec<f64>, range: RangeTag) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape(format!("grid dims must be positive, got {dims}")));
        }
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values for a {dims} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value {i} is {}", values[i])));
        }
        if range == RangeTag::Memory {
            if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::OutOfRange(format!(
                    "memory-space value {i} is {}",
                    values[i]
                )));
            }
        }
        Ok(Self { dims, values, range })
    }

    pub fn zeros(dims: Dims, range: RangeTag) -> Self {
        Self { dims, values: vec![0.0; dims.len()], range }
    }

    pub fn filled(dims: Dims, value: f64, range: RangeTag) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()], range)
    }

    /// Builds a grid without validation. Callers guarantee the invariants.
    pub(crate) fn from_raw(dims: Dims, values: Vec<f64>, range: RangeTag) -> Self {
        debug_assert_eq!(values.len(), dims.len());
        Self { dims, values, range }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn range(&self) -> RangeTag {
        self.range
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

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.dims.width + col) * self.dims.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[self.index(row, col, ch)]
    }

    /// Retags the grid, validating the memory-space bound when needed.
    pub fn with_range(self, range: RangeTag) -> Result<Self> {
        Self::new(self.dims, self.values, range)
    }

    pub fn ensure_same_dims(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: {} vs {}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Elementwise map. The result is checked for finiteness.
    pub fn map(&self, range: RangeTag, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.values.iter().map(|&v| f(v)).collect(), range)
    }

    pub fn dot(&self, other: &ImageGrid) -> Result<f64> {
        self.ensure_same_dims(other, "dot product")?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn squared_norm(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    /// `self - other`, tagged unbounded.
    pub fn sub(&self, other: &ImageGrid) -> Result<Self> {
        self.ensure_same_dims(other, "subtraction")?;
        Self::new(
            self.dims,
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            RangeTag::Unbounded,
        )
    }

    pub fn clamp_model(&self) -> Self {
        Self::from_raw(
            self.dims,
            self.values.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            RangeTag::Model,
        )
    }

    /// Single-channel view of channel `ch`.
    pub fn channel(&self, ch: usize) -> Result<Self> {
        if ch >= self.dims.channels {
            return Err(Error::Shape(format!("channel {ch} of {}", self.dims)));
        }
        let values = self.values.iter().skip(ch).step_by(self.dims.channels).copied().collect();
        Ok(Self::from_raw(self.dims.single_channel(), values, self.range))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
