//! Row-major 2-D grids: images, probability maps and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::GridError;

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::EmptyDimensions { height, width });
        }
        if data.len() != height * width {
            return Err(GridError::LengthMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn same_shape(&self, other: &Grid<impl Copy>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Grayscale image with intensities in [0, 1].
pub type Image = Grid<f32>;

/// Per-pixel probabilities in [0, 1], stored single precision.
///
/// This is both the detector output and the pseudo ground truth used for
/// distillation. Stored in f32; any nonlinear math on the values happens in
/// f64 (see the sharpening module).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap(Grid<f32>);

impl ProbabilityMap {
    pub fn new(grid: Grid<f32>) -> Result<Self, GridError> {
        if let Some(&v) = grid.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GridError::ValueOutOfRange { value: v as f64 });
        }
        Ok(Self(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self, GridError> {
        Self::new(Grid::from_vec(height, width, data)?)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self, GridError> {
        Self::new(Grid::new(height, width, value))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        self.0.values()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.0.get(x, y)
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    /// Largest pixel value (0 is unreachable only for empty grids, which the
    /// constructor rejects).
    pub fn max_value(&self) -> f32 {
        self.values().iter().copied().fold(f32::MIN, f32::max)
    }
}

/// Binary ground-truth mask aligned with an image (1 inside boxes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtMask(Grid<u8>);

impl GtMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width, 0))
    }

    pub fn new(grid: Grid<u8>) -> Result<Self, GridError> {
        if grid.values().iter().any(|&v| v > 1) {
            return Err(GridError::NonBinaryMask);
        }
        Ok(Self(grid))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn values(&self) -> &[u8] {
        self.0.values()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.0.get(x, y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        debug_assert!(value <= 1);
        self.0.set(x, y, value);
    }

    pub fn count_ones(&self) -> usize {
        self.values().iter().filter(|&&v| v == 1).count()
    }
}
