//! Binary label grids and key-point maps.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A 2-D lesion/background label grid. Every value is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask must be at least 1x1");
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask must be at least 1x1");
        Self {
            values: Array2::ones((height, width)),
        }
    }

    /// Wraps an array, rejecting values other than 0 and 1.
    pub fn from_array(values: Array2<u8>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::shape("mask must be at least 1x1"));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParam(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { values })
    }

    /// Builds a mask from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        assert!(height >= 1 && width >= 1, "mask must be at least 1x1");
        Self {
            values: Array2::from_shape_fn((height, width), |(r, c)| u8::from(f(r, c))),
        }
    }

    /// Thresholds real values: `v >= threshold` becomes foreground.
    pub fn threshold(values: &Array2<f64>, threshold: f64) -> Self {
        Self {
            values: values.mapv(|v| u8::from(v >= threshold)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[[row, col]] == 1
    }

    /// Lookup with signed coordinates; out-of-bounds reads as background.
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height()
            && (col as usize) < self.width()
            && self.values[[row as usize, col as usize]] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[[row, col]] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }

    /// Foreground pixel that has a 4-neighbor in background or lies on the image border.
    pub fn is_boundary(&self, row: usize, col: usize) -> bool {
        if !self.get(row, col) {
            return false;
        }
        let (r, c) = (row as isize, col as isize);
        !(self.get_signed(r - 1, c)
            && self.get_signed(r + 1, c)
            && self.get_signed(r, c - 1)
            && self.get_signed(r, c + 1))
    }

    /// Nearest-neighbor downsampling by an integer factor. Each output cell takes the
    /// pixel nearest to its center.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        let (h, w) = self.dims();
        for dim in [h, w] {
            if factor == 0 || dim % factor != 0 {
                return Err(Error::Dimension { dim, divisor: factor });
            }
        }
        let offset = factor / 2;
        Ok(Self {
            values: Array2::from_shape_fn((h / factor, w / factor), |(r, c)| {
                self.values[[r * factor + offset, c * factor + offset]]
            }),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width();
        Self {
            values: Array2::from_shape_fn(self.dims(), |(r, c)| self.values[[r, w - 1 - c]]),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height();
        Self {
            values: Array2::from_shape_fn(self.dims(), |(r, c)| self.values[[h - 1 - r, c]]),
        }
    }

    /// Counter-clockwise rotation by 90 degrees.
    pub fn rot90(&self) -> Self {
        let (h, w) = self.dims();
        Self {
            values: Array2::from_shape_fn((w, h), |(r, c)| self.values[[c, w - 1 - r]]),
        }
    }
}

/// Per-pixel key-point values. Ground-truth maps hold only 0/1, predictions lie in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPointMap {
    values: Array2<f64>,
}

impl KeyPointMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn from_array(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[[row, col]] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Positions with value exactly 1 in row-major order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.values
            .indexed_iter()
            .filter(|(_, &v)| v == 1.0)
            .map(|(idx, _)| idx)
            .collect()
    }

    pub fn rot90(&self) -> Self {
        let (h, w) = self.dims();
        Self {
            values: Array2::from_shape_fn((w, h), |(r, c)| self.values[[c, w - 1 - r]]),
        }
    }

    /// Returns the map as an 8-bit image value grid (0 or 255, rounding predictions).
    pub fn to_u8(&self) -> Array2<u8> {
        self.values.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }
}
