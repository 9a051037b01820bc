//! BEV grid layout and the dense, sparse, scalar and boolean cell arrays
//! exchanged between the pipeline stages.
//!
//! Rows index `y`, columns index `x`. Cell `(row, col)` at stride `s` covers
//! `[x_min + col·s·cell, x_min + (col+1)·s·cell) × [y_min + row·s·cell, ...)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid range {axis} = ({min}, {max}) is empty")]
    EmptyRange { axis: &'static str, min: f64, max: f64 },
    #[error("cell size must be positive, got {0}")]
    BadCell(f64),
    #[error("extent of {axis} is not an integer number of {cell} m cells")]
    NotCellAligned { axis: &'static str, cell: f64 },
    #[error("stride list must be non-empty, strictly increasing and start at 1")]
    BadStrides,
    #[error("{cells} cells along {axis} is not divisible by stride {stride}")]
    StrideMismatch {
        axis: &'static str,
        cells: usize,
        stride: usize,
    },
    #[error("grid of {rows}x{cols} cells exceeds the u16 coordinate range")]
    TooLarge { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cell: f64,
    pub strides: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-140.8, 140.8),
            y_range: (-38.4, 38.4),
            cell: 0.4,
            strides: vec![1, 2, 4],
        }
    }
}

fn cell_count(min: f64, max: f64, cell: f64) -> Option<usize> {
    let n = (max - min) / cell;
    let r = n.round();
    ((n - r).abs() < 1e-6 && r >= 1.0).then_some(r as usize)
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        for (axis, (min, max)) in [("x_range", self.x_range), ("y_range", self.y_range)] {
            if !(max > min) {
                return Err(GridError::EmptyRange { axis, min, max });
            }
        }
        if !(self.cell > 0.0) {
            return Err(GridError::BadCell(self.cell));
        }
        if self.strides.first() != Some(&1) || self.strides.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GridError::BadStrides);
        }
        let cols = cell_count(self.x_range.0, self.x_range.1, self.cell).ok_or(
            GridError::NotCellAligned {
                axis: "x_range",
                cell: self.cell,
            },
        )?;
        let rows = cell_count(self.y_range.0, self.y_range.1, self.cell).ok_or(
            GridError::NotCellAligned {
                axis: "y_range",
                cell: self.cell,
            },
        )?;
        for &stride in &self.strides {
            for (axis, cells) in [("x_range", cols), ("y_range", rows)] {
                if cells % stride != 0 {
                    return Err(GridError::StrideMismatch {
                        axis,
                        cells,
                        stride,
                    });
                }
            }
        }
        if rows > u16::MAX as usize || cols > u16::MAX as usize {
            return Err(GridError::TooLarge { rows, cols });
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.strides.len()
    }

    /// `(rows, cols)` at the base scale.
    pub fn base_dims(&self) -> (usize, usize) {
        self.dims(0)
    }

    /// `(rows, cols)` at scale index `scale`.
    pub fn dims(&self, scale: usize) -> (usize, usize) {
        let s = self.strides[scale];
        let rows = ((self.y_range.1 - self.y_range.0) / self.cell).round() as usize;
        let cols = ((self.x_range.1 - self.x_range.0) / self.cell).round() as usize;
        (rows / s, cols / s)
    }

    pub fn cell_size(&self, scale: usize) -> f64 {
        self.cell * self.strides[scale] as f64
    }

    pub fn cell_center(&self, scale: usize, row: usize, col: usize) -> Point2 {
        let size = self.cell_size(scale);
        Point2::new(
            self.x_range.0 + (col as f64 + 0.5) * size,
            self.y_range.0 + (row as f64 + 0.5) * size,
        )
    }

    /// Cell containing `p`, or `None` outside the half-open range.
    pub fn cell_of(&self, scale: usize, p: Point2) -> Option<(usize, usize)> {
        let size = self.cell_size(scale);
        let fx = ((p.x - self.x_range.0) / size).floor();
        let fy = ((p.y - self.y_range.0) / size).floor();
        let (rows, cols) = self.dims(scale);
        if fx < 0.0 || fy < 0.0 || fx >= cols as f64 || fy >= rows as f64 {
            return None;
        }
        Some((fy as usize, fx as usize))
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x_range.0 && p.x < self.x_range.1 && p.y >= self.y_range.0 && p.y < self.y_range.1
    }

    /// Distance from the frame origin to the farthest range corner.
    pub fn half_diagonal(&self) -> f64 {
        let dx = self.x_range.0.abs().max(self.x_range.1.abs());
        let dy = self.y_range.0.abs().max(self.y_range.1.abs());
        dx.hypot(dy)
    }
}

/// Dense `rows × cols × channels` array, channel-interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub scale: usize,
    pub values: Vec<f32>,
}

impl DenseGrid {
    pub fn zeros(rows: usize, cols: usize, channels: usize, scale: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
            scale,
            values: vec![0.0; rows * cols * channels],
        }
    }

    #[inline]
    pub fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.cols + col) * self.channels
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let o = self.offset(row, col);
        &self.values[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = self.offset(row, col);
        &mut self.values[o..o + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[self.offset(row, col) + ch]
    }

    /// Channel-wise maximum over each `factor × factor` block.
    pub fn max_pool(&self, factor: usize) -> DenseGrid {
        assert!(factor >= 1 && self.rows.is_multiple_of(factor) && self.cols.is_multiple_of(factor));
        let mut out = DenseGrid::zeros(self.rows / factor, self.cols / factor, self.channels, self.scale + 1);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (pr, pc) = (r / factor, c / factor);
                let o = out.offset(pr, pc);
                let src = self.cell(r, c);
                for (dst, &v) in out.values[o..o + self.channels].iter_mut().zip(src) {
                    if v > *dst {
                        *dst = v;
                    }
                }
            }
        }
        out
    }
}

/// Sparse grid: only selected cells, stored as `(row, col)` coordinates plus a
/// flat value array of `channels` entries per cell, sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub scale: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub coords: Vec<(u16, u16)>,
    pub values: Vec<f32>,
}

impl SparseGrid {
    pub fn empty(scale: usize, rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            scale,
            rows,
            cols,
            channels,
            coords: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn entry(&self, i: usize) -> ((u16, u16), &[f32]) {
        (self.coords[i], &self.values[i * self.channels..(i + 1) * self.channels])
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u16, u16), &[f32])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.channels.max(1)))
    }

    pub fn push(&mut self, row: u16, col: u16, values: &[f32]) {
        debug_assert_eq!(values.len(), self.channels);
        self.coords.push((row, col));
        self.values.extend_from_slice(values);
    }

    pub fn is_sorted(&self) -> bool {
        self.coords.windows(2).all(|w| w[0] < w[1])
    }

    /// Scatters into a dense grid of the same shape; untouched cells are zero.
    pub fn to_dense(&self) -> DenseGrid {
        let mut d = DenseGrid::zeros(self.rows, self.cols, self.channels, self.scale);
        for ((r, c), v) in self.iter() {
            d.cell_mut(r as usize, c as usize).copy_from_slice(v);
        }
        d
    }
}

/// Single-channel real map with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl ScalarGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * self.cols + col] = v;
    }
}

/// Boolean cell mask at a given scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub scale: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(rows: usize, cols: usize, scale: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            scale,
            bits: vec![value; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.scale == other.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_dims() {
        let spec = GridSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.base_dims(), (192, 704));
        assert_eq!(spec.dims(1), (96, 352));
        assert_eq!(spec.dims(2), (48, 176));
    }

    #[test]
    fn rejects_misaligned_specs() {
        let mut spec = GridSpec::default();
        spec.x_range = (-10.0, 10.1);
        assert!(matches!(spec.validate(), Err(GridError::NotCellAligned { .. })));
        let spec = GridSpec {
            x_range: (-2.0, 2.0),
            y_range: (-2.0, 2.0),
            cell: 0.4,
            strides: vec![1, 2, 4],
        };
        assert!(matches!(spec.validate(), Err(GridError::StrideMismatch { .. })));
        let spec = GridSpec {
            strides: vec![2, 4],
            ..GridSpec::default()
        };
        assert_eq!(spec.validate(), Err(GridError::BadStrides));
    }

    #[test]
    fn cell_center_round_trips() {
        let spec = GridSpec::default();
        for scale in 0..3 {
            let (rows, cols) = spec.dims(scale);
            for &(r, c) in &[(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 3)] {
                assert_eq!(spec.cell_of(scale, spec.cell_center(scale, r, c)), Some((r, c)));
            }
        }
        assert_eq!(spec.cell_of(0, Point2::new(140.8, 0.0)), None);
    }
}
