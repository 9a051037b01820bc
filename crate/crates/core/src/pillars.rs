//! Point cloud → multi-scale BEV grids.
//!
//! The evidence grid is an analytic stand-in for learned pillar features: two
//! channels per base cell, `(min(n, 32) / 32, foreground fraction)`, max-pooled
//! into the coarser scales. Confidence is their product.

use crate::grid::{DenseGrid, GridSpec, ScalarGrid};
use crate::scene_sim::PointCloud;

/// Point count at which a pillar saturates.
pub const MAX_POINTS_PER_PILLAR: u32 = 32;

pub const DENSITY_CHANNEL: usize = 0;
pub const FOREGROUND_CHANNEL: usize = 1;
pub const EVIDENCE_CHANNELS: usize = 2;

/// Per-cell point density in `[0, 1]`, always a multiple of 1/32.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap(pub ScalarGrid);

/// Per-cell foreground confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(pub ScalarGrid);

impl std::ops::Deref for DensityMap {
    type Target = ScalarGrid;
    fn deref(&self) -> &ScalarGrid {
        &self.0
    }
}

impl std::ops::Deref for ConfidenceMap {
    type Target = ScalarGrid;
    fn deref(&self) -> &ScalarGrid {
        &self.0
    }
}

fn density_value(count: u32) -> f32 {
    count.min(MAX_POINTS_PER_PILLAR) as f32 / MAX_POINTS_PER_PILLAR as f32
}

/// Counts `(all, foreground)` points per base cell.
fn count_points(pc: &PointCloud, spec: &GridSpec) -> Vec<(u32, u32)> {
    let (rows, cols) = spec.base_dims();
    let mut counts = vec![(0u32, 0u32); rows * cols];
    for p in &pc.points {
        if let Some((r, c)) = spec.cell_of(0, p.position()) {
            let slot = &mut counts[r * cols + c];
            slot.0 += 1;
            if p.is_foreground() {
                slot.1 += 1;
            }
        }
    }
    counts
}

pub fn rasterize_density(pc: &PointCloud, spec: &GridSpec) -> DensityMap {
    let (rows, cols) = spec.base_dims();
    let counts = count_points(pc, spec);
    DensityMap(ScalarGrid {
        rows,
        cols,
        values: counts.iter().map(|&(n, _)| density_value(n)).collect(),
    })
}

/// One dense grid per configured scale.
pub fn build_evidence(pc: &PointCloud, spec: &GridSpec) -> Vec<DenseGrid> {
    let (rows, cols) = spec.base_dims();
    let counts = count_points(pc, spec);
    let mut base = DenseGrid::zeros(rows, cols, EVIDENCE_CHANNELS, 0);
    for (i, &(n, fg)) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        base.values[i * EVIDENCE_CHANNELS + DENSITY_CHANNEL] = density_value(n);
        base.values[i * EVIDENCE_CHANNELS + FOREGROUND_CHANNEL] = fg as f32 / n as f32;
    }
    pool_scales(base, spec)
}

/// Builds the coarser scales of `base` by successive max pooling.
pub fn pool_scales(base: DenseGrid, spec: &GridSpec) -> Vec<DenseGrid> {
    let mut grids = vec![base];
    for w in spec.strides.windows(2) {
        let next = grids.last().unwrap().max_pool(w[1] / w[0]);
        grids.push(next);
    }
    grids
}

/// Base-scale `density × foreground fraction`.
pub fn confidence_map(evidence: &[DenseGrid]) -> ConfidenceMap {
    let base = &evidence[0];
    let values = base
        .values
        .chunks_exact(base.channels)
        .map(|cell| {
            let fg = cell.get(FOREGROUND_CHANNEL).copied().unwrap_or(0.0);
            cell[DENSITY_CHANNEL] * fg
        })
        .collect();
    ConfidenceMap(ScalarGrid {
        rows: base.rows,
        cols: base.cols,
        values,
    })
}
