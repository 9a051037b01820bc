//! Demand mask, supply mask, their conjunction, and sparse feature selection.
//!
//! Demand is computed at base scale (`density < eps_a`), supply from the
//! base-scale confidence (`confidence > eps_c`). Coarser scales are selected by
//! OR-pooling the base mask over each `stride × stride` block.

pub use crate::grid::BinaryMask;
use crate::geometry::Pose2;
use crate::grid::{DenseGrid, GridSpec, SparseGrid};
use crate::pillars::{ConfidenceMap, DensityMap};

/// Cells whose point density is strictly below `eps_a`.
pub fn demand_mask(density: &DensityMap, eps_a: f32) -> BinaryMask {
    debug_assert!(eps_a > 0.0 && eps_a <= 1.0);
    BinaryMask {
        rows: density.rows,
        cols: density.cols,
        scale: 0,
        bits: density.values.iter().map(|&v| v < eps_a).collect(),
    }
}

/// Cells whose confidence is strictly above `eps_c`.
pub fn supply_mask(conf: &ConfidenceMap, eps_c: f32) -> BinaryMask {
    BinaryMask {
        rows: conf.rows,
        cols: conf.cols,
        scale: 0,
        bits: conf.values.iter().map(|&v| v > eps_c).collect(),
    }
}

/// Element-wise AND. Panics on shape mismatch.
pub fn selection_mask(demand_of_ego: &BinaryMask, supply_of_sender: &BinaryMask) -> BinaryMask {
    assert!(
        demand_of_ego.same_shape(supply_of_sender),
        "mask shapes differ: {}x{} vs {}x{}",
        demand_of_ego.rows,
        demand_of_ego.cols,
        supply_of_sender.rows,
        supply_of_sender.cols
    );
    BinaryMask {
        bits: demand_of_ego
            .bits
            .iter()
            .zip(&supply_of_sender.bits)
            .map(|(&d, &s)| d && s)
            .collect(),
        ..demand_of_ego.clone()
    }
}

/// Resamples a base-scale mask owned by the agent at `owner_pose` into the
/// frame of the agent at `target_pose` (nearest cell). Target cells whose
/// center falls outside the owner's range are false.
pub fn warp_mask(mask: &BinaryMask, owner_pose: &Pose2, target_pose: &Pose2, spec: &GridSpec) -> BinaryMask {
    if owner_pose == target_pose {
        return mask.clone();
    }
    let to_owner = Pose2::relative(target_pose, owner_pose);
    let mut out = BinaryMask::filled(mask.rows, mask.cols, 0, false);
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            let p = to_owner.transform_point(spec.cell_center(0, r, c));
            if let Some((or, oc)) = spec.cell_of(0, p) {
                out.set(r, c, mask.get(or, oc));
            }
        }
    }
    out
}

/// OR-pools a base-scale mask by `stride`.
pub fn or_pool(mask: &BinaryMask, stride: usize, scale: usize) -> BinaryMask {
    let mut out = BinaryMask::filled(mask.rows / stride, mask.cols / stride, scale, false);
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            if mask.get(r, c) {
                out.set(r / stride, c / stride, true);
            }
        }
    }
    out
}

/// Keeps the evidence cells selected by `mask` (pooled per scale), sorted by `(row, col)`.
pub fn select_sparse(evidence: &[DenseGrid], mask: &BinaryMask, spec: &GridSpec) -> Vec<SparseGrid> {
    evidence
        .iter()
        .enumerate()
        .map(|(scale, grid)| {
            let pooled = or_pool(mask, spec.strides[scale], scale);
            let mut out = SparseGrid::empty(scale, grid.rows, grid.cols, grid.channels);
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    if pooled.get(r, c) {
                        out.push(r as u16, c as u16, grid.cell(r, c));
                    }
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarGrid;
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec {
            x_range: (-6.4, 6.4),
            y_range: (-6.4, 6.4),
            cell: 0.4,
            strides: vec![1, 2, 4],
        }
    }

    fn density(values: Vec<f32>, rows: usize, cols: usize) -> DensityMap {
        DensityMap(ScalarGrid { rows, cols, values })
    }

    fn conf(values: Vec<f32>, rows: usize, cols: usize) -> ConfidenceMap {
        ConfidenceMap(ScalarGrid { rows, cols, values })
    }

    #[test]
    fn demand_examples() {
        let d = demand_mask(&density(vec![0.0; 6], 2, 3), 0.125);
        assert_eq!(d.count_true(), 6);
        let d = demand_mask(&density(vec![0.125, 3.0 / 32.0], 1, 2), 0.125);
        assert_eq!(d.bits, vec![false, true]);
    }

    #[test]
    fn supply_examples() {
        let s = supply_mask(&conf(vec![0.0; 4], 2, 2), 0.01);
        assert_eq!(s.count_true(), 0);
        let s = supply_mask(&conf(vec![0.5, 0.01], 1, 2), 0.01);
        assert_eq!(s.bits, vec![true, false]);
    }

    #[test]
    fn selection_examples() {
        let supply = BinaryMask {
            rows: 2,
            cols: 2,
            scale: 0,
            bits: vec![true, false, true, true],
        };
        assert_eq!(selection_mask(&BinaryMask::filled(2, 2, 0, true), &supply), supply);
        let none = BinaryMask::filled(2, 2, 0, false);
        assert_eq!(selection_mask(&supply, &none).count_true(), 0);

        // 100 demanded cells, 80 supplied, 30 in common.
        let mut demand = BinaryMask::filled(20, 10, 0, false);
        let mut supply = BinaryMask::filled(20, 10, 0, false);
        for i in 0..100 {
            demand.bits[i] = true;
        }
        for i in 70..150 {
            supply.bits[i] = true;
        }
        assert_eq!(selection_mask(&demand, &supply).count_true(), 30);
    }

    #[test]
    #[should_panic]
    fn selection_rejects_shape_mismatch() {
        selection_mask(&BinaryMask::filled(2, 2, 0, true), &BinaryMask::filled(2, 3, 0, true));
    }

    fn evidence_for(spec: &GridSpec) -> Vec<DenseGrid> {
        let (rows, cols) = spec.base_dims();
        let mut base = DenseGrid::zeros(rows, cols, 2, 0);
        for (i, v) in base.values.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        crate::pillars::pool_scales(base, spec)
    }

    #[test]
    fn sparse_selection_examples() {
        let spec = spec();
        let ev = evidence_for(&spec);
        let (rows, cols) = spec.base_dims();
        let none = select_sparse(&ev, &BinaryMask::filled(rows, cols, 0, false), &spec);
        assert_eq!(none.len(), 3);
        assert!(none.iter().all(|g| g.is_empty()));

        let mut one = BinaryMask::filled(rows, cols, 0, false);
        one.set(13, 22, true);
        let sel = select_sparse(&ev, &one, &spec);
        assert_eq!(sel[0].coords, vec![(13, 22)]);
        assert_eq!(sel[1].coords, vec![(6, 11)]);
        assert_eq!(sel[2].coords, vec![(3, 5)]);
        assert_eq!(sel[1].entry(0).1, ev[1].cell(6, 11));

        // k cells in k distinct 4x4 blocks.
        let mut blocks = BinaryMask::filled(rows, cols, 0, false);
        let cells = [(0, 0), (5, 9), (10, 2), (31, 31), (17, 26)];
        for &(r, c) in &cells {
            blocks.set(r, c, true);
        }
        assert_eq!(select_sparse(&ev, &blocks, &spec)[2].len(), cells.len());
    }

    #[test]
    fn warp_mask_identity_and_shift() {
        let spec = spec();
        let (rows, cols) = spec.base_dims();
        let mut m = BinaryMask::filled(rows, cols, 0, false);
        m.set(10, 10, true);
        let p = Pose2::new(3.0, -1.0, 0.4);
        assert_eq!(warp_mask(&m, &p, &p, &spec), m);
        // Target sits one cell to the +x of the owner: owner col 10 is target col 9.
        let owner = Pose2::identity();
        let target = Pose2::new(0.4, 0.0, 0.0);
        let w = warp_mask(&m, &owner, &target, &spec);
        assert!(w.get(10, 9));
        assert_eq!(w.count_true(), 1);
    }

    proptest! {
        #[test]
        fn mask_properties(
            bits in proptest::collection::vec(any::<bool>(), 32 * 32),
            confs in proptest::collection::vec(0.0..1.0f32, 32 * 32),
            lo in 0.0..0.5f32,
            bump in 0.0..0.5f32,
        ) {
            let spec = spec();
            let demand = BinaryMask { rows: 32, cols: 32, scale: 0, bits };
            let c = conf(confs, 32, 32);
            let s_lo = supply_mask(&c, lo);
            let s_hi = supply_mask(&c, lo + bump);
            let m_lo = selection_mask(&demand, &s_lo);
            let m_hi = selection_mask(&demand, &s_hi);
            prop_assert!(m_lo.count_true() <= demand.count_true().min(s_lo.count_true()));
            prop_assert!(m_hi.count_true() <= m_lo.count_true());
            prop_assert!(s_hi.count_true() <= s_lo.count_true());

            let ev = evidence_for(&spec);
            let sel = select_sparse(&ev, &m_lo, &spec);
            for (l, g) in sel.iter().enumerate() {
                prop_assert!(g.is_sorted());
                let stride = spec.strides[l];
                for r in 0..g.rows {
                    for col in 0..g.cols {
                        let any = (0..stride).any(|dr| (0..stride).any(|dc| m_lo.get(r * stride + dr, col * stride + dc)));
                        let selected = g.coords.binary_search(&(r as u16, col as u16)).is_ok();
                        prop_assert_eq!(any, selected);
                    }
                }
            }
        }
    }
}
