//! Intermediate fusion: re-binning received sparse features into the ego
//! frame, channel-wise max fusion, and the analytic detector.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{detection_order, normalize_angle, BevBox, Point2, Pose2};
use crate::grid::{DenseGrid, GridSpec, SparseGrid};
use crate::pillars::{confidence_map, ConfidenceMap};

/// Moves sparse grids from the sender frame into the ego frame.
///
/// Each cell center is mapped to the nearest ego cell at the same scale. Cells
/// falling outside the ego range are dropped; collisions keep the channel-wise
/// maximum. Output stays sorted by `(row, col)`.
pub fn transform_sparse(grids: &[SparseGrid], sender_pose: &Pose2, ego_pose: &Pose2, spec: &GridSpec) -> Vec<SparseGrid> {
    if sender_pose == ego_pose {
        return grids.to_vec();
    }
    let to_ego = Pose2::relative(sender_pose, ego_pose);
    grids
        .iter()
        .map(|g| {
            let ch = g.channels;
            let mut slots: HashMap<(u16, u16), usize> = HashMap::with_capacity(g.len());
            let mut coords: Vec<(u16, u16)> = Vec::with_capacity(g.len());
            let mut values: Vec<f32> = Vec::with_capacity(g.values.len());
            for ((r, c), v) in g.iter() {
                let p = to_ego.transform_point(spec.cell_center(g.scale, r as usize, c as usize));
                let Some((tr, tc)) = spec.cell_of(g.scale, p) else {
                    continue;
                };
                let key = (tr as u16, tc as u16);
                match slots.get(&key) {
                    Some(&i) => {
                        for (dst, &src) in values[i * ch..(i + 1) * ch].iter_mut().zip(v) {
                            *dst = dst.max(src);
                        }
                    }
                    None => {
                        slots.insert(key, coords.len());
                        coords.push(key);
                        values.extend_from_slice(v);
                    }
                }
            }
            let mut order: Vec<usize> = (0..coords.len()).collect();
            order.sort_unstable_by_key(|&i| coords[i]);
            let mut out = SparseGrid::empty(g.scale, g.rows, g.cols, ch);
            for i in order {
                out.push(coords[i].0, coords[i].1, &values[i * ch..(i + 1) * ch]);
            }
            out
        })
        .collect()
}

/// Per-scale evidence after max fusion, in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEvidence {
    pub grids: Vec<DenseGrid>,
}

impl FusedEvidence {
    pub fn confidence(&self) -> ConfidenceMap {
        confidence_map(&self.grids)
    }
}

/// Channel-wise maximum of the ego grids and every received entry. Received
/// grids may carry more channels than the ego (zero padding); only the
/// channels the ego grid has are fused.
pub fn max_fuse(ego: &[DenseGrid], received: &[Vec<SparseGrid>]) -> FusedEvidence {
    let mut grids = ego.to_vec();
    for msg in received {
        for g in msg {
            let Some(dst) = grids.get_mut(g.scale) else {
                continue;
            };
            assert_eq!((dst.rows, dst.cols), (g.rows, g.cols), "scale {} dims differ", g.scale);
            let n = dst.channels.min(g.channels);
            for ((r, c), v) in g.iter() {
                let cell = dst.cell_mut(r as usize, c as usize);
                for (d, &s) in cell[..n].iter_mut().zip(&v[..n]) {
                    if s > *d {
                        *d = s;
                    }
                }
            }
        }
    }
    FusedEvidence { grids }
}

/// Parameters of the connected-component detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Base-scale confidence a cell must strictly exceed.
    pub theta_det: f32,
    /// Minimum component size in cells.
    pub n_min: usize,
    /// Slope of the saturating score `1 - exp(-s * sum)`.
    pub score_scale: f64,
    /// Footprint prior used to complete partially observed objects.
    pub prior_length: f64,
    pub prior_width: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            theta_det: 0.05,
            n_min: 3,
            score_scale: 0.15,
            prior_length: 4.5,
            prior_width: 1.8,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.theta_det) {
            return Err("theta_det".into());
        }
        if self.n_min == 0 {
            return Err("n_min".into());
        }
        if !(self.score_scale > 0.0 && self.score_scale.is_finite()) {
            return Err("score_scale".into());
        }
        if !(self.prior_length > 0.0 && self.prior_width > 0.0 && self.prior_length >= self.prior_width) {
            return Err("prior_length".into());
        }
        Ok(())
    }
}

/// 8-connected components of `keep`, each listed in row-major discovery order.
fn components(keep: &[bool], rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; keep.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..keep.len() {
        if !keep[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if keep[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Extent of `pts` along unit axis `(cos t, sin t)`: `(min, max)`.
fn span(pts: &[Point2], t: f64) -> (f64, f64) {
    let (s, c) = t.sin_cos();
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.x * c + p.y * s;
        (lo.min(d), hi.max(d))
    })
}

fn closeness(pts: &[Point2], t: f64, d0: f64) -> f64 {
    let (s, c) = t.sin_cos();
    let (a0, a1) = span(pts, t);
    let (b0, b1) = span(pts, t + std::f64::consts::FRAC_PI_2);
    pts.iter()
        .map(|p| {
            let a = p.x * c + p.y * s;
            let b = -p.x * s + p.y * c;
            let d = (a1 - a).min(a - a0).min((b1 - b).min(b - b0));
            1.0 / d.max(d0)
        })
        .sum()
}

/// Mean projection of `pts` on unit axis `(cos t, sin t)`.
fn mean_projection(pts: &[Point2], t: f64) -> f64 {
    let (s, c) = t.sin_cos();
    pts.iter().map(|p| p.x * c + p.y * s).sum::<f64>() / pts.len() as f64
}

/// Cells concentrated within this fraction of the observed footprint from the
/// middle count as balanced.
const FACE_BIAS: f64 = 0.1;

/// Grows `[lo, hi]` to at least `size`.
///
/// Visible faces hold most of the cells, so the interval grows away from the
/// side where the cells concentrate (`mean`). When they are balanced it grows
/// away from the sensor at projection 0, or symmetrically if the sensor faces
/// the interval broadside. `lo` and `hi` are cell centers, so the footprint
/// is one `cell` wider; a single row of cells is always balanced.
fn complete(lo: f64, hi: f64, mean: f64, size: f64, cell: f64) -> (f64, f64) {
    let observed = hi - lo;
    if size <= observed {
        return (lo, hi);
    }
    let mid = 0.5 * (lo + hi);
    let bias = mean - mid;
    let tolerance = FACE_BIAS * (observed + cell);
    if bias < -tolerance {
        (lo, lo + size)
    } else if bias > tolerance {
        (hi - size, hi)
    } else if mid.abs() < 0.5 * observed {
        let pad = 0.5 * (size - observed);
        (lo - pad, hi + pad)
    } else if mid > 0.0 {
        (lo, lo + size)
    } else {
        (hi - size, hi)
    }
}

/// Fits a box to one component of cell centers with confidences `w`.
fn fit_box(pts: &[Point2], w: &[f32], cell: f64, params: &DetectorParams) -> BevBox {
    let total: f64 = w.iter().map(|&v| v as f64).sum();
    let (mx, my) = pts
        .iter()
        .zip(w)
        .fold((0.0, 0.0), |(x, y), (p, &v)| (x + p.x * v as f64, y + p.y * v as f64));
    let (mx, my) = (mx / total, my / total);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, &v) in pts.iter().zip(w) {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += v as f64 * dx * dx;
        syy += v as f64 * dy * dy;
        sxy += v as f64 * dx * dy;
    }
    let principal = 0.5 * (2.0 * sxy).atan2(sxx - syy);

    // Closeness search over ±45° of the principal axis in 1° steps: every
    // point scores the inverse distance to its nearest rectangle edge.
    let d0 = 0.5 * cell;
    let mut best = (f64::NEG_INFINITY, principal);
    for step in 0..=90 {
        let k = if step % 2 == 0 { step / 2 } else { -(step + 1) / 2 } as f64;
        let t = principal + k.to_radians();
        let score = closeness(pts, t, d0);
        if score > best.0 + 1e-12 {
            best = (score, t);
        }
    }
    let mut t = best.1;
    let (mut a0, mut a1) = span(pts, t);
    let (mut b0, mut b1) = span(pts, t + std::f64::consts::FRAC_PI_2);
    if b1 - b0 > a1 - a0 {
        // Keep the longer observed extent on the first axis.
        t += std::f64::consts::FRAC_PI_2;
        (a0, a1, b0, b1) = (b0, b1, -a1, -a0);
    }
    let (lp, wp) = (params.prior_length, params.prior_width);
    let (pa, pb) = (mean_projection(pts, t), mean_projection(pts, t + std::f64::consts::FRAC_PI_2));
    let (length, width);
    if a1 - a0 > wp + cell {
        // Too long to be the short face: the first axis is the length.
        (a0, a1) = complete(a0, a1, pa, lp, cell);
        (b0, b1) = complete(b0, b1, pb, wp, cell);
        length = a1 - a0;
        width = b1 - b0;
    } else {
        // Observed a short face only: the object extends along the second axis.
        (a0, a1) = complete(a0, a1, pa, wp, cell);
        (b0, b1) = complete(b0, b1, pb, lp, cell);
        t += std::f64::consts::FRAC_PI_2;
        (a0, a1, b0, b1) = (b0, b1, -a1, -a0);
        length = a1 - a0;
        width = b1 - b0;
    }
    debug_assert!(length >= width);
    let (s, c) = t.sin_cos();
    let (ma, mb) = (0.5 * (a0 + a1), 0.5 * (b0 + b1));
    let yaw = normalize_angle(t);
    BevBox {
        cx: ma * c - mb * s,
        cy: ma * s + mb * c,
        length,
        width,
        yaw,
        confidence: 1.0 - (-params.score_scale * total).exp(),
        source_agent: 0,
    }
}

/// Connected-component detector on the base-scale confidence.
///
/// Cells with confidence above `theta_det` are grouped 8-connected; every
/// component of at least `n_min` cells yields one box. The box is the
/// best-fitting rectangle of the component, grown to the footprint prior away
/// from its visible faces. Output is in detection order.
pub fn detect(fused: &FusedEvidence, spec: &GridSpec, params: &DetectorParams) -> Vec<BevBox> {
    detect_confidence(&fused.confidence(), spec, params)
}

pub fn detect_confidence(conf: &ConfidenceMap, spec: &GridSpec, params: &DetectorParams) -> Vec<BevBox> {
    let (rows, cols) = (conf.rows, conf.cols);
    let keep: Vec<bool> = conf.values.iter().map(|&v| v > params.theta_det).collect();
    let cell = spec.cell_size(0);
    let mut boxes: Vec<BevBox> = components(&keep, rows, cols)
        .into_iter()
        .filter(|comp| comp.len() >= params.n_min)
        .map(|comp| {
            let pts: Vec<Point2> = comp.iter().map(|&i| spec.cell_center(0, i / cols, i % cols)).collect();
            let w: Vec<f32> = comp.iter().map(|&i| conf.values[i]).collect();
            fit_box(&pts, &w, cell, params)
        })
        .collect();
    boxes.sort_by(detection_order);
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotated_iou;
    use crate::pillars::build_evidence;
    use crate::scene_sim::{sample_lidar, SamplerConfig, Scene, SceneObject, AgentState, Footprint};
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec::default()
    }

    fn small() -> GridSpec {
        GridSpec {
            x_range: (-8.0, 8.0),
            y_range: (-8.0, 8.0),
            cell: 0.4,
            strides: vec![1, 2, 4],
        }
    }

    fn random_sparse(spec: &GridSpec, seed: u64, n: usize) -> Vec<SparseGrid> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..spec.num_scales())
            .map(|l| {
                let (rows, cols) = spec.dims(l);
                let mut cells: Vec<(u16, u16)> = (0..n)
                    .map(|_| (rng.gen_range(0..rows) as u16, rng.gen_range(0..cols) as u16))
                    .collect();
                cells.sort_unstable();
                cells.dedup();
                let mut g = SparseGrid::empty(l, rows, cols, 2);
                for (r, c) in cells {
                    g.push(r, c, &[rng.gen::<f32>(), rng.gen::<f32>()]);
                }
                g
            })
            .collect()
    }

    #[test]
    fn transform_identity_and_shift() {
        let spec = small();
        let grids = random_sparse(&spec, 1, 60);
        let p = Pose2::new(2.0, -3.0, 0.7);
        assert_eq!(transform_sparse(&grids, &p, &p, &spec), grids);

        // Sender 0.4 m ahead of the ego: sender col c is ego col c + 1.
        let sender = Pose2::new(0.4, 0.0, 0.0);
        let out = transform_sparse(&grids, &sender, &Pose2::identity(), &spec);
        let cols = spec.dims(0).1 as u16;
        let expected: Vec<(u16, u16)> = grids[0].coords.iter().filter(|&&(_, c)| c + 1 < cols).map(|&(r, c)| (r, c + 1)).collect();
        assert_eq!(out[0].coords, expected);
        for (i, &(r, c)) in expected.iter().enumerate() {
            let src = grids[0].coords.binary_search(&(r, c - 1)).unwrap();
            assert_eq!(out[0].entry(i).1, grids[0].entry(src).1);
        }
    }

    #[test]
    fn transform_half_turn_matches_per_cell_oracle() {
        let spec = small();
        let grids = random_sparse(&spec, 2, 80);
        let sender = Pose2::new(0.0, 0.0, std::f64::consts::PI);
        let out = transform_sparse(&grids, &sender, &Pose2::identity(), &spec);
        for (l, (src, dst)) in grids.iter().zip(&out).enumerate() {
            assert_eq!(src.len(), dst.len());
            let (rows, cols) = spec.dims(l);
            for ((r, c), v) in src.iter() {
                let p = crate::geometry::transform_point(&sender, spec.cell_center(l, r as usize, c as usize));
                let (tr, tc) = spec.cell_of(l, p).unwrap();
                assert_eq!((tr, tc), (rows - 1 - r as usize, cols - 1 - c as usize));
                let i = dst.coords.binary_search(&(tr as u16, tc as u16)).unwrap();
                assert_eq!(dst.entry(i).1, v);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let spec = small();
        let (rows, cols) = spec.base_dims();
        let mut base = DenseGrid::zeros(rows, cols, 2, 0);
        base.cell_mut(3, 3).copy_from_slice(&[0.4, 0.4]);
        let ego = crate::pillars::pool_scales(base, &spec);
        assert_eq!(max_fuse(&ego, &[]).grids, ego);

        let mut msg = SparseGrid::empty(0, rows, cols, 2);
        msg.push(3, 3, &[0.9, 0.1]);
        let fused = max_fuse(&ego, &[vec![msg]]);
        assert_eq!(fused.grids[0].cell(3, 3), &[0.9, 0.4]);
    }

    #[test]
    fn detect_empty() {
        let spec = small();
        let (rows, cols) = spec.base_dims();
        let ev = crate::pillars::pool_scales(DenseGrid::zeros(rows, cols, 2, 0), &spec);
        assert!(detect(&FusedEvidence { grids: ev }, &spec, &DetectorParams::default()).is_empty());
    }

    fn one_object_scene(obj: Footprint) -> Scene {
        let mut scene = Scene::new(11);
        scene.agents.push(AgentState {
            id: 0,
            pose: Pose2::identity(),
            velocity: Point2::new(0.0, 0.0),
        });
        scene.objects.push(SceneObject {
            id: 1,
            footprint: obj,
            velocity: Point2::new(0.0, 0.0),
        });
        scene
    }

    #[test]
    fn detect_single_visible_object() {
        let spec = spec();
        let params = DetectorParams::default();
        for (i, fp) in [
            Footprint::new(12.0, 3.0, 4.5, 1.8, 0.0),
            Footprint::new(9.0, -4.0, 4.4, 1.8, 0.3),
            Footprint::new(-15.0, 6.0, 4.7, 1.85, 1.2),
            Footprint::new(6.0, 0.0, 4.5, 1.8, 0.0),
        ]
        .into_iter()
        .enumerate()
        {
            let scene = one_object_scene(fp);
            let pc = sample_lidar(&scene, 0, 0.0, &SamplerConfig::for_grid(&spec)).unwrap();
            let ev = build_evidence(&pc, &spec);
            let boxes = detect(&FusedEvidence { grids: ev }, &spec, &params);
            assert_eq!(boxes.len(), 1, "case {i}: {boxes:?}");
            let d = boxes[0].center().distance(fp.to_box().center());
            assert!(d <= 0.4, "case {i}: center error {d}: {:?} vs {:?}", boxes[0], fp);
            assert!(rotated_iou(&boxes[0], &fp.to_box()) >= 0.5, "case {i}");
        }
    }

    #[test]
    fn detect_is_monotone_in_evidence() {
        let spec = small();
        let (rows, cols) = spec.base_dims();
        let mut base = DenseGrid::zeros(rows, cols, 2, 0);
        for c in 10..20 {
            base.cell_mut(20, c).copy_from_slice(&[0.3, 1.0]);
        }
        let ego = crate::pillars::pool_scales(base, &spec);
        let before = detect(&max_fuse(&ego, &[]), &spec, &DetectorParams::default());
        let mut extra = SparseGrid::empty(0, rows, cols, 2);
        for c in 10..20 {
            extra.push(20, c, &[0.9, 1.0]);
        }
        let after = detect(&max_fuse(&ego, &[vec![extra]]), &spec, &DetectorParams::default());
        assert_eq!(before.len(), 1);
        assert_eq!(after.len(), 1);
        assert!(after[0].confidence > before[0].confidence);
    }

    #[test]
    fn close_range_fit_quality() {
        // 400 poses between 6 and 20 m, all bearings and headings.
        let spec = spec();
        let params = DetectorParams::default();
        let (mut single, mut good, mut center_ok) = (0, 0, 0);
        for i in 0..400usize {
            let r = 6.0 + (i % 8) as f64 * 2.0;
            let bearing = ((i * 37) % 360) as f64 / 360.0 * std::f64::consts::TAU;
            let yaw = ((i * 53) % 360) as f64 / 360.0 * std::f64::consts::TAU;
            let fp = Footprint::new(r * bearing.cos(), r * bearing.sin(), 4.5, 1.8, yaw);
            let mut scene = one_object_scene(fp);
            scene.seed = i as u64;
            let pc = sample_lidar(&scene, 0, 0.0, &SamplerConfig::for_grid(&spec)).unwrap();
            let boxes = detect(&FusedEvidence { grids: build_evidence(&pc, &spec) }, &spec, &params);
            if boxes.len() != 1 {
                continue;
            }
            single += 1;
            good += (rotated_iou(&boxes[0], &fp.to_box()) >= 0.5) as usize;
            center_ok += (boxes[0].center().distance(fp.to_box().center()) <= 0.4) as usize;
        }
        assert!(single >= 360, "single-box rate {single}/400");
        assert!(good >= 350, "IoU >= 0.5 in {good}/400");
        assert!(center_ok >= 340, "center within a cell in {center_ok}/400");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fusion_is_order_invariant_and_idempotent(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
            let spec = small();
            let (rows, cols) = spec.base_dims();
            let ego = crate::pillars::pool_scales(DenseGrid::zeros(rows, cols, 2, 0), &spec);
            let (a, b, c) = (random_sparse(&spec, s1, 40), random_sparse(&spec, s2, 40), random_sparse(&spec, s3, 40));
            let abc = max_fuse(&ego, &[a.clone(), b.clone(), c.clone()]);
            prop_assert_eq!(&abc, &max_fuse(&ego, &[c.clone(), a.clone(), b.clone()]));
            prop_assert_eq!(&abc, &max_fuse(&ego, &[a.clone(), b.clone(), c.clone(), a.clone()]));
            // Associativity: fuse a then fuse the result with the others.
            let partial = max_fuse(&ego, std::slice::from_ref(&a));
            prop_assert_eq!(&abc, &max_fuse(&partial.grids, &[b, c]));
            for (f, e) in abc.grids.iter().zip(&ego) {
                prop_assert!(f.values.iter().zip(&e.values).all(|(x, y)| x >= y && x.is_finite()));
            }
        }

        #[test]
        fn rigid_transform_round_trip_keeps_cells(seed in any::<u64>(), k in 0u8..4) {
            // Quarter turns about the origin map the symmetric grid onto itself.
            let spec = small();
            let grids = random_sparse(&spec, seed, 50);
            let sender = Pose2::new(0.0, 0.0, k as f64 * std::f64::consts::FRAC_PI_2);
            let there = transform_sparse(&grids, &sender, &Pose2::identity(), &spec);
            let back = transform_sparse(&there, &Pose2::identity(), &sender, &spec);
            prop_assert_eq!(back, grids);
        }
    }
}
