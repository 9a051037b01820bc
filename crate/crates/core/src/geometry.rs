//! Planar rigid transforms, oriented BEV boxes, rotated IoU and NMS.
//!
//! Everything here is a pure function over `Copy` values. IoU is computed on
//! the ground plane only: the intersection of two oriented rectangles is found
//! by Sutherland–Hodgman clipping of one corner polygon against the other's
//! edges, which is exact for convex quadrilaterals.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Identifier of a collaborating agent.
pub type AgentId = u32;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn scale(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Rigid planar pose: maps points from the local frame it defines into the
/// parent frame, `p ↦ R(yaw)·p + (x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    /// Heading in `(-π, π]`.
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    fn rotate(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(c * p.x - s * p.y, s * p.x + c * p.y)
    }

    /// Local → parent.
    pub fn transform_point(&self, p: Point2) -> Point2 {
        self.rotate(p) + self.translation()
    }

    /// Parent → local.
    pub fn inverse_transform_point(&self, p: Point2) -> Point2 {
        let d = p - self.translation();
        let (s, c) = self.yaw.sin_cos();
        Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.transform_point(other.translation());
        Pose2::new(t.x, t.y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2 {
        let t = self.rotate_inverse(self.translation());
        Pose2::new(-t.x, -t.y, -self.yaw)
    }

    fn rotate_inverse(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(c * p.x + s * p.y, -s * p.x + c * p.y)
    }

    /// Pose that maps points expressed in `from`'s frame into `to`'s frame,
    /// both poses being given in a common world frame.
    pub fn relative(from: &Pose2, to: &Pose2) -> Pose2 {
        to.inverse().compose(from)
    }
}

/// Free function form of [`Pose2::transform_point`].
pub fn transform_point(pose: &Pose2, p: Point2) -> Point2 {
    pose.transform_point(p)
}

/// Oriented bird's-eye-view box with a detection confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub confidence: f64,
    pub source_agent: AgentId,
}

impl BevBox {
    /// Panics if the extents are not positive or the confidence leaves `[0, 1]`.
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        let b = Self {
            cx,
            cy,
            length,
            width,
            yaw: normalize_angle(yaw),
            confidence: 1.0,
            source_agent: 0,
        };
        assert!(b.is_valid(), "invalid box extents: {length} x {width}");
        b
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&confidence),
            "confidence {confidence} outside [0, 1]"
        );
        self.confidence = confidence;
        self
    }

    pub fn with_source(mut self, agent: AgentId) -> Self {
        self.source_agent = agent;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.length > 0.0
            && self.width > 0.0
            && self.length.is_finite()
            && self.width.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite()
            && (0.0..=1.0).contains(&self.confidence)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Half the diagonal; any point of the box lies within this distance of the center.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Corners in counter-clockwise order, starting at the front-right corner.
    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)].map(|(lx, ly)| {
            Point2::new(self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)
        })
    }

    pub fn contains(&self, p: Point2) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center();
        let u = c * d.x + s * d.y;
        let v = -s * d.x + c * d.y;
        u.abs() <= 0.5 * self.length && v.abs() <= 0.5 * self.width
    }

    /// Re-expresses a box given in `pose`'s local frame in `pose`'s parent frame.
    pub fn transformed(&self, pose: &Pose2) -> BevBox {
        let c = pose.transform_point(self.center());
        BevBox {
            cx: c.x,
            cy: c.y,
            yaw: normalize_angle(self.yaw + pose.yaw),
            ..*self
        }
    }

    fn same_geometry(&self, other: &BevBox) -> bool {
        self.cx == other.cx
            && self.cy == other.cy
            && self.length == other.length
            && self.width == other.width
            && self.yaw == other.yaw
    }

    fn geometry_key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.length, self.width, self.yaw]
    }
}

/// Ranking used by NMS and evaluation: descending confidence, then lower
/// source agent, then lower `cx`, then lower `cy`.
pub fn detection_order(a: &BevBox, b: &BevBox) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.source_agent.cmp(&b.source_agent))
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i].cross(poly[j]);
    }
    0.5 * acc.abs()
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let side = |p: Point2| edge.cross(p - a);
        let input = std::mem::take(&mut output);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(segment_line_intersection(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(segment_line_intersection(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn segment_line_intersection(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    p + (q - p).scale(t)
}

/// Area of the overlap of two oriented boxes.
pub fn intersection_area(a: &BevBox, b: &BevBox) -> f64 {
    if a.center().distance(b.center()) > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    // Clip in a canonical argument order so the result is bit-symmetric.
    let (p, q) = if a.geometry_key() <= b.geometry_key() {
        (a, b)
    } else {
        (b, a)
    };
    polygon_area(&clip_convex(&p.corners(), &q.corners()))
}

/// Rotated bird's-eye-view IoU in `[0, 1]`.
pub fn rotated_iou(a: &BevBox, b: &BevBox) -> f64 {
    if a.same_geometry(b) {
        return 1.0;
    }
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. A box survives iff its IoU with every
/// previously kept box is below `iou_threshold`.
pub fn nms(boxes: &[BevBox], iou_threshold: f64) -> Vec<BevBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<BevBox> = Vec::with_capacity(sorted.len());
    for candidate in sorted {
        if kept
            .iter()
            .all(|k| rotated_iou(k, &candidate) < iou_threshold)
        {
            kept.push(candidate);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn transform_point_examples() {
        let p = Pose2::identity().transform_point(Point2::new(3.0, 4.0));
        assert_eq!(p, Point2::new(3.0, 4.0));

        let p = Pose2::new(0.0, 0.0, PI / 2.0).transform_point(Point2::new(1.0, 0.0));
        assert!(close(p.x, 0.0, 1e-12) && close(p.y, 1.0, 1e-12));

        // R(π)·(1, 1) = (-1, -1); plus (10, -2).
        let p = Pose2::new(10.0, -2.0, PI).transform_point(Point2::new(1.0, 1.0));
        assert!(close(p.x, 9.0, 1e-12) && close(p.y, -3.0, 1e-12));
    }

    #[test]
    fn yaw_normalized_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert!(close(normalize_angle(-PI), PI, 1e-15));
        assert!(close(normalize_angle(3.0 * PI), PI, 1e-12));
        let p = Pose2::new(0.0, 0.0, 3.0).compose(&Pose2::new(0.0, 0.0, 3.0));
        assert!(p.yaw > -PI && p.yaw <= PI);
    }

    #[test]
    fn corners_are_counter_clockwise() {
        let b = BevBox::new(1.0, 2.0, 4.0, 2.0, 0.3);
        let c = b.corners();
        let mut signed = 0.0;
        for i in 0..4 {
            signed += c[i].cross(c[(i + 1) % 4]);
        }
        assert!(signed > 0.0);
        assert!(close(0.5 * signed, 8.0, 1e-12));
    }

    #[test]
    fn iou_examples() {
        let a = BevBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &a), 1.0);

        let b = BevBox::new(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!(close(rotated_iou(&a, &b), 1.0 / 3.0, 1e-12));

        // Octagon overlap: area 2(√2−1), IoU √2/2 (Monte-Carlo oracle: 0.70734).
        let r = BevBox::new(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        assert!(close(intersection_area(&a, &r), 2.0 * (2f64.sqrt() - 1.0), 1e-12));
        assert!(close(rotated_iou(&a, &r), 2f64.sqrt() / 2.0, 1e-12));

        let far = BevBox::new(10.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &far), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.15).is_empty());

        let hi = BevBox::new(0.0, 0.0, 4.0, 2.0, 0.0).with_confidence(0.9);
        let lo = hi.with_confidence(0.6);
        let kept = nms(&[lo, hi], 0.15);
        assert_eq!(kept, vec![hi]);

        let row: Vec<BevBox> = (0..3)
            .map(|i| BevBox::new(5.0 * i as f64, 0.0, 4.0, 2.0, 0.0).with_confidence(0.5))
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(rotated_iou(&row[i], &row[j]), 0.0);
                }
            }
        }
        assert_eq!(nms(&row, 0.15).len(), 3);
    }

    #[test]
    fn nms_ties_break_on_agent_then_position() {
        let a = BevBox::new(0.0, 0.0, 4.0, 2.0, 0.0)
            .with_confidence(0.7)
            .with_source(2);
        let b = BevBox::new(0.3, 0.0, 4.0, 2.0, 0.0)
            .with_confidence(0.7)
            .with_source(1);
        assert_eq!(nms(&[a, b], 0.15), vec![b]);
        let c = BevBox::new(-0.3, 0.0, 4.0, 2.0, 0.0)
            .with_confidence(0.7)
            .with_source(1);
        assert_eq!(nms(&[a, b, c], 0.15), vec![c]);
    }

    fn arb_box() -> impl Strategy<Value = BevBox> {
        (
            -5.0..5.0f64,
            -5.0..5.0f64,
            0.2..6.0f64,
            0.2..3.0f64,
            -PI..PI,
            0.0..=1.0f64,
        )
            .prop_map(|(x, y, l, w, yaw, c)| BevBox::new(x, y, l, w, yaw).with_confidence(c))
    }

    fn arb_pose() -> impl Strategy<Value = Pose2> {
        (-50.0..50.0f64, -50.0..50.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = rotated_iou(&a, &b);
            prop_assert_eq!(ab, rotated_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(rotated_iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_rigid_invariant(a in arb_box(), b in arb_box(), pose in arb_pose()) {
            let before = rotated_iou(&a, &b);
            let after = rotated_iou(&a.transformed(&pose), &b.transformed(&pose));
            prop_assert!((before - after).abs() <= 1e-9);
        }

        #[test]
        fn pose_round_trip(pose in arb_pose(), x in -100.0..100.0f64, y in -100.0..100.0f64) {
            let p = Point2::new(x, y);
            let back = pose.inverse_transform_point(pose.transform_point(p));
            prop_assert!(back.distance(p) <= 1e-9);
            let q = pose.inverse().transform_point(pose.transform_point(p));
            prop_assert!(q.distance(p) <= 1e-9);
            let id = pose.compose(&pose.inverse());
            prop_assert!(id.x.abs() <= 1e-9 && id.y.abs() <= 1e-9 && id.yaw.abs() <= 1e-9);
        }

        #[test]
        fn nms_subset_sorted_idempotent(boxes in proptest::collection::vec(arb_box(), 0..12), thr in 0.05..0.95f64) {
            let kept = nms(&boxes, thr);
            for k in &kept {
                prop_assert!(boxes.contains(k));
            }
            for w in kept.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            prop_assert_eq!(nms(&kept, thr), kept);
        }
    }
}
