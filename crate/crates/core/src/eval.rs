//! Detection scoring and bandwidth accounting.
//!
//! Matching is one-to-one and greedy in detection order. Curves can pool any
//! number of frames; AP is the all-point interpolated area under the
//! precision envelope.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::geometry::{detection_order, rotated_iou, BevBox};
use crate::message::{bytes_to_mbps, ByteReport};

/// Per-agent limit: 27 Mbps shared by four collaborators.
pub const DEFAULT_BUDGET_MBPS: f64 = 27.0 / 4.0;

/// Match outcome of one frame: `(confidence, true positive)` per prediction in
/// detection order, and the number of ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMatches {
    pub scored: Vec<(f64, bool)>,
    pub n_gt: usize,
}

/// Each prediction, highest confidence first, takes the unmatched truth with
/// the highest IoU if that IoU is at least `iou_thresh` (ties to the lower
/// truth index).
pub fn match_frame(predictions: &[BevBox], truths: &[BevBox], iou_thresh: f64) -> FrameMatches {
    let mut preds = predictions.to_vec();
    preds.sort_by(detection_order);
    let mut taken = vec![false; truths.len()];
    let scored = preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = rotated_iou(p, t);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            (p.confidence, best.is_some())
        })
        .collect();
    FrameMatches {
        scored,
        n_gt: truths.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points ordered by decreasing threshold, one per distinct confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
    pub ap: f64,
}

impl PrCurve {
    /// Columns: `threshold,precision,recall`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for p in &self.points {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Pools the frames into one curve. With no ground truth the curve is empty
/// and AP is 0.
pub fn pr_curve(frames: &[FrameMatches]) -> PrCurve {
    let n_gt: usize = frames.iter().map(|f| f.n_gt).sum();
    let mut all: Vec<(f64, bool)> = frames.iter().flat_map(|f| f.scored.iter().copied()).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    if n_gt > 0 {
        let (mut tp, mut seen) = (0usize, 0usize);
        let mut i = 0;
        while i < all.len() {
            let threshold = all[i].0;
            while i < all.len() && all[i].0 == threshold {
                tp += all[i].1 as usize;
                seen += 1;
                i += 1;
            }
            points.push(PrPoint {
                threshold,
                precision: tp as f64 / seen as f64,
                recall: tp as f64 / n_gt as f64,
            });
        }
    }
    let ap = envelope_ap(&points);
    PrCurve { points, n_gt, ap }
}

/// `Σ (r_k - r_{k-1}) · max_{j ≥ k} p_j` over points in decreasing threshold.
fn envelope_ap(points: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (k, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, &e) in points.iter().zip(&envelope) {
        ap += (p.recall - prev) * e;
        prev = p.recall;
    }
    ap
}

pub fn match_and_score(predictions: &[BevBox], truths: &[BevBox], iou_thresh: f64) -> PrCurve {
    pr_curve(&[match_frame(predictions, truths, iou_thresh)])
}

/// Frame-pooled AP at IoU 0.5 and 0.7.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteScore {
    pub at50: Vec<FrameMatches>,
    pub at70: Vec<FrameMatches>,
}

impl SuiteScore {
    pub fn add_frame(&mut self, predictions: &[BevBox], truths: &[BevBox]) {
        self.at50.push(match_frame(predictions, truths, 0.5));
        self.at70.push(match_frame(predictions, truths, 0.7));
    }

    pub fn extend(&mut self, other: SuiteScore) {
        self.at50.extend(other.at50);
        self.at70.extend(other.at70);
    }

    pub fn ap50(&self) -> f64 {
        pr_curve(&self.at50).ap
    }

    pub fn ap70(&self) -> f64 {
        pr_curve(&self.at70).ap
    }
}

/// One operating point of an ε_c sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub eps_c: f32,
    pub late_fusion: bool,
    pub ap50: f64,
    pub ap70: f64,
    pub mbps: f64,
    pub latency_ms: Option<f64>,
}

/// Columns: `eps_c,late_fusion,ap50,ap70,mbps,latency_ms` (empty when absent).
pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["eps_c", "late_fusion", "ap50", "ap70", "mbps", "latency_ms"])?;
    for r in records {
        wtr.write_record([
            r.eps_c.to_string(),
            r.late_fusion.to_string(),
            r.ap50.to_string(),
            r.ap70.to_string(),
            r.mbps.to_string(),
            r.latency_ms.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<SweepRecord>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

/// Mean per-link Mbps over all `(frame, collaborator)` reports; 0 when empty.
pub fn bandwidth_report(reports: &[ByteReport], rate_hz: f64) -> f64 {
    assert!(rate_hz > 0.0, "rate must be positive");
    if reports.is_empty() {
        return 0.0;
    }
    let total: usize = reports.iter().map(ByteReport::total_bytes).sum();
    bytes_to_mbps(total as f64 / reports.len() as f64, rate_hz)
}

/// Boundary-inclusive budget test.
pub fn within_budget(mbps: f64, budget_mbps: f64) -> bool {
    mbps <= budget_mbps
}
