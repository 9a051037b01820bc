//! Confidence-aware late fusion of collaborator detections.

use serde::{Deserialize, Serialize};

use crate::geometry::{nms, BevBox, Pose2};
use crate::message::DetectionMessage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LateFusionParams {
    /// Collaborator boxes with confidence strictly below this are dropped.
    pub eps_l: f64,
    /// Multiplier applied to surviving collaborator confidences.
    pub beta: f64,
    pub nms_iou: f64,
    /// Plain merge-then-NMS baseline: requires `eps_l = 0` and `beta = 1`.
    pub naive: bool,
}

impl Default for LateFusionParams {
    fn default() -> Self {
        Self {
            eps_l: 0.3,
            beta: 0.9,
            nms_iou: 0.15,
            naive: false,
        }
    }
}

impl LateFusionParams {
    pub fn naive(nms_iou: f64) -> Self {
        Self {
            eps_l: 0.0,
            beta: 1.0,
            nms_iou,
            naive: true,
        }
    }

    /// Preset for harder domains, with stronger suppression.
    pub fn hard_domain() -> Self {
        Self {
            beta: 0.8,
            ..Self::default()
        }
    }

    /// Returns the name of the first out-of-range field.
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(0.0..=1.0).contains(&self.eps_l) {
            return Err("eps_l");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err("nms_iou");
        }
        if self.naive {
            if self.eps_l != 0.0 {
                return Err("eps_l");
            }
            if self.beta != 1.0 {
                return Err("beta");
            }
        } else if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err("beta");
        }
        Ok(())
    }
}

/// Boxes a collaborator puts on the wire: those at or above `eps_l`.
pub fn sender_filter(boxes: &[BevBox], eps_l: f64) -> Vec<BevBox> {
    boxes.iter().copied().filter(|b| b.confidence >= eps_l).collect()
}

/// Collaborator boxes moved into the ego frame, filtered by `eps_l` on the raw
/// confidence, then scaled by `beta`.
pub fn admitted_boxes(msgs: &[DetectionMessage], ego_pose: &Pose2, params: &LateFusionParams) -> Vec<BevBox> {
    let mut out = Vec::new();
    for msg in msgs {
        let to_ego = Pose2::relative(&msg.pose, ego_pose);
        for b in &msg.boxes {
            if b.confidence < params.eps_l {
                continue;
            }
            let mut t = b.transformed(&to_ego);
            t.source_agent = msg.sender;
            t.confidence *= params.beta;
            out.push(t);
        }
    }
    out
}

/// Merges ego boxes with admitted collaborator boxes and applies NMS. Ego
/// boxes keep their confidence.
pub fn late_fuse(ego_boxes: &[BevBox], collaborator_msgs: &[DetectionMessage], ego_pose: &Pose2, params: &LateFusionParams) -> Vec<BevBox> {
    let mut all = ego_boxes.to_vec();
    all.extend(admitted_boxes(collaborator_msgs, ego_pose, params));
    nms(&all, params.nms_iou)
}

/// Merges every agent's boxes in the frame of `poses[0]` with no filtering or
/// suppression.
pub fn naive_late_fuse(all_boxes: &[Vec<BevBox>], poses: &[Pose2], nms_iou: f64) -> Vec<BevBox> {
    assert_eq!(all_boxes.len(), poses.len(), "one pose per box list");
    let Some(ego_pose) = poses.first() else {
        return Vec::new();
    };
    let mut all = Vec::new();
    for (boxes, pose) in all_boxes.iter().zip(poses) {
        let to_ego = Pose2::relative(pose, ego_pose);
        all.extend(boxes.iter().map(|b| b.transformed(&to_ego)));
    }
    nms(&all, nms_iou)
}
