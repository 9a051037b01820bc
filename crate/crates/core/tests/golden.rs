//! Encoders and decoders against the committed byte dumps in `tests/golden`.
//!
//! The dumps are produced by `tests/golden/make_golden.py` straight from the
//! layout in FORMAT.md, so they do not share code with the encoder.

use coperception::geometry::{BevBox, Pose2};
use coperception::grid::{BinaryMask, GridSpec, SparseGrid};
use coperception::message::*;
use half::f16;

fn golden(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    hex::decode(text.split_whitespace().collect::<String>()).unwrap()
}

fn spec() -> GridSpec {
    GridSpec {
        x_range: (0.0, 6.4),
        y_range: (0.0, 3.2),
        cell: 0.4,
        strides: vec![1, 2, 4],
    }
}

fn demand_mask() -> BinaryMask {
    let mut m = BinaryMask::filled(3, 5, 0, false);
    for (r, c) in [(0, 0), (0, 4), (1, 2), (2, 1), (2, 3)] {
        m.set(r, c, true);
    }
    m
}

/// Transmitted scales of the feature dump: channels 4, 8 and 16.
fn feature_scales() -> Vec<SparseGrid> {
    let s = spec();
    let mut grids: Vec<SparseGrid> = [4, 8, 16]
        .iter()
        .enumerate()
        .map(|(l, &k)| {
            let (rows, cols) = s.dims(l);
            SparseGrid::empty(l, rows, cols, k)
        })
        .collect();
    grids[0].push(0, 3, &[0.1, 1.0 / 3.0, 0.0, 0.0]);
    grids[0].push(5, 15, &[1.0, 0.5, 0.0, 0.0]);
    let mut v = vec![0.0; 8];
    v[..2].copy_from_slice(&[0.75, 0.2]);
    grids[1].push(2, 7, &v);
    grids
}

/// The same cells as two-channel evidence, before compression.
fn evidence_selection() -> Vec<SparseGrid> {
    feature_scales()
        .iter()
        .map(|g| {
            let mut e = SparseGrid::empty(g.scale, g.rows, g.cols, 2);
            for ((r, c), v) in g.iter() {
                e.push(r, c, &v[..2]);
            }
            e
        })
        .collect()
}

fn feature_message(precision: ValuePrecision) -> FeatureMessage {
    FeatureMessage {
        sender: 1,
        c0: 16,
        precision,
        pose: Pose2::identity(),
        scales: feature_scales(),
    }
}

fn boxes() -> Vec<BevBox> {
    vec![
        BevBox::new(12.5, -3.25, 4.5, 1.8, 0.125).with_confidence(0.75),
        BevBox::new(-40.0, 7.0, 4.2, 1.7, -3.0).with_confidence(0.3),
    ]
}

/// Distance between two binary16 values in units in the last place.
fn half_ulps(a: f32, b: f32) -> u16 {
    let (a, b) = (f16::from_f32(a), f16::from_f32(b));
    assert!(a.is_sign_positive() && b.is_sign_positive());
    a.to_bits().abs_diff(b.to_bits())
}

#[test]
fn demand_matches_golden_bytes() {
    let bytes = golden("demand_3x5.hex");
    assert_eq!(encode_demand(7, &demand_mask()).unwrap(), bytes);
    let msg = decode_demand(&bytes).unwrap();
    assert_eq!(msg.sender, 7);
    assert_eq!(msg.mask, demand_mask());
    assert_eq!(bytes.len(), demand_len(3, 5));
}

#[test]
fn detections_match_golden_bytes() {
    let bytes = golden("detection_2.hex");
    assert_eq!(encode_detections(2, &boxes()), bytes);
    let msg = decode_detections(&bytes, Pose2::identity()).unwrap();
    assert_eq!(msg.sender, 2);
    for (got, want) in msg.boxes.iter().zip(boxes()) {
        let got = [got.cx, got.cy, got.length, got.width, got.yaw, got.confidence];
        let want = [want.cx, want.cy, want.length, want.width, want.yaw, want.confidence];
        for (g, w) in got.iter().zip(want) {
            assert_eq!(*g, w as f32 as f64);
        }
    }
    // Re-encoding the decoded boxes is bit-exact.
    assert_eq!(encode_detections(2, &msg.boxes), bytes);
}

#[test]
fn half_features_match_golden_bytes() {
    let bytes = golden("feature_half.hex");
    assert_eq!(feature_message(ValuePrecision::Half).encode(), bytes);
    let (_, compressed) =
        encode_feature_message(1, &evidence_selection(), 16, &[64, 128, 256], ValuePrecision::Half, Pose2::identity())
            .unwrap();
    assert_eq!(compressed, bytes);

    let decoded = decode_feature_message(&bytes, Pose2::identity(), &spec()).unwrap();
    assert_eq!(decoded.precision, ValuePrecision::Half);
    assert_eq!(decoded.c0, 16);
    for (got, want) in decoded.scales.iter().zip(feature_scales()) {
        assert_eq!(got.coords, want.coords);
        for (&g, &w) in got.values.iter().zip(&want.values) {
            assert!(half_ulps(g, w) <= 1, "{g} vs {w}");
        }
    }
    assert_eq!(decoded.encode(), bytes);
}

#[test]
fn single_features_match_golden_bytes() {
    let bytes = golden("feature_single.hex");
    let msg = feature_message(ValuePrecision::Single);
    assert_eq!(msg.encode(), bytes);
    assert_eq!(decode_feature_message(&bytes, Pose2::identity(), &spec()).unwrap(), msg);
}

#[test]
fn half_dump_values_are_half_of_single() {
    let half = feature_message(ValuePrecision::Half).size();
    let single = feature_message(ValuePrecision::Single).size();
    assert_eq!(2 * half.values, single.values);
    assert_eq!(golden("feature_single.hex").len() - golden("feature_half.hex").len(), half.values);
}
