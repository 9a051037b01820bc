//! End-to-end checks of the round protocol and the experiment harness.

use coperception::eval::{bandwidth_report, SuiteScore};
use coperception::exec::Executor;
use coperception::geometry::{rotated_iou, BevBox};
use coperception::harness::*;
use coperception::message::PayloadKind;
use coperception::protocol::*;
use proptest::prelude::*;

fn best_iou(boxes: &[BevBox], truth: &BevBox) -> f64 {
    boxes.iter().map(|b| rotated_iou(b, truth)).fold(0.0, f64::max)
}

fn suite(family: Family, scenes: usize) -> Vec<SuiteScene> {
    build_suite(&SuiteSpec::only(family, scenes), ExperimentConfig::default().seed).unwrap()
}

#[test]
fn hidden_object_arrives_through_features() {
    let cfg = RoundConfig::default();
    for s in suite(Family::Occlusion, 5) {
        let t = run_round(&s.scene, s.ego, &cfg).unwrap();
        let hidden = t.truths.iter().find(|b| b.source_agent == OCCLUSION_HIDDEN_ID).unwrap();
        assert!(best_iou(&t.ego_only, hidden) < 0.5, "{}", s.scene.label);
        assert!(best_iou(&t.intermediate, hidden) >= 0.5, "{}", s.scene.label);
    }
}

#[test]
fn far_object_arrives_only_through_late_fusion() {
    let s = &suite(Family::LongRange, 5)[4];
    let t = run_round(&s.scene, s.ego, &RoundConfig::default()).unwrap();
    let late_only: Vec<_> = t
        .truths
        .iter()
        .filter(|g| best_iou(&t.ego_only, g) < 0.5 && best_iou(&t.intermediate, g) < 0.5 && best_iou(t.output(), g) >= 0.5)
        .collect();
    assert!(!late_only.is_empty());
    let off = run_round(&s.scene, s.ego, &RoundConfig { late_fusion: false, ..RoundConfig::default() }).unwrap();
    assert_eq!(off.output(), &t.intermediate[..]);
    for g in late_only {
        assert!(best_iou(off.output(), g) < 0.5);
    }
}

#[test]
fn sweep_off_records_match_real_late_off_runs() {
    let mut cfg = ExperimentConfig::default();
    cfg.eps_c_grid = vec![0.05, 0.01];
    let mut scenes = suite(Family::Occlusion, 10);
    scenes.extend(suite(Family::LongRange, 10));
    let records = sweep_epsilon_c(&cfg, &scenes).unwrap();
    assert_eq!(records.len(), 2 * cfg.eps_c_grid.len());
    assert_eq!(records[0].eps_c, 0.01);
    for r in &records {
        let mut run = cfg.clone();
        run.round.eps_c = r.eps_c;
        run.round.late_fusion = r.late_fusion;
        let traces = run_suite(&run, &scenes).unwrap();
        let mut score = SuiteScore::default();
        let mut links = Vec::new();
        for t in &traces {
            score.add_frame(t.output(), &t.truths);
            links.extend(t.byte_reports());
        }
        assert_eq!(score.ap50(), r.ap50, "{r:?}");
        assert_eq!(score.ap70(), r.ap70, "{r:?}");
        assert!((bandwidth_report(&links, cfg.round.rate_hz) - r.mbps).abs() < 1e-12, "{r:?}");
    }
}

#[test]
fn small_suites_are_rejected_by_the_sweep() {
    let scenes = suite(Family::Occlusion, MIN_SWEEP_SCENES - 1);
    let err = sweep_epsilon_c(&ExperimentConfig::default(), &scenes).unwrap_err();
    assert_eq!(err.kind(), "precondition");
}

#[test]
fn ablation_ladder_shrinks_bytes_step_by_step() {
    let rows = run_ablation(&ExperimentConfig::default(), &suite(Family::Occlusion, 3)).unwrap();
    let labels: Vec<_> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["none", "compression", "fp16", "supply", "demand", "late_fusion"]);
    for pair in rows.windows(2).take(4) {
        assert!(pair[1].mbps < pair[0].mbps, "{} -> {}", pair[0].label, pair[1].label);
    }
    assert_eq!(rows[2].value_bytes * 2, rows[1].value_bytes);
    assert_eq!(rows[5].value_bytes, rows[4].value_bytes);
}

#[test]
fn checked_in_scene_fixture_loads() {
    let text = include_str!("fixtures/two_agent_occlusion.json");
    let scene = coperception::scene_sim::Scene::from_json(text).unwrap();
    assert_eq!(scene.agents.len(), 2);
    let t = run_round(&scene, 0, &RoundConfig::default()).unwrap();
    let hidden = t.truths.iter().find(|b| b.source_agent == OCCLUSION_HIDDEN_ID).unwrap();
    assert!(best_iou(&t.ego_only, hidden) < 0.5);
    assert!(best_iou(&t.intermediate, hidden) >= 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bytes_on_the_bus_equal_reported_bytes(index in 0usize..1000, eps_c in 0.0f32..0.2) {
        let cfg = RoundConfig { eps_c, ..RoundConfig::default() };
        let scene = family_scene(Family::DenseUrban, index, 7, &Default::default()).unwrap();
        let mut bus = Bus::recording();
        let t = run_round_with(&scene, 0, &cfg, 0.0, &Executor::sequential(), &mut bus).unwrap();
        prop_assert!(t.links.len() <= cfg.max_collaborators);
        let log = bus.log();
        for link in &t.links {
            let sent = |k| log.iter().filter(|e| e.envelope.from == link.agent && e.envelope.kind == k).map(|e| e.envelope.payload.len()).sum::<usize>();
            prop_assert_eq!(link.bytes.feature_bytes, sent(PayloadKind::Feature));
            prop_assert_eq!(link.bytes.detection_bytes, sent(PayloadKind::Detection));
            prop_assert!(link.selected_cells <= link.supply_cells);
        }
        let again = run_round_with(&scene, 0, &cfg, 0.0, &Executor::new(4), &mut Bus::new()).unwrap();
        prop_assert_eq!(t.to_json(), again.to_json());
    }

    #[test]
    fn config_survives_toml(seed in 0..=MAX_SEED, workers in 1usize..64, eps_c in 0.0f32..1.0, late in any::<bool>()) {
        let mut cfg = ExperimentConfig { seed, workers, ..ExperimentConfig::default() };
        cfg.round.eps_c = eps_c;
        cfg.round.late_fusion = late;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
