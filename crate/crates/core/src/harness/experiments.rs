//! Suite-level experiments: the ε_c sweep, the ablation ladder, the staleness
//! grid and the budget check.
//!
//! Scenes run concurrently on the configured worker count; each scene's work is
//! sequential and results are folded in scene order, so outputs do not depend
//! on the schedule.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::fixtures::SuiteScene;
use super::HarnessError;
use crate::eval::{bandwidth_report, within_budget, SuiteScore, SweepRecord};
use crate::exec::Executor;
use crate::geometry::BevBox;
use crate::message::{ByteReport, ValuePrecision};
use crate::protocol::{exchange, observe, Bus, Observations, RoundConfig, RoundTrace};

/// Minimum suite size for a sweep.
pub const MIN_SWEEP_SCENES: usize = 20;

/// Runs `f` on every scene, concurrently, returning results in scene order.
/// The first failing scene (in order) determines the error.
fn per_scene<R, F>(cfg: &ExperimentConfig, suite: &[SuiteScene], f: F) -> Result<Vec<R>, HarnessError>
where
    R: Send,
    F: Fn(&SuiteScene) -> Result<R, HarnessError> + Sync + Send,
{
    Executor::new(cfg.workers).map(suite, f).into_iter().collect()
}

fn observe_scene(s: &SuiteScene, round: &RoundConfig, staleness_ms: f64) -> Result<Observations, HarnessError> {
    Ok(observe(&s.scene, s.ego, round, staleness_ms, &Executor::sequential())?)
}

fn exchange_scene(obs: &Observations, round: &RoundConfig, s: &SuiteScene) -> Result<RoundTrace, HarnessError> {
    let mut bus = Bus::new();
    bus.set_context(s.scene.seed, s.ego);
    let mut trace = exchange(obs, round, &Executor::sequential(), &mut bus)?;
    trace.scene_seed = s.scene.seed;
    trace.timestamp = s.scene.timestamp;
    Ok(trace)
}

/// Per-frame output kept for aggregation.
struct Frame {
    predictions: Vec<BevBox>,
    truths: Vec<BevBox>,
    links: Vec<ByteReport>,
}

fn aggregate<'a>(frames: impl IntoIterator<Item = &'a Frame>, rate_hz: f64) -> (SuiteScore, f64) {
    let mut score = SuiteScore::default();
    let mut links = Vec::new();
    for f in frames {
        score.add_frame(&f.predictions, &f.truths);
        links.extend_from_slice(&f.links);
    }
    (score, bandwidth_report(&links, rate_hz))
}

fn sorted_grid(grid: &[f32]) -> Vec<f32> {
    let mut g = grid.to_vec();
    g.sort_by(f32::total_cmp);
    g
}

fn without_detections(links: &[ByteReport]) -> Vec<ByteReport> {
    links
        .iter()
        .map(|r| ByteReport {
            detection_bytes: 0,
            ..*r
        })
        .collect()
}

/// One round per scene at the operating point, traces in scene order.
pub fn run_suite(cfg: &ExperimentConfig, suite: &[SuiteScene]) -> Result<Vec<RoundTrace>, HarnessError> {
    cfg.round.validate()?;
    per_scene(cfg, suite, |s| exchange_scene(&observe_scene(s, &cfg.round, 0.0)?, &cfg.round, s))
}

/// AP and mean per-link Mbps for every ε_c in the grid, with late fusion off
/// and on. Records are sorted by ε_c, the late-off record first.
///
/// Each scene is observed once. The late-off record reuses the late-on
/// exchange: its detections are the intermediate ones and its bytes are the
/// feature and demand bytes, which late fusion does not change.
pub fn sweep_epsilon_c(cfg: &ExperimentConfig, suite: &[SuiteScene]) -> Result<Vec<SweepRecord>, HarnessError> {
    cfg.validate()?;
    if suite.len() < MIN_SWEEP_SCENES {
        return Err(HarnessError::Precondition(format!(
            "sweep needs at least {MIN_SWEEP_SCENES} scenes, suite has {}",
            suite.len()
        )));
    }
    let grid = sorted_grid(&cfg.eps_c_grid);
    let per_scene: Vec<Vec<(Frame, Frame)>> = per_scene(cfg, suite, |s| {
        let obs = observe_scene(s, &cfg.round, 0.0)?;
        grid.iter()
            .map(|&eps_c| {
                let round = RoundConfig {
                    eps_c,
                    late_fusion: true,
                    ..cfg.round.clone()
                };
                let trace = exchange_scene(&obs, &round, s)?;
                let links = trace.byte_reports();
                let off = Frame {
                    predictions: trace.intermediate.clone(),
                    truths: trace.truths.clone(),
                    links: without_detections(&links),
                };
                let on = Frame {
                    predictions: trace.output().to_vec(),
                    truths: trace.truths,
                    links,
                };
                Ok((off, on))
            })
            .collect()
    })?;
    let mut records = Vec::with_capacity(grid.len() * 2);
    for (k, &eps_c) in grid.iter().enumerate() {
        for late in [false, true] {
            let frames = per_scene.iter().map(|v| if late { &v[k].1 } else { &v[k].0 });
            let (score, mbps) = aggregate(frames, cfg.round.rate_hz);
            records.push(SweepRecord {
                eps_c,
                late_fusion: late,
                ap50: score.ap50(),
                ap70: score.ap70(),
                mbps,
                latency_ms: None,
            });
        }
    }
    Ok(records)
}

/// One rung of the ablation ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub step: usize,
    pub label: String,
    pub c0: usize,
    pub precision: ValuePrecision,
    pub supply: bool,
    pub demand: bool,
    pub late_fusion: bool,
    pub ap50: f64,
    pub ap70: f64,
    pub mbps: f64,
    /// Feature value bytes summed over all links of the suite.
    pub value_bytes: u64,
    /// Sparse feature entries summed over all links and scales.
    pub cells: u64,
}

/// The six configurations, each adding one module to the previous one:
/// uncompressed full maps, channel compression, 16-bit values, supply mask,
/// demand mask, late fusion.
pub fn ablation_ladder(base: &RoundConfig) -> Vec<(&'static str, RoundConfig)> {
    let none = RoundConfig {
        c0: 1,
        precision: ValuePrecision::Single,
        use_supply: false,
        use_demand: false,
        late_fusion: false,
        ..base.clone()
    };
    let compressed = RoundConfig {
        c0: base.c0,
        ..none.clone()
    };
    let half = RoundConfig {
        precision: ValuePrecision::Half,
        ..compressed.clone()
    };
    let supply = RoundConfig {
        use_supply: true,
        ..half.clone()
    };
    let demand = RoundConfig {
        use_demand: true,
        ..supply.clone()
    };
    let late = RoundConfig {
        late_fusion: true,
        ..demand.clone()
    };
    vec![
        ("none", none),
        ("compression", compressed),
        ("fp16", half),
        ("supply", supply),
        ("demand", demand),
        ("late_fusion", late),
    ]
}

pub fn run_ablation(cfg: &ExperimentConfig, suite: &[SuiteScene]) -> Result<Vec<AblationRow>, HarnessError> {
    cfg.validate()?;
    let ladder = ablation_ladder(&cfg.round);
    for (label, round) in &ladder {
        round
            .validate()
            .map_err(|e| HarnessError::config("round", format!("ablation row {label}: {e}")))?;
    }
    let per_scene: Vec<Vec<Frame>> = per_scene(cfg, suite, |s| {
        let obs = observe_scene(s, &cfg.round, 0.0)?;
        ladder
            .iter()
            .map(|(_, round)| {
                let trace = exchange_scene(&obs, round, s)?;
                Ok(Frame {
                    predictions: trace.output().to_vec(),
                    links: trace.byte_reports(),
                    truths: trace.truths,
                })
            })
            .collect()
    })?;
    Ok(ladder
        .iter()
        .enumerate()
        .map(|(k, (label, round))| {
            let (score, mbps) = aggregate(per_scene.iter().map(|v| &v[k]), round.rate_hz);
            let links = per_scene.iter().flat_map(|v| &v[k].links);
            let (value_bytes, cells) = links.fold((0u64, 0u64), |(b, c), r| {
                (b + r.feature_value_bytes as u64, c + r.feature_cells as u64)
            });
            AblationRow {
                step: k + 1,
                label: label.to_string(),
                c0: round.c0,
                precision: round.precision,
                supply: round.use_supply,
                demand: round.use_demand,
                late_fusion: round.late_fusion,
                ap50: score.ap50(),
                ap70: score.ap70(),
                mbps,
                value_bytes,
                cells,
            }
        })
        .collect())
}

/// Accuracy of the operating point with collaborators observing `latency_ms`
/// late, next to the ego-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub latency_ms: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub mbps: f64,
    pub ego_only_ap50: f64,
    pub ego_only_ap70: f64,
}

pub fn latency_sweep(cfg: &ExperimentConfig, suite: &[SuiteScene]) -> Result<Vec<LatencyRecord>, HarnessError> {
    cfg.validate()?;
    let grid = &cfg.latency_grid_ms;
    let per_scene: Vec<(Frame, Vec<Frame>)> = per_scene(cfg, suite, |s| {
        let mut ego_only = None;
        let frames = grid
            .iter()
            .map(|&latency| {
                let obs = observe_scene(s, &cfg.round, latency)?;
                let trace = exchange_scene(&obs, &cfg.round, s)?;
                // The ego observes at frame time whatever the latency.
                ego_only.get_or_insert_with(|| Frame {
                    predictions: trace.ego_only.clone(),
                    truths: trace.truths.clone(),
                    links: Vec::new(),
                });
                Ok(Frame {
                    predictions: trace.output().to_vec(),
                    links: trace.byte_reports(),
                    truths: trace.truths,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok((ego_only.expect("latency grid is non-empty"), frames))
    })?;
    let (ego_score, _) = aggregate(per_scene.iter().map(|(e, _)| e), cfg.round.rate_hz);
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &latency_ms)| {
            let (score, mbps) = aggregate(per_scene.iter().map(|(_, v)| &v[k]), cfg.round.rate_hz);
            LatencyRecord {
                latency_ms,
                ap50: score.ap50(),
                ap70: score.ap70(),
                mbps,
                ego_only_ap50: ego_score.ap50(),
                ego_only_ap70: ego_score.ap70(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub eps_c: f32,
    pub mbps: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub budget_mbps: f64,
    pub eps_c: f32,
    pub late_fusion: bool,
    /// Mean per-link rate at the operating point.
    pub mbps: f64,
    pub pass: bool,
    /// The operating point if it passes, else the smallest passing grid value.
    pub passing_eps_c: Option<f32>,
    /// Grid rates, evaluated only when the operating point fails.
    pub grid: Vec<BudgetPoint>,
}

/// Mean per-link Mbps of `rounds` (one rate each) on the suite, observing
/// every scene once.
fn suite_rates(cfg: &ExperimentConfig, suite: &[SuiteScene], rounds: &[RoundConfig]) -> Result<Vec<f64>, HarnessError> {
    let per_scene: Vec<Vec<Vec<ByteReport>>> = per_scene(cfg, suite, |s| {
        let obs = observe_scene(s, &cfg.round, 0.0)?;
        rounds
            .iter()
            .map(|r| Ok(exchange_scene(&obs, r, s)?.byte_reports()))
            .collect()
    })?;
    Ok(rounds
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let links: Vec<ByteReport> = per_scene.iter().flat_map(|v| v[k].iter().copied()).collect();
            bandwidth_report(&links, r.rate_hz)
        })
        .collect())
}

pub fn check_budget(cfg: &ExperimentConfig, suite: &[SuiteScene]) -> Result<BudgetReport, HarnessError> {
    cfg.validate()?;
    let mbps = suite_rates(cfg, suite, std::slice::from_ref(&cfg.round))?[0];
    let pass = within_budget(mbps, cfg.budget_mbps);
    let mut report = BudgetReport {
        budget_mbps: cfg.budget_mbps,
        eps_c: cfg.round.eps_c,
        late_fusion: cfg.round.late_fusion,
        mbps,
        pass,
        passing_eps_c: pass.then_some(cfg.round.eps_c),
        grid: Vec::new(),
    };
    if !pass {
        let grid = sorted_grid(&cfg.eps_c_grid);
        let rounds: Vec<RoundConfig> = grid
            .iter()
            .map(|&eps_c| RoundConfig {
                eps_c,
                ..cfg.round.clone()
            })
            .collect();
        let rates = suite_rates(cfg, suite, &rounds)?;
        report.grid = grid
            .iter()
            .zip(rates)
            .map(|(&eps_c, mbps)| BudgetPoint {
                eps_c,
                mbps,
                pass: within_budget(mbps, cfg.budget_mbps),
            })
            .collect();
        report.passing_eps_c = report.grid.iter().find(|p| p.pass).map(|p| p.eps_c);
    }
    Ok(report)
}

/// Columns: `step,label,c0,precision,supply,demand,late_fusion,ap50,ap70,mbps,value_bytes,cells`.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> csv::Result<()> {
    write_rows(rows, w)
}

/// Columns: `latency_ms,ap50,ap70,mbps,ego_only_ap50,ego_only_ap70`.
pub fn write_latency_csv<W: Write>(rows: &[LatencyRecord], w: W) -> csv::Result<()> {
    write_rows(rows, w)
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
