//! One collaboration round per frame, the in-process message bus, and the
//! latency model.
//!
//! A round runs in two phases. [`observe`] samples every participating agent
//! and derives its evidence, density, confidence and single-agent boxes.
//! [`exchange`] then plays the two communication rounds: the ego broadcasts
//! its demand mask, every collaborator answers with a feature payload and a
//! detection payload, and the ego decodes, fuses and detects. Observations do
//! not depend on the exchange settings, so sweeps observe once and exchange
//! per operating point.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Executor;
use crate::fusion::{detect, max_fuse, transform_sparse, DetectorParams, FusedEvidence};
use crate::geometry::{nms, AgentId, BevBox, Pose2};
use crate::grid::{BinaryMask, DenseGrid, GridSpec};
use crate::late_fusion::{late_fuse, naive_late_fuse, sender_filter, LateFusionParams};
use crate::message::{
    decode_demand, decode_detections, decode_feature_message, encode_demand, encode_detections, peek_header,
    ByteReport, FeatureMessage, MessageError, PayloadKind, ValuePrecision,
};
use crate::pillars::{build_evidence, confidence_map, rasterize_density, ConfidenceMap, DensityMap};
use crate::scene_sim::{sample_lidar_with_stream, stream_seed, SamplerConfig, Scene, SceneError};
use crate::supply_demand::{demand_mask, select_sparse, selection_mask, supply_mask, warp_mask};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {reason}")]
    Log { line: usize, reason: String },
}

/// Stage times in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyProfile {
    pub t_backbone_ms: f64,
    pub t_demand_gen_ms: f64,
    pub t_supply_gen_ms: f64,
    /// One communication round.
    pub t_comm_ms: f64,
    /// Decode, fuse and detect after the last round.
    pub t_downstream_ms: f64,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            t_backbone_ms: 15.0,
            t_demand_gen_ms: 1.0,
            t_supply_gen_ms: 3.0,
            t_comm_ms: 20.0,
            t_downstream_ms: 0.0,
        }
    }
}

impl LatencyProfile {
    pub fn zero() -> Self {
        Self {
            t_backbone_ms: 0.0,
            t_demand_gen_ms: 0.0,
            t_supply_gen_ms: 0.0,
            t_comm_ms: 0.0,
            t_downstream_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        for (name, v) in [
            ("t_backbone_ms", self.t_backbone_ms),
            ("t_demand_gen_ms", self.t_demand_gen_ms),
            ("t_supply_gen_ms", self.t_supply_gen_ms),
            ("t_comm_ms", self.t_comm_ms),
            ("t_downstream_ms", self.t_downstream_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }
}

/// Critical path of the two-round exchange. The collaborator's backbone and
/// supply generation overlap with the ego's demand generation and the demand
/// round; the feature round follows both.
pub fn total_latency(p: &LatencyProfile) -> f64 {
    (p.t_backbone_ms + p.t_supply_gen_ms).max(p.t_demand_gen_ms + p.t_comm_ms) + p.t_comm_ms + p.t_downstream_ms
}

/// The same pipeline without the demand round.
pub fn single_round_latency(p: &LatencyProfile) -> f64 {
    p.t_backbone_ms + p.t_supply_gen_ms + p.t_comm_ms + p.t_downstream_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub total_ms: f64,
    pub single_round_ms: f64,
    pub demand_round_overhead_ms: f64,
    /// Age of collaborator observations relative to the ego frame.
    pub staleness_ms: f64,
}

impl LatencyBreakdown {
    pub fn new(profile: &LatencyProfile, staleness_ms: f64) -> Self {
        let total_ms = total_latency(profile);
        let single_round_ms = single_round_latency(profile);
        Self {
            total_ms,
            single_round_ms,
            demand_round_overhead_ms: total_ms - single_round_ms,
            staleness_ms,
        }
    }
}

/// Settings of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub grid: GridSpec,
    pub rays: usize,
    pub eps_a: f32,
    pub eps_c: f32,
    pub c0: usize,
    /// Nominal feature channels per scale before compression.
    pub nominal_channels: Vec<usize>,
    pub precision: ValuePrecision,
    pub use_supply: bool,
    pub use_demand: bool,
    pub late_fusion: bool,
    pub late: LateFusionParams,
    pub detector: DetectorParams,
    pub max_collaborators: usize,
    pub rate_hz: f64,
    pub latency: LatencyProfile,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            rays: 1440,
            eps_a: 4.0 / 32.0,
            eps_c: 0.01,
            c0: 16,
            nominal_channels: vec![64, 128, 256],
            precision: ValuePrecision::Half,
            use_supply: true,
            use_demand: true,
            late_fusion: true,
            late: LateFusionParams::default(),
            detector: DetectorParams::default(),
            max_collaborators: 4,
            rate_hz: 10.0,
            latency: LatencyProfile::default(),
        }
    }
}

impl RoundConfig {
    /// Checks every field; the error names the offending key.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |key: &str, why: String| Err(ProtocolError::Config(format!("{key}: {why}")));
        if let Err(e) = self.grid.validate() {
            return bad("grid", e.to_string());
        }
        if self.rays == 0 {
            return bad("rays", "must be positive".into());
        }
        if !(self.eps_a > 0.0 && self.eps_a <= 1.0) {
            return bad("eps_a", format!("{} not in (0, 1]", self.eps_a));
        }
        if !(0.0..=1.0).contains(&self.eps_c) {
            return bad("eps_c", format!("{} not in [0, 1]", self.eps_c));
        }
        if self.nominal_channels.len() != self.grid.num_scales() {
            return bad(
                "nominal_channels",
                format!("{} entries for {} scales", self.nominal_channels.len(), self.grid.num_scales()),
            );
        }
        if self.c0 == 0 || self.c0 > u8::MAX as usize {
            return bad("c0", format!("{} not in [1, 255]", self.c0));
        }
        if let Some(&c) = self.nominal_channels.iter().find(|&&c| c % self.c0 != 0 || c / self.c0 == 0) {
            return bad("c0", format!("does not divide nominal channel count {c}"));
        }
        if let Err(k) = self.late.validate() {
            return bad(&format!("late.{k}"), "out of range".into());
        }
        if let Err(k) = self.detector.validate() {
            return bad(&format!("detector.{k}"), "out of range".into());
        }
        if !(1..=4).contains(&self.max_collaborators) {
            return bad("max_collaborators", format!("{} not in [1, 4]", self.max_collaborators));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad("rate_hz", "must be positive".into());
        }
        if let Err(k) = self.latency.validate() {
            return bad(&format!("latency.{k}"), "must be non-negative".into());
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            rays: self.rays,
            ..SamplerConfig::for_grid(&self.grid)
        }
    }
}

/// Everything one agent derives from its own sweep.
#[derive(Debug, Clone)]
pub struct AgentObservation {
    pub id: AgentId,
    pub pose: Pose2,
    pub evidence: Vec<DenseGrid>,
    pub density: DensityMap,
    pub confidence: ConfidenceMap,
    /// Single-agent detector output in the agent's frame.
    pub detections: Vec<BevBox>,
    /// Spurious boxes the scene injects into this agent's reported output.
    pub injected: Vec<BevBox>,
}

impl AgentObservation {
    /// Boxes the agent reports to others: detector output plus injected ones.
    pub fn reported(&self) -> Vec<BevBox> {
        self.detections.iter().chain(&self.injected).copied().collect()
    }
}

/// Sampling, rasterization and single-agent detection for one agent.
///
/// Geometry is taken at `t_obs`; the RNG stream is keyed to the frame time so
/// a stale observation of a static scene equals a fresh one.
pub fn observe_agent(scene: &Scene, id: AgentId, t_obs: f64, cfg: &RoundConfig) -> Result<AgentObservation, ProtocolError> {
    let pose = scene.pose_at(id, t_obs)?;
    let stream = stream_seed(scene.seed, id, scene.timestamp);
    let pc = sample_lidar_with_stream(scene, id, t_obs, &cfg.sampler(), stream)?;
    let evidence = build_evidence(&pc, &cfg.grid);
    let density = rasterize_density(&pc, &cfg.grid);
    let confidence = confidence_map(&evidence);
    let detections: Vec<BevBox> = detect(&FusedEvidence { grids: evidence.clone() }, &cfg.grid, &cfg.detector)
        .into_iter()
        .map(|b| b.with_source(id))
        .collect();
    let injected = scene
        .injected_detections
        .iter()
        .filter(|d| d.agent == id)
        .map(|d| d.detection.with_source(id))
        .collect();
    Ok(AgentObservation {
        id,
        pose,
        evidence,
        density,
        confidence,
        detections,
        injected,
    })
}

/// Up to `max` other agents, nearest to the ego first, ties by id.
pub fn select_collaborators(scene: &Scene, ego: AgentId, t: f64, max: usize) -> Result<Vec<AgentId>, ProtocolError> {
    let ego_pose = scene.pose_at(ego, t)?;
    let mut others: Vec<(f64, AgentId)> = scene
        .agents
        .iter()
        .filter(|a| a.id != ego)
        .map(|a| (a.pose_at(t).translation().distance(ego_pose.translation()), a.id))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(others.into_iter().take(max).map(|(_, id)| id).collect())
}

/// Observations of the ego and its collaborators for one frame.
#[derive(Debug, Clone)]
pub struct Observations {
    pub ego: AgentObservation,
    pub collaborators: Vec<AgentObservation>,
    pub truths: Vec<BevBox>,
    pub staleness_ms: f64,
}

/// Observes the ego at the frame time and collaborators `staleness_ms` earlier.
pub fn observe(scene: &Scene, ego: AgentId, cfg: &RoundConfig, staleness_ms: f64, exec: &Executor) -> Result<Observations, ProtocolError> {
    if !(staleness_ms >= 0.0 && staleness_ms.is_finite()) {
        return Err(ProtocolError::Config(format!("latency_ms: {staleness_ms} must be non-negative")));
    }
    let t = scene.timestamp;
    let t_collab = t - staleness_ms / 1000.0;
    let collab_ids = select_collaborators(scene, ego, t, cfg.max_collaborators)?;
    let mut jobs = vec![(ego, t)];
    jobs.extend(collab_ids.iter().map(|&id| (id, t_collab)));
    let mut obs = exec
        .map(&jobs, |&(id, time)| observe_agent(scene, id, time, cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let ego_obs = obs.remove(0);
    Ok(Observations {
        ego: ego_obs,
        collaborators: obs,
        truths: scene.truth_boxes(ego, t, &cfg.grid)?,
        staleness_ms,
    })
}

/// A payload in transit. Poses ride in the envelope, outside the counted bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: AgentId,
    /// `None` broadcasts to every other agent.
    pub to: Option<AgentId>,
    pub kind: PayloadKind,
    pub pose: Pose2,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

/// One line of a recorded wire log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub scene_seed: u64,
    pub ego: AgentId,
    pub seq: u64,
    #[serde(flatten)]
    pub envelope: Envelope,
}

/// In-process bus. Delivery preserves global post order, hence per-sender order.
#[derive(Debug, Default)]
pub struct Bus {
    posted: Vec<(u64, Envelope)>,
    next_seq: u64,
    recording: Option<Vec<LogEntry>>,
    context: (u64, AgentId),
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bus that keeps a copy of every envelope for [`Bus::write_log`].
    pub fn recording() -> Self {
        Self {
            recording: Some(Vec::new()),
            ..Self::default()
        }
    }

    /// Tags subsequent log entries with the round they belong to.
    pub fn set_context(&mut self, scene_seed: u64, ego: AgentId) {
        self.context = (scene_seed, ego);
    }

    pub fn post(&mut self, env: Envelope) {
        let seq = self.next_seq;
        self.next_seq += 1;
        if let Some(log) = &mut self.recording {
            log.push(LogEntry {
                scene_seed: self.context.0,
                ego: self.context.1,
                seq,
                envelope: env.clone(),
            });
        }
        self.posted.push((seq, env));
    }

    /// Removes and returns everything addressed to `receiver`, in post order.
    pub fn drain(&mut self, receiver: AgentId) -> Vec<Envelope> {
        let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.posted)
            .into_iter()
            .partition(|(_, e)| e.to == Some(receiver) || (e.to.is_none() && e.from != receiver));
        // Broadcasts stay available to other receivers.
        self.posted = rest;
        self.posted.extend(mine.iter().filter(|(_, e)| e.to.is_none()).cloned());
        self.posted.sort_by_key(|(s, _)| *s);
        mine.into_iter().map(|(_, e)| e).collect()
    }

    pub fn log(&self) -> &[LogEntry] {
        self.recording.as_deref().unwrap_or(&[])
    }

    /// JSON lines, one envelope each, payloads hex encoded.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<(), ProtocolError> {
        for entry in self.log() {
            serde_json::to_writer(&mut w, entry).map_err(|e| ProtocolError::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogEntry>, ProtocolError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ProtocolError::Log {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_log_file(path: &Path) -> Result<Vec<LogEntry>, ProtocolError> {
    read_log(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Per-collaborator record of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTrace {
    pub agent: AgentId,
    pub bytes: ByteReport,
    /// Base-scale cells in the supply, warped demand and selection masks.
    pub supply_cells: usize,
    pub demand_cells: usize,
    pub selected_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub scene_seed: u64,
    pub ego: AgentId,
    pub timestamp: f64,
    pub links: Vec<LinkTrace>,
    /// Detections from the ego's own evidence alone.
    pub ego_only: Vec<BevBox>,
    /// Detections on max-fused evidence.
    pub intermediate: Vec<BevBox>,
    /// Present iff late fusion is enabled.
    pub final_detections: Option<Vec<BevBox>>,
    pub truths: Vec<BevBox>,
    pub latency: LatencyBreakdown,
    pub warnings: Vec<String>,
}

impl RoundTrace {
    /// What the round reports as its output: final detections when late
    /// fusion ran, intermediate ones otherwise.
    pub fn output(&self) -> &[BevBox] {
        self.final_detections.as_deref().unwrap_or(&self.intermediate)
    }

    pub fn byte_reports(&self) -> Vec<ByteReport> {
        self.links.iter().map(|l| l.bytes).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// What one collaborator puts on the bus in reply to the demand broadcast.
fn collaborator_reply(
    obs: &AgentObservation,
    demand: Option<&(BinaryMask, Pose2)>,
    cfg: &RoundConfig,
) -> Result<(Vec<Envelope>, LinkTrace), ProtocolError> {
    let (rows, cols) = cfg.grid.base_dims();
    let supply = if cfg.use_supply {
        supply_mask(&obs.confidence, cfg.eps_c)
    } else {
        BinaryMask::filled(rows, cols, 0, true)
    };
    let demand_here = match demand {
        Some((mask, ego_pose)) => warp_mask(mask, ego_pose, &obs.pose, &cfg.grid),
        None => BinaryMask::filled(rows, cols, 0, true),
    };
    let selection = selection_mask(&demand_here, &supply);
    let sparse = select_sparse(&obs.evidence, &selection, &cfg.grid);
    let msg = FeatureMessage::from_selection(obs.id, &sparse, cfg.c0, &cfg.nominal_channels, cfg.precision, obs.pose)?;
    let size = msg.size();
    let feature = msg.encode();
    debug_assert_eq!(feature.len(), size.total());
    let mut bytes = ByteReport {
        feature_bytes: feature.len(),
        feature_value_bytes: size.values,
        feature_cells: size.cells,
        ..ByteReport::default()
    };
    let mut out = vec![Envelope {
        from: obs.id,
        to: None,
        kind: PayloadKind::Feature,
        pose: obs.pose,
        payload: feature,
    }];
    if cfg.late_fusion {
        let boxes = if cfg.late.naive {
            obs.reported()
        } else {
            sender_filter(&obs.reported(), cfg.late.eps_l)
        };
        let det = encode_detections(obs.id, &boxes);
        bytes.detection_bytes = det.len();
        out.push(Envelope {
            from: obs.id,
            to: None,
            kind: PayloadKind::Detection,
            pose: obs.pose,
            payload: det,
        });
    }
    Ok((
        out,
        LinkTrace {
            agent: obs.id,
            bytes,
            supply_cells: supply.count_true(),
            demand_cells: demand_here.count_true(),
            selected_cells: selection.count_true(),
        },
    ))
}

/// Both communication rounds and the ego-side fusion on prepared observations.
pub fn exchange(obs: &Observations, cfg: &RoundConfig, exec: &Executor, bus: &mut Bus) -> Result<RoundTrace, ProtocolError> {
    let ego = &obs.ego;

    // Round 1: the ego broadcasts its demand mask.
    let mut demand_len = 0;
    if cfg.use_demand && !obs.collaborators.is_empty() {
        let payload = encode_demand(ego.id, &demand_mask(&ego.density, cfg.eps_a))?;
        demand_len = payload.len();
        bus.post(Envelope {
            from: ego.id,
            to: None,
            kind: PayloadKind::Demand,
            pose: ego.pose,
            payload,
        });
    }

    // Round 2: collaborators answer. Each reads its own inbox, computes in
    // parallel, and posts in collaborator order.
    let inboxes: Vec<Vec<Envelope>> = obs.collaborators.iter().map(|c| bus.drain(c.id)).collect();
    let mut warnings = Vec::new();
    let replies = exec.map_range(obs.collaborators.len(), |i| {
        let c = &obs.collaborators[i];
        let demand = match inboxes[i].iter().find(|e| e.kind == PayloadKind::Demand) {
            Some(e) => Some((decode_demand(&e.payload)?.mask, e.pose)),
            None => None,
        };
        collaborator_reply(c, demand.as_ref(), cfg)
    });
    let mut links = Vec::new();
    for (c, reply) in obs.collaborators.iter().zip(replies) {
        match reply {
            Ok((envs, mut link)) => {
                if cfg.use_demand {
                    link.bytes.demand_bytes = demand_len;
                }
                for e in envs {
                    bus.post(e);
                }
                links.push(link);
            }
            Err(e) => warnings.push(format!("collaborator {} skipped: {e}", c.id)),
        }
    }
    let mut trace = fuse_at_ego(obs, &bus.drain(ego.id), cfg, links)?;
    trace.warnings.splice(0..0, warnings);
    Ok(trace)
}

/// Ego side of round 2: decode, re-bin, max-fuse, detect, late-fuse.
/// Undecodable payloads skip their sender with a warning.
pub fn fuse_at_ego(obs: &Observations, inbox: &[Envelope], cfg: &RoundConfig, links: Vec<LinkTrace>) -> Result<RoundTrace, ProtocolError> {
    let ego = &obs.ego;
    let mut warnings = Vec::new();
    let mut received = Vec::new();
    let mut det_msgs = Vec::new();
    let mut skipped: Vec<AgentId> = Vec::new();
    let mut features: BTreeMap<AgentId, Vec<_>> = BTreeMap::new();
    for env in inbox {
        if skipped.contains(&env.from) {
            continue;
        }
        let result = match env.kind {
            PayloadKind::Feature => decode_feature_message(&env.payload, env.pose, &cfg.grid).map(|m| {
                features.insert(env.from, transform_sparse(&m.scales, &m.pose, &ego.pose, &cfg.grid));
            }),
            PayloadKind::Detection => decode_detections(&env.payload, env.pose).map(|m| det_msgs.push(m)),
            PayloadKind::Demand => Ok(()),
        };
        if let Err(e) = result {
            warnings.push(format!("collaborator {} skipped: {e}", env.from));
            skipped.push(env.from);
            features.remove(&env.from);
            det_msgs.retain(|m| m.sender != env.from);
        }
    }
    // Fuse in collaborator order; max fusion is order-free anyway.
    for c in &obs.collaborators {
        if let Some(f) = features.remove(&c.id) {
            received.push(f);
        }
    }
    // Boxes whose centers fall outside the ego's BEV range are not the ego's
    // to report, exactly like truths outside it are not scored.
    for m in &mut det_msgs {
        let to_ego = Pose2::relative(&m.pose, &ego.pose);
        m.boxes.retain(|b| cfg.grid.contains(to_ego.transform_point(b.center())));
    }
    let relabel = |v: Vec<BevBox>| -> Vec<BevBox> { v.into_iter().map(|b| b.with_source(ego.id)).collect() };
    let ego_only = ego.detections.clone();
    // Late fusion reruns NMS over its whole input, so the intermediate list is
    // made NMS-clean up front; toggling late fusion then only adds or
    // suppresses collaborator boxes.
    let intermediate = nms(&relabel(detect(&max_fuse(&ego.evidence, &received), &cfg.grid, &cfg.detector)), cfg.late.nms_iou);
    let final_detections = cfg.late_fusion.then(|| {
        if cfg.late.naive {
            let mut lists = vec![intermediate.clone()];
            let mut poses = vec![ego.pose];
            for m in &det_msgs {
                lists.push(m.boxes.clone());
                poses.push(m.pose);
            }
            naive_late_fuse(&lists, &poses, cfg.late.nms_iou)
        } else {
            late_fuse(&intermediate, &det_msgs, &ego.pose, &cfg.late)
        }
    });
    Ok(RoundTrace {
        scene_seed: 0,
        ego: ego.id,
        timestamp: 0.0,
        links,
        ego_only,
        intermediate,
        final_detections,
        truths: obs.truths.clone(),
        latency: LatencyBreakdown::new(&cfg.latency, obs.staleness_ms),
        warnings,
    })
}

fn stamp(mut trace: RoundTrace, scene: &Scene) -> RoundTrace {
    trace.scene_seed = scene.seed;
    trace.timestamp = scene.timestamp;
    trace
}

pub fn run_round(scene: &Scene, ego: AgentId, cfg: &RoundConfig) -> Result<RoundTrace, ProtocolError> {
    run_round_with(scene, ego, cfg, 0.0, &Executor::sequential(), &mut Bus::new())
}

/// Collaborators observe `latency_ms` before the ego; no pose compensation.
pub fn run_with_staleness(scene: &Scene, ego: AgentId, cfg: &RoundConfig, latency_ms: f64) -> Result<RoundTrace, ProtocolError> {
    run_round_with(scene, ego, cfg, latency_ms, &Executor::sequential(), &mut Bus::new())
}

pub fn run_round_with(
    scene: &Scene,
    ego: AgentId,
    cfg: &RoundConfig,
    latency_ms: f64,
    exec: &Executor,
    bus: &mut Bus,
) -> Result<RoundTrace, ProtocolError> {
    cfg.validate()?;
    let obs = observe(scene, ego, cfg, latency_ms, exec)?;
    bus.set_context(scene.seed, ego);
    let trace = exchange(&obs, cfg, exec, bus)?;
    Ok(stamp(trace, scene))
}

/// Re-runs the ego side of a recorded round from its logged envelopes.
///
/// Detections and byte counts match the recorded round. The mask cell counts
/// of each link are only known to the sender and read 0.
pub fn replay_round(scene: &Scene, ego: AgentId, cfg: &RoundConfig, latency_ms: f64, log: &[LogEntry]) -> Result<RoundTrace, ProtocolError> {
    cfg.validate()?;
    let obs = observe(scene, ego, cfg, latency_ms, &Executor::sequential())?;
    let inbox: Vec<Envelope> = log
        .iter()
        .filter(|e| e.scene_seed == scene.seed && e.ego == ego && e.envelope.from != ego)
        .map(|e| e.envelope.clone())
        .collect();
    let demand_len = log
        .iter()
        .find(|e| e.scene_seed == scene.seed && e.ego == ego && e.envelope.kind == PayloadKind::Demand)
        .map_or(0, |e| e.envelope.payload.len());
    let mut links: Vec<LinkTrace> = Vec::new();
    for env in &inbox {
        let link = match links.iter_mut().find(|l| l.agent == env.from) {
            Some(l) => l,
            None => {
                links.push(LinkTrace {
                    agent: env.from,
                    bytes: ByteReport {
                        demand_bytes: demand_len,
                        ..ByteReport::default()
                    },
                    supply_cells: 0,
                    demand_cells: 0,
                    selected_cells: 0,
                });
                links.last_mut().unwrap()
            }
        };
        match env.kind {
            PayloadKind::Feature => {
                link.bytes.feature_bytes = env.payload.len();
                if let Ok(m) = decode_feature_message(&env.payload, env.pose, &cfg.grid) {
                    let s = m.size();
                    link.bytes.feature_value_bytes = s.values;
                    link.bytes.feature_cells = s.cells;
                }
            }
            PayloadKind::Detection => link.bytes.detection_bytes = env.payload.len(),
            PayloadKind::Demand => {}
        }
    }
    let trace = fuse_at_ego(&obs, &inbox, cfg, links)?;
    Ok(stamp(trace, scene))
}

/// Header fields of a payload, for inspection tools.
pub fn describe_payload(payload: &[u8], spec: &GridSpec) -> serde_json::Value {
    let header = match peek_header(payload) {
        Ok(h) => h,
        Err(e) => return serde_json::json!({ "error": e.to_string(), "bytes": payload.len() }),
    };
    let mut v = serde_json::json!({
        "kind": header.kind,
        "sender": header.sender,
        "bytes": payload.len(),
    });
    let detail = match header.kind {
        PayloadKind::Demand => decode_demand(payload).map(|m| {
            serde_json::json!({ "rows": m.mask.rows, "cols": m.mask.cols, "demanded_cells": m.mask.count_true() })
        }),
        PayloadKind::Feature => decode_feature_message(payload, Pose2::identity(), spec).map(|m| {
            let s = m.size();
            serde_json::json!({
                "c0": m.c0,
                "precision": m.precision,
                "cells_per_scale": m.scales.iter().map(|g| g.len()).collect::<Vec<_>>(),
                "channels_per_scale": m.scales.iter().map(|g| g.channels).collect::<Vec<_>>(),
                "size": s,
            })
        }),
        PayloadKind::Detection => decode_detections(payload, Pose2::identity()).map(|m| serde_json::json!({ "boxes": m.boxes })),
    };
    match detail {
        Ok(d) => v["payload"] = d,
        Err(e) => v["error"] = serde_json::Value::String(e.to_string()),
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::scene_sim::{generate_scene, AgentState, Footprint, SceneConfig, SceneObject};

    #[test]
    fn latency_examples() {
        assert_eq!(total_latency(&LatencyProfile::zero()), 0.0);
        let p = LatencyProfile::default();
        assert_eq!(total_latency(&p), 41.0);
        assert_eq!(total_latency(&p) - single_round_latency(&p), 3.0);
        let fast = LatencyProfile {
            t_comm_ms: 5.0,
            ..p
        };
        assert_eq!(total_latency(&fast), 23.0);
    }

    fn solo_scene() -> Scene {
        let mut s = Scene::new(5);
        s.agents.push(AgentState {
            id: 0,
            pose: Pose2::identity(),
            velocity: Point2::default(),
        });
        s.objects.push(SceneObject {
            id: 1,
            footprint: Footprint::new(10.0, 2.0, 4.5, 1.8, 0.0),
            velocity: Point2::default(),
        });
        s
    }

    #[test]
    fn single_agent_round_is_ego_only() {
        let t = run_round(&solo_scene(), 0, &RoundConfig::default()).unwrap();
        assert!(t.links.is_empty());
        assert_eq!(t.intermediate, t.ego_only);
        assert_eq!(t.final_detections.as_ref(), Some(&t.ego_only));
        assert_eq!(t.intermediate.len(), 1);
    }

    fn busy_scene(seed: u64) -> Scene {
        generate_scene(
            &SceneConfig {
                num_agents: 5,
                num_objects: 25,
                world_x: (-60.0, 60.0),
                ..SceneConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn bytes_match_encoded_payloads_and_cap_holds() {
        let scene = busy_scene(3);
        let mut bus = Bus::recording();
        let cfg = RoundConfig::default();
        let t = run_round_with(&scene, 0, &cfg, 0.0, &Executor::sequential(), &mut bus).unwrap();
        assert_eq!(t.links.len(), 4);
        let log = bus.log();
        for link in &t.links {
            let sent = |k| log.iter().filter(|e| e.envelope.from == link.agent && e.envelope.kind == k).map(|e| e.envelope.payload.len()).sum::<usize>();
            assert_eq!(link.bytes.feature_bytes, sent(PayloadKind::Feature));
            assert_eq!(link.bytes.detection_bytes, sent(PayloadKind::Detection));
        }
        let demand: Vec<_> = log.iter().filter(|e| e.envelope.kind == PayloadKind::Demand).collect();
        assert_eq!(demand.len(), 1);
        assert!(t.links.iter().all(|l| l.bytes.demand_bytes == demand[0].envelope.payload.len()));
        assert_eq!(log.iter().filter(|e| e.envelope.kind == PayloadKind::Feature).count(), 4);
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let scene = busy_scene(4);
        let cfg = RoundConfig::default();
        let a = run_round(&scene, 0, &cfg).unwrap();
        let b = run_round(&scene, 0, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let mut bus = Bus::recording();
        let c = run_round_with(&scene, 0, &cfg, 0.0, &Executor::new(8), &mut bus).unwrap();
        assert_eq!(a.to_json(), c.to_json());
        let mut bus_seq = Bus::recording();
        run_round_with(&scene, 0, &cfg, 0.0, &Executor::sequential(), &mut bus_seq).unwrap();
        assert_eq!(bus.log(), bus_seq.log());
    }

    #[test]
    fn log_replays_to_same_trace() {
        let scene = busy_scene(6);
        let cfg = RoundConfig::default();
        let mut bus = Bus::recording();
        let t = run_round_with(&scene, 0, &cfg, 0.0, &Executor::sequential(), &mut bus).unwrap();
        let mut buf = Vec::new();
        bus.write_log(&mut buf).unwrap();
        let log = read_log(&buf[..]).unwrap();
        assert_eq!(log, bus.log());
        let replayed = replay_round(&scene, 0, &cfg, 0.0, &log).unwrap();
        assert_eq!(replayed.intermediate, t.intermediate);
        assert_eq!(replayed.final_detections, t.final_detections);
        assert_eq!(replayed.byte_reports(), t.byte_reports());
    }

    #[test]
    fn corrupt_payload_skips_collaborator() {
        let scene = busy_scene(7);
        let cfg = RoundConfig::default();
        let mut bus = Bus::recording();
        run_round_with(&scene, 0, &cfg, 0.0, &Executor::sequential(), &mut bus).unwrap();
        let mut log = bus.log().to_vec();
        let victim = log.iter_mut().find(|e| e.envelope.kind == PayloadKind::Feature).unwrap();
        let who = victim.envelope.from;
        victim.envelope.payload.truncate(10);
        let t = replay_round(&scene, 0, &cfg, 0.0, &log).unwrap();
        assert_eq!(t.warnings.len(), 1);
        assert!(t.warnings[0].contains(&format!("collaborator {who}")));
    }

    #[test]
    fn staleness_is_identity_for_static_scenes() {
        let scene = busy_scene(8);
        let cfg = RoundConfig::default();
        let base = run_round(&scene, 0, &cfg).unwrap();
        assert_eq!(run_with_staleness(&scene, 0, &cfg, 0.0).unwrap(), base);
        let stale = run_with_staleness(&scene, 0, &cfg, 200.0).unwrap();
        assert_eq!(stale.intermediate, base.intermediate);
        assert_eq!(stale.latency.staleness_ms, 200.0);
    }

    #[test]
    fn no_supply_sends_headers_only() {
        let scene = busy_scene(9);
        let cfg = RoundConfig {
            eps_c: 1.0,
            ..RoundConfig::default()
        };
        let t = run_round(&scene, 0, &cfg).unwrap();
        assert!(t.links.iter().all(|l| l.bytes.feature_bytes == 16 + 3 * 8));
        assert_eq!(t.intermediate, t.ego_only);
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = RoundConfig {
            c0: 3,
            ..RoundConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("c0"));
        let bad = RoundConfig {
            late: LateFusionParams {
                beta: 1.5,
                ..LateFusionParams::default()
            },
            ..RoundConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("late.beta"));
    }
}
