//! Synthetic multi-agent worlds and a planar ray-casting LiDAR.
//!
//! A [`Scene`] holds agents, ground-truth objects (with constant velocity),
//! static background occluders and optionally injected spurious detections.
//! [`sample_lidar`] casts equally spaced rays from an agent; each ray returns at
//! most one point, on the nearest edge it crosses, and is dropped with
//! probability `min(1, d / d_max)`.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, rotated_iou, AgentId, BevBox, Point2, Pose2};
use crate::grid::GridSpec;

pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Largest number of agents a scene may hold (ego plus four collaborators).
pub const MAX_AGENTS: usize = 5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place {what} {placed}/{requested} after {attempts} attempts; config too dense")]
    Overcrowded {
        what: &'static str,
        placed: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("agent {0} is not part of the scene")]
    UnknownAgent(AgentId),
    #[error("duplicate {what} id {id}")]
    DuplicateId { what: &'static str, id: u32 },
    #[error("unsupported scene schema version {found} (expected {SCENE_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Deterministic 64-bit mixing of several words (splitmix64 finalizer chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Oriented box without detection semantics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl Footprint {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            length,
            width,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn to_box(&self) -> BevBox {
        BevBox::new(self.cx, self.cy, self.length, self.width, self.yaw)
    }

    pub fn corners(&self) -> [Point2; 4] {
        self.to_box().corners()
    }

    pub fn inflated(&self, margin: f64) -> Footprint {
        Footprint {
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            ..*self
        }
    }

    pub fn displaced(&self, d: Point2) -> Footprint {
        Footprint {
            cx: self.cx + d.x,
            cy: self.cy + d.y,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: AgentId,
    pub pose: Pose2,
    #[serde(default)]
    pub velocity: Point2,
}

impl AgentState {
    pub fn pose_at(&self, t: f64) -> Pose2 {
        Pose2::new(
            self.pose.x + self.velocity.x * t,
            self.pose.y + self.velocity.y * t,
            self.pose.yaw,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub footprint: Footprint,
    #[serde(default)]
    pub velocity: Point2,
}

/// A spurious box an agent's detector reports in its own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedDetection {
    pub agent: AgentId,
    pub detection: BevBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub seed: u64,
    pub timestamp: f64,
    #[serde(default)]
    pub label: String,
    pub agents: Vec<AgentState>,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub occluders: Vec<Footprint>,
    #[serde(default)]
    pub injected_detections: Vec<InjectedDetection>,
}

impl Scene {
    pub fn new(seed: u64) -> Self {
        Self {
            schema_version: SCENE_SCHEMA_VERSION,
            seed,
            timestamp: 0.0,
            label: String::new(),
            agents: Vec::new(),
            objects: Vec::new(),
            occluders: Vec::new(),
            injected_detections: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.schema_version != SCENE_SCHEMA_VERSION {
            return Err(SceneError::SchemaVersion {
                found: self.schema_version,
            });
        }
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SceneError::DuplicateId {
                what: "agent",
                id: w[0],
            });
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SceneError::DuplicateId {
                what: "object",
                id: w[0],
            });
        }
        Ok(())
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentState, SceneError> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or(SceneError::UnknownAgent(id))
    }

    pub fn pose_at(&self, id: AgentId, t: f64) -> Result<Pose2, SceneError> {
        Ok(self.agent(id)?.pose_at(t))
    }

    /// Objects displaced by `velocity · t`; `objects_at(0.0)` is the stored list.
    pub fn objects_at(&self, t: f64) -> Vec<SceneObject> {
        self.objects
            .iter()
            .map(|o| SceneObject {
                footprint: o.footprint.displaced(o.velocity.scale(t)),
                ..*o
            })
            .collect()
    }

    /// Ground-truth boxes in `agent`'s frame at time `t` whose centers fall
    /// inside `range`. `source_agent` carries the object id.
    pub fn truth_boxes(&self, agent: AgentId, t: f64, range: &GridSpec) -> Result<Vec<BevBox>, SceneError> {
        let pose = self.pose_at(agent, t)?;
        let inv = pose.inverse();
        Ok(self
            .objects_at(t)
            .iter()
            .map(|o| o.footprint.to_box().with_source(o.id).transformed(&inv))
            .filter(|b| range.contains(b.center()))
            .collect())
    }

    pub fn to_json(&self) -> Result<String, SceneError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_agents: usize,
    pub num_objects: usize,
    pub num_occluders: usize,
    /// World region objects and agents are drawn from.
    pub world_x: (f64, f64),
    pub world_y: (f64, f64),
    /// Agents and objects stay within `|y| <= road_half_width`; occluders outside it.
    pub road_half_width: f64,
    pub road_aligned: bool,
    pub object_length: (f64, f64),
    pub object_width: (f64, f64),
    pub occluder_length: (f64, f64),
    pub occluder_width: (f64, f64),
    /// Object speed range along their heading, m/s.
    pub speed: (f64, f64),
    pub min_agent_spacing: f64,
    /// Minimum free gap kept around every object.
    pub clearance: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_agents: 3,
            num_objects: 20,
            num_occluders: 4,
            world_x: (-100.0, 100.0),
            world_y: (-35.0, 35.0),
            road_half_width: 12.0,
            road_aligned: true,
            object_length: (4.2, 4.8),
            object_width: (1.7, 1.9),
            occluder_length: (6.0, 15.0),
            occluder_width: (3.0, 8.0),
            speed: (0.0, 0.0),
            min_agent_spacing: 5.0,
            clearance: 0.5,
            max_attempts: 20_000,
        }
    }
}

/// Footprint reserved around each agent (a car-sized body).
pub const AGENT_BODY: (f64, f64) = (4.5, 1.8);

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn road_yaw(rng: &mut ChaCha8Rng, aligned: bool) -> f64 {
    if aligned {
        let base = if rng.gen_bool(0.5) { 0.0 } else { PI };
        base + rng.gen_range(-0.1..0.1)
    } else {
        rng.gen_range(-PI..PI)
    }
}

fn overlaps_any(candidate: &Footprint, others: &[Footprint]) -> bool {
    let c = candidate.to_box();
    others.iter().any(|o| rotated_iou(&c, &o.to_box()) > 0.0)
}

/// Places agents, occluders and objects. Deterministic for `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    if !(1..=MAX_AGENTS).contains(&config.num_agents) {
        return Err(SceneError::InvalidConfig(format!(
            "num_agents = {} outside [1, {MAX_AGENTS}]",
            config.num_agents
        )));
    }
    if config.world_x.1 <= config.world_x.0 || config.world_y.1 <= config.world_y.0 {
        return Err(SceneError::InvalidConfig("empty world region".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5CE7E]));
    let mut scene = Scene::new(seed);
    let road = (
        config.world_y.0.max(-config.road_half_width),
        config.world_y.1.min(config.road_half_width),
    );

    // Blocked footprints, kept inflated by the clearance margin.
    let mut blocked: Vec<Footprint> = Vec::new();

    let mut attempts = 0;
    while scene.agents.len() < config.num_agents {
        attempts += 1;
        if attempts > config.max_attempts {
            return Err(SceneError::Overcrowded {
                what: "agent",
                placed: scene.agents.len(),
                requested: config.num_agents,
                attempts,
            });
        }
        let pose = Pose2::new(
            uniform(&mut rng, config.world_x),
            uniform(&mut rng, road),
            road_yaw(&mut rng, config.road_aligned),
        );
        if scene
            .agents
            .iter()
            .any(|a| a.pose.translation().distance(pose.translation()) < config.min_agent_spacing)
        {
            continue;
        }
        scene.agents.push(AgentState {
            id: scene.agents.len() as AgentId,
            pose,
            velocity: Point2::default(),
        });
        blocked.push(
            Footprint::new(pose.x, pose.y, AGENT_BODY.0, AGENT_BODY.1, pose.yaw).inflated(config.clearance + 1.0),
        );
    }

    attempts = 0;
    while scene.occluders.len() < config.num_occluders {
        attempts += 1;
        if attempts > config.max_attempts {
            return Err(SceneError::Overcrowded {
                what: "occluder",
                placed: scene.occluders.len(),
                requested: config.num_occluders,
                attempts,
            });
        }
        let length = uniform(&mut rng, config.occluder_length);
        let width = uniform(&mut rng, config.occluder_width);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let inner = config.road_half_width + 0.5 * width + 1.0;
        let outer = config.world_y.1.abs().max(config.world_y.0.abs());
        if inner >= outer {
            return Err(SceneError::InvalidConfig("no room for occluders beside the road".into()));
        }
        let fp = Footprint::new(
            uniform(&mut rng, config.world_x),
            side * uniform(&mut rng, (inner, outer)),
            length,
            width,
            if config.road_aligned { 0.0 } else { rng.gen_range(-PI..PI) },
        );
        if overlaps_any(&fp, &blocked) {
            continue;
        }
        blocked.push(fp.inflated(config.clearance));
        scene.occluders.push(fp);
    }

    attempts = 0;
    while scene.objects.len() < config.num_objects {
        attempts += 1;
        if attempts > config.max_attempts {
            return Err(SceneError::Overcrowded {
                what: "object",
                placed: scene.objects.len(),
                requested: config.num_objects,
                attempts,
            });
        }
        let yaw = road_yaw(&mut rng, config.road_aligned);
        let fp = Footprint::new(
            uniform(&mut rng, config.world_x),
            uniform(&mut rng, road),
            uniform(&mut rng, config.object_length),
            uniform(&mut rng, config.object_width),
            yaw,
        );
        if overlaps_any(&fp.inflated(config.clearance), &blocked) {
            continue;
        }
        let speed = uniform(&mut rng, config.speed);
        blocked.push(fp.inflated(config.clearance));
        scene.objects.push(SceneObject {
            id: scene.objects.len() as u32,
            footprint: fp,
            velocity: Point2::new(speed * fp.yaw.cos(), speed * fp.yaw.sin()),
        });
    }
    Ok(scene)
}

/// What a LiDAR return landed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointTag {
    Object(u32),
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub tag: PointTag,
}

impl LidarPoint {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn is_foreground(&self) -> bool {
        matches!(self.tag, PointTag::Object(_))
    }
}

/// Points in the observing agent's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub agent: AgentId,
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn count_tagged(&self, object: u32) -> usize {
        self.points
            .iter()
            .filter(|p| p.tag == PointTag::Object(object))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub rays: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Distance at which every return is dropped.
    pub d_max: f64,
}

impl SamplerConfig {
    /// 1440 rays (0.25°) over the grid's range, `d_max` = range half-diagonal.
    pub fn for_grid(spec: &GridSpec) -> Self {
        Self {
            rays: 1440,
            x_range: spec.x_range,
            y_range: spec.y_range,
            d_max: spec.half_diagonal(),
        }
    }

    fn in_range(&self, p: Point2) -> bool {
        p.x >= self.x_range.0 && p.x < self.x_range.1 && p.y >= self.y_range.0 && p.y < self.y_range.1
    }

    pub fn drop_probability(&self, d: f64) -> f64 {
        (d / self.d_max).min(1.0)
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::for_grid(&GridSpec::default())
    }
}

/// RNG stream id for one agent's sweep at time `t`.
pub fn stream_seed(scene_seed: u64, agent: AgentId, t: f64) -> u64 {
    mix_seed(&[scene_seed, agent as u64, t.to_bits()])
}

pub fn sample_lidar(scene: &Scene, agent: AgentId, t: f64, cfg: &SamplerConfig) -> Result<PointCloud, SceneError> {
    sample_lidar_with_stream(scene, agent, t, cfg, stream_seed(scene.seed, agent, t))
}

/// Like [`sample_lidar`] with an explicit RNG stream.
pub fn sample_lidar_with_stream(
    scene: &Scene,
    agent: AgentId,
    t: f64,
    cfg: &SamplerConfig,
    stream: u64,
) -> Result<PointCloud, SceneError> {
    let pose = scene.pose_at(agent, t)?;
    let inv = pose.inverse();
    let mut polys: Vec<(PointTag, [Point2; 4])> =
        Vec::with_capacity(scene.objects.len() + scene.occluders.len());
    for o in scene.objects_at(t) {
        polys.push((
            PointTag::Object(o.id),
            o.footprint.corners().map(|c| inv.transform_point(c)),
        ));
    }
    for occ in &scene.occluders {
        polys.push((
            PointTag::Background,
            occ.corners().map(|c| inv.transform_point(c)),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    Ok(PointCloud {
        agent,
        points: cast_rays(&polys, cfg, &mut rng),
    })
}

fn aabb_intersects_range(poly: &[Point2; 4], cfg: &SamplerConfig) -> bool {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    x1 >= cfg.x_range.0 && x0 < cfg.x_range.1 && y1 >= cfg.y_range.0 && y0 < cfg.y_range.1
}

fn contains_origin(poly: &[Point2; 4]) -> bool {
    (0..4).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        (b - a).cross(Point2::default() - a) >= 0.0
    })
}

/// Casts rays from the origin of the frame the polygons are expressed in.
/// One uniform draw is consumed per ray, hit or not, so streams stay aligned
/// across scenes that differ only in geometry.
pub fn cast_rays(polys: &[(PointTag, [Point2; 4])], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Vec<LidarPoint> {
    let n = cfg.rays;
    let step = TAU / n as f64;
    let dirs: Vec<Point2> = (0..n)
        .map(|k| {
            let (s, c) = (k as f64 * step).sin_cos();
            Point2::new(c, s)
        })
        .collect();
    let mut best: Vec<(f64, Option<PointTag>)> = vec![(f64::INFINITY, None); n];

    for (tag, poly) in polys {
        if !aabb_intersects_range(poly, cfg) || contains_origin(poly) {
            continue;
        }
        let centroid = poly.iter().fold(Point2::default(), |acc, &p| acc + p).scale(0.25);
        let mid = centroid.y.atan2(centroid.x);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for p in poly {
            let rel = normalize_angle(p.y.atan2(p.x) - mid);
            lo = lo.min(rel);
            hi = hi.max(rel);
        }
        let k_lo = ((mid + lo) / step).ceil() as i64;
        let k_hi = ((mid + hi) / step).floor() as i64;
        for k in k_lo..=k_hi {
            let idx = k.rem_euclid(n as i64) as usize;
            let d = dirs[idx];
            for i in 0..4 {
                let a = poly[i];
                let e = poly[(i + 1) % 4] - a;
                let denom = d.cross(e);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let s = a.cross(e) / denom;
                let u = a.cross(d) / denom;
                if s > 0.0 && (0.0..=1.0).contains(&u) && s < best[idx].0 {
                    best[idx] = (s, Some(*tag));
                }
            }
        }
    }

    let mut points = Vec::new();
    for (k, &(s, tag)) in best.iter().enumerate() {
        let draw: f64 = rng.gen();
        let Some(tag) = tag else { continue };
        let p = dirs[k].scale(s);
        if !cfg.in_range(p) {
            continue;
        }
        if draw < cfg.drop_probability(s) {
            continue;
        }
        points.push(LidarPoint { x: p.x, y: p.y, tag });
    }
    points
}
