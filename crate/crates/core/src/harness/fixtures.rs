//! Named scene families. Every scene is a pure function of
//! `(family, index, base seed)`; the ego is always agent 0 at the origin
//! facing +x, so world and ego frames coincide.
//!
//! Families:
//! - `occlusion`: a car 18 m ahead sits fully in the shadow of a car 8 m
//!   ahead; one collaborator beside the near car sees it.
//! - `long_range`: traffic 40 to 100 m ahead, beyond the ego's useful range,
//!   with collaborators stationed among it.
//! - `false_positive`: a generic street where one collaborator also reports
//!   20 spurious boxes at confidence 0.2.
//! - `motion`: traffic at 10 m/s around three closely spaced parked agents.
//! - `dense_urban`: five agents among buildings and crowded traffic.
//! - `random`: the generic generator with a user-supplied config.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SuiteSpec;
use super::HarnessError;
use crate::geometry::{normalize_angle, rotated_iou, BevBox, Point2, Pose2};
use crate::grid::GridSpec;
use crate::scene_sim::{
    generate_scene, mix_seed, sample_lidar, AgentState, Footprint, InjectedDetection, SamplerConfig, Scene, SceneConfig,
    SceneError, SceneObject, AGENT_BODY,
};

/// Object speed in the motion family, m/s.
pub const MOTION_SPEED: f64 = 10.0;
/// Spurious boxes injected per false-positive scene.
pub const INJECTED_PER_SCENE: usize = 20;
pub const INJECTED_CONFIDENCE: f64 = 0.2;

/// Object ids of the two cars that define an occlusion scene.
pub const OCCLUSION_BLOCKER_ID: u32 = 0;
pub const OCCLUSION_HIDDEN_ID: u32 = 1;
/// A car seen well by both agents, so the demand mask has overlap to remove.
pub const OCCLUSION_SHARED_ID: u32 = 2;

const MAX_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Occlusion,
    LongRange,
    FalsePositive,
    Motion,
    DenseUrban,
    Random,
}

impl Family {
    /// The hand-designed families; `random` is opt-in.
    pub const NAMED: [Family; 5] = [
        Family::Occlusion,
        Family::LongRange,
        Family::FalsePositive,
        Family::Motion,
        Family::DenseUrban,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Occlusion => "occlusion",
            Family::LongRange => "long_range",
            Family::FalsePositive => "false_positive",
            Family::Motion => "motion",
            Family::DenseUrban => "dense_urban",
            Family::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        [Family::Random].into_iter().chain(Family::NAMED).find(|f| f.name() == name)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One scene of a suite, with its ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScene {
    pub family: Family,
    pub index: usize,
    pub ego: u32,
    pub scene: Scene,
}

/// Seed of scene `index` in `family`.
pub fn scene_seed(base: u64, family: Family, index: usize) -> u64 {
    mix_seed(&[base, family.tag(), index as u64])
}

/// Builds every scene of `spec`, family by family, in index order.
pub fn build_suite(spec: &SuiteSpec, base_seed: u64) -> Result<Vec<SuiteScene>, HarnessError> {
    let mut out = Vec::with_capacity(spec.len());
    for &family in &spec.families {
        for index in 0..spec.scenes_per_family {
            out.push(SuiteScene {
                family,
                index,
                ego: 0,
                scene: family_scene(family, index, base_seed, &spec.random)?,
            });
        }
    }
    Ok(out)
}

pub fn family_scene(family: Family, index: usize, base_seed: u64, random: &SceneConfig) -> Result<Scene, HarnessError> {
    let seed = scene_seed(base_seed, family, index);
    let mut scene = match family {
        Family::Occlusion => occlusion(seed)?,
        Family::LongRange => long_range(seed)?,
        Family::FalsePositive => false_positive(seed)?,
        Family::Motion => motion(seed)?,
        Family::DenseUrban => recentre(generate_scene(&dense_urban_config(), seed)?),
        Family::Random => recentre(generate_scene(random, seed)?),
    };
    scene.label = format!("{}/{index:03}", family.name());
    scene.validate()?;
    Ok(scene)
}

/// Re-expresses a generated scene in agent 0's frame.
fn recentre(mut scene: Scene) -> Scene {
    let inv = scene.agents[0].pose.inverse();
    let rot = Pose2::new(0.0, 0.0, inv.yaw);
    let move_fp = |fp: &Footprint| {
        let b = fp.to_box().transformed(&inv);
        Footprint::new(b.cx, b.cy, b.length, b.width, b.yaw)
    };
    for a in &mut scene.agents {
        a.pose = inv.compose(&a.pose);
        a.pose.yaw = normalize_angle(a.pose.yaw);
        a.velocity = rot.transform_point(a.velocity);
    }
    scene.agents[0].pose = Pose2::identity();
    for o in &mut scene.objects {
        o.footprint = move_fp(&o.footprint);
        o.velocity = rot.transform_point(o.velocity);
    }
    for occ in &mut scene.occluders {
        *occ = move_fp(occ);
    }
    scene
}

/// Generator settings of the dense-urban family.
pub fn dense_urban_config() -> SceneConfig {
    SceneConfig {
        num_agents: 5,
        num_objects: 18,
        num_occluders: 8,
        world_x: (-45.0, 45.0),
        world_y: (-32.0, 32.0),
        road_half_width: 10.0,
        ..SceneConfig::default()
    }
}

/// Incremental scene construction with overlap rejection.
struct Builder {
    scene: Scene,
    rng: ChaCha8Rng,
    /// Footprints already taken, inflated by the clearance.
    blocked: Vec<Footprint>,
}

const CLEARANCE: f64 = 0.5;

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            scene: Scene::new(seed),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF1C7])),
            blocked: Vec::new(),
        }
    }

    fn u(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    fn sign(&mut self) -> f64 {
        if self.rng.gen_bool(0.5) {
            1.0
        } else {
            -1.0
        }
    }

    fn free(&self, fp: &Footprint) -> bool {
        let b = fp.inflated(CLEARANCE).to_box();
        self.blocked.iter().all(|o| rotated_iou(&b, &o.to_box()) == 0.0)
    }

    fn agent(&mut self, x: f64, y: f64, yaw: f64) {
        let pose = Pose2::new(x, y, yaw);
        self.blocked
            .push(Footprint::new(x, y, AGENT_BODY.0, AGENT_BODY.1, yaw).inflated(CLEARANCE));
        self.scene.agents.push(AgentState {
            id: self.scene.agents.len() as u32,
            pose,
            velocity: Point2::default(),
        });
    }

    fn car(&mut self, x: f64, y: f64, yaw: f64) -> Footprint {
        let (l, w) = (self.u(4.2, 4.8), self.u(1.7, 1.9));
        Footprint::new(x, y, l, w, yaw)
    }

    /// Adds `fp` unless it collides; `sweep` extends the checked footprint
    /// along the heading in both directions (for moving objects).
    fn object(&mut self, fp: Footprint, velocity: Point2, sweep: f64) -> bool {
        let checked = Footprint::new(fp.cx, fp.cy, fp.length + 2.0 * sweep, fp.width, fp.yaw);
        if !self.free(&checked) {
            return false;
        }
        self.blocked.push(checked.inflated(CLEARANCE));
        self.scene.objects.push(SceneObject {
            id: self.scene.objects.len() as u32,
            footprint: fp,
            velocity,
        });
        true
    }

    /// Up to `n` parked or moving cars uniformly in a region, road-aligned.
    fn traffic(&mut self, n: usize, xs: (f64, f64), ys: (f64, f64), speed: f64, sweep: f64) {
        let mut placed = 0;
        for _ in 0..n * 50 {
            if placed == n {
                break;
            }
            let heading = if self.rng.gen_bool(0.5) { 0.0 } else { PI };
            let yaw = heading + self.u(-0.08, 0.08);
            let (x, y) = (self.u(xs.0, xs.1), self.u(ys.0, ys.1));
            let fp = self.car(x, y, yaw);
            let v = Point2::new(speed * yaw.cos(), speed * yaw.sin());
            if self.object(fp, v, sweep) {
                placed += 1;
            }
        }
    }

    /// Buildings beside the road, `|y|` within `band`.
    fn buildings(&mut self, n: usize, xs: (f64, f64), band: (f64, f64)) {
        let mut placed = 0;
        for _ in 0..n * 50 {
            if placed == n {
                break;
            }
            let (l, w) = (self.u(6.0, 15.0), self.u(3.0, 8.0));
            let side = self.sign();
            let y = side * self.u(band.0 + 0.5 * w, band.1.max(band.0 + 0.5 * w + 0.1));
            let fp = Footprint::new(self.u(xs.0, xs.1), y, l, w, 0.0);
            if self.free(&fp) {
                self.blocked.push(fp.inflated(CLEARANCE));
                self.scene.occluders.push(fp);
                placed += 1;
            }
        }
    }
}

/// Nearest multiple of the default cell size.
fn snap(v: f64) -> f64 {
    let cell = GridSpec::default().cell;
    (v / cell).round() * cell
}

fn fixture_sampler() -> SamplerConfig {
    SamplerConfig::for_grid(&GridSpec::default())
}

fn occlusion(seed: u64) -> Result<Scene, HarnessError> {
    let sampler = fixture_sampler();
    for attempt in 0..MAX_TRIES {
        let mut b = Builder::new(mix_seed(&[seed, attempt as u64]));
        b.scene.seed = seed;
        let side = b.sign();
        b.agent(0.0, 0.0, 0.0);
        // Past the blocker, where two faces of the hidden car are in view.
        // Parked on the ego's cell lattice so its features re-bin exactly and
        // the recovery check measures occlusion, not resampling loss.
        let (cx, cy) = (b.u(11.0, 14.0), side * b.u(5.0, 6.5));
        b.agent(snap(cx), snap(cy), 0.0);

        let (bx, by, byaw) = (b.u(7.5, 8.5), b.u(-0.3, 0.3), b.u(-0.1, 0.1));
        let blocker = b.car(bx, by, byaw);
        let hidden_yaw = if b.rng.gen_bool(0.5) { 0.0 } else { PI } + b.u(-0.15, 0.15);
        let (hx, hy) = (b.u(17.0, 19.0), b.u(-0.4, 0.4));
        let hidden = b.car(hx, hy, hidden_yaw);
        // A car behind the ego that both agents see.
        let (sx, sy, syaw) = (b.u(-14.0, -9.0), b.u(-3.0, 3.0), b.u(-0.1, 0.1));
        let shared = b.car(sx, sy, syaw);
        if !b.object(blocker, Point2::default(), 0.0)
            || !b.object(hidden, Point2::default(), 0.0)
            || !b.object(shared, Point2::default(), 0.0)
        {
            continue;
        }
        let n_bg = b.rng.gen_range(2..=4);
        let (split, rest) = (n_bg / 2, n_bg - n_bg / 2);
        b.traffic(split, (-45.0, -18.0), (-8.0, 8.0), 0.0, 0.0);
        b.traffic(rest, (35.0, 70.0), (-8.0, 8.0), 0.0, 0.0);
        let n_bld = b.rng.gen_range(2..=4);
        b.buildings(n_bld, (-40.0, 60.0), (16.0, 30.0));

        let scene = b.scene;
        let ego_pc = sample_lidar(&scene, 0, 0.0, &sampler)?;
        let collab_pc = sample_lidar(&scene, 1, 0.0, &sampler)?;
        if ego_pc.count_tagged(OCCLUSION_HIDDEN_ID) == 0
            && ego_pc.count_tagged(OCCLUSION_BLOCKER_ID) >= 40
            && ego_pc.count_tagged(OCCLUSION_SHARED_ID) >= 40
            && collab_pc.count_tagged(OCCLUSION_HIDDEN_ID) >= 60
            && collab_pc.count_tagged(OCCLUSION_SHARED_ID) >= 20
        {
            return Ok(scene);
        }
    }
    Err(SceneError::InvalidConfig(format!("no valid occlusion layout for seed {seed}")).into())
}

fn long_range(seed: u64) -> Result<Scene, HarnessError> {
    let mut b = Builder::new(seed);
    b.agent(0.0, 0.0, 0.0);
    for k in 0..2 {
        let x = 52.0 + 28.0 * k as f64 + b.u(-5.0, 5.0);
        let y = b.sign() * b.u(3.0, 6.0);
        let yaw = if b.rng.gen_bool(0.5) { 0.0 } else { PI } + b.u(-0.1, 0.1);
        b.agent(x, y, yaw);
    }
    let far = b.rng.gen_range(5..=7);
    b.traffic(far, (40.0, 100.0), (-8.0, 8.0), 0.0, 0.0);
    let near = b.rng.gen_range(2..=3);
    b.traffic(near, (-25.0, 25.0), (-8.0, 8.0), 0.0, 0.0);
    let n_bld = b.rng.gen_range(2..=4);
    b.buildings(n_bld, (-30.0, 110.0), (14.0, 30.0));
    Ok(b.scene)
}

fn false_positive(seed: u64) -> Result<Scene, HarnessError> {
    let mut b = Builder::new(seed);
    b.agent(0.0, 0.0, 0.0);
    let s = b.sign();
    let (x1, y1, yaw1) = (b.u(10.0, 20.0), s * b.u(4.0, 7.0), b.u(-0.1, 0.1));
    b.agent(x1, y1, yaw1);
    let (x2, y2, yaw2) = (b.u(-18.0, -8.0), -s * b.u(4.0, 7.0), b.u(-0.1, 0.1));
    b.agent(x2, y2, yaw2);
    let n = b.rng.gen_range(6..=8);
    b.traffic(n, (-30.0, 40.0), (-9.0, 9.0), 0.0, 0.0);
    let n_bld = b.rng.gen_range(2..=3);
    b.buildings(n_bld, (-40.0, 50.0), (14.0, 30.0));

    // Spurious reports of agent 1, in its own frame, on empty ground.
    let collab = b.scene.agents[1].pose;
    let inv = collab.inverse();
    let mut injected = 0;
    for _ in 0..INJECTED_PER_SCENE * 100 {
        if injected == INJECTED_PER_SCENE {
            break;
        }
        let fp = Footprint::new(b.u(-50.0, 60.0), b.u(-25.0, 25.0), 4.5, 1.8, b.u(-PI, PI));
        if !b.free(&fp) {
            continue;
        }
        b.blocked.push(fp.inflated(CLEARANCE));
        let local = fp.to_box().transformed(&inv);
        b.scene.injected_detections.push(InjectedDetection {
            agent: 1,
            detection: BevBox::new(local.cx, local.cy, local.length, local.width, local.yaw)
                .with_confidence(INJECTED_CONFIDENCE),
        });
        injected += 1;
    }
    if injected < INJECTED_PER_SCENE {
        return Err(SceneError::InvalidConfig(format!("placed {injected} spurious boxes for seed {seed}")).into());
    }
    Ok(b.scene)
}

fn motion(seed: u64) -> Result<Scene, HarnessError> {
    let mut b = Builder::new(seed);
    b.agent(0.0, 0.0, 0.0);
    let s = b.sign();
    let (x1, y1, yaw1) = (b.u(6.0, 12.0), s * b.u(9.0, 11.0), b.u(-0.1, 0.1));
    b.agent(x1, y1, yaw1);
    let (x2, y2, yaw2) = (b.u(-12.0, -6.0), -s * b.u(9.0, 11.0), b.u(-0.1, 0.1));
    b.agent(x2, y2, yaw2);
    let n = b.rng.gen_range(6..=8);
    // Objects keep clear of each other over the whole latency window.
    b.traffic(n, (-25.0, 30.0), (-6.5, 6.5), MOTION_SPEED, MOTION_SPEED * 0.2);
    let n_bld = b.rng.gen_range(2..=3);
    b.buildings(n_bld, (-40.0, 50.0), (14.0, 30.0));
    Ok(b.scene)
}
