//! Synthetic coordinated head/gaze/arm trajectories.
//!
//! A piecewise-constant gaze goal drives the system. The eyes follow it with
//! first-order smoothing, the head slews after the eyes with a bounded
//! angular speed, and both wrists reach toward the goal `hand_lag` steps
//! later. Visual features are a fixed smooth function of the head pose.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{TrajectoryRecord, VISUAL_DIM, VISUAL_FPS};
use crate::kinematics::{Mat3, Se3Pose, Vec3, VisuomotorState, DEFAULT_GAZE_LENGTH, NUM_JOINTS};
use crate::{Error, Result};

const NECK_HEIGHT: f64 = 1.55;
const HEAD_FORWARD_OFFSET: f64 = 0.08;
const SHOULDER_HEIGHT: f64 = 1.40;
const SHOULDER_HALF_WIDTH: f64 = 0.18;
const ARM_SEGMENT: f64 = 0.30;
const ARM_REACH: f64 = 0.55;
const HAND_SPREAD: f64 = 0.08;

const EYE_TAU: f64 = 0.15;
const WRIST_TAU: f64 = 0.15;
const HEAD_TAU: f64 = 0.25;
const HEAD_MAX_RATE: f64 = 120.0 * PI / 180.0;
const BODY_TAU: f64 = 1.5;
const WALK_SPEED: f64 = 0.6;
const WALK_TURN_RATE: f64 = 0.3;
const WALK_RETURN_RATE: f64 = 0.8;

const WARMUP_STEPS: usize = 600;
/// Seed of the fixed head-pose-to-feature map; independent of the data seed.
const VISUAL_MAP_SEED: u64 = 0x7669_7375_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityClass {
    /// Seated reaching on a table in front of the body.
    Tabletop,
    /// Wide, frequent gaze shifts across the room.
    Scanning,
    /// Walking with the gaze ahead.
    Walking,
}

struct GoalRegion {
    forward: (f64, f64),
    lateral: (f64, f64),
    height: (f64, f64),
}

impl ActivityClass {
    pub fn label(self) -> &'static str {
        match self {
            ActivityClass::Tabletop => "tabletop",
            ActivityClass::Scanning => "scanning",
            ActivityClass::Walking => "walking",
        }
    }

    fn goal_region(self) -> GoalRegion {
        match self {
            ActivityClass::Tabletop => GoalRegion {
                forward: (0.35, 0.65),
                lateral: (-0.45, 0.45),
                height: (0.85, 1.3),
            },
            ActivityClass::Scanning => GoalRegion {
                forward: (0.6, 2.0),
                lateral: (-1.2, 1.2),
                height: (0.8, 1.9),
            },
            ActivityClass::Walking => GoalRegion {
                forward: (1.0, 3.0),
                lateral: (-1.0, 1.0),
                height: (0.5, 1.8),
            },
        }
    }

    fn rate_multiplier(self) -> f64 {
        match self {
            ActivityClass::Scanning => 1.5,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_trajectories: usize,
    /// Steps per trajectory.
    pub length: usize,
    pub seed: u64,
    pub fps: f64,
    /// Mean rate (Hz) at which the gaze goal jumps.
    pub gaze_target_rate: f64,
    /// Delay (steps) between a goal change and the wrists reacting.
    pub hand_lag: usize,
    /// Std of Gaussian noise on positions (m) and visual features.
    pub noise_std: f64,
    /// Every coordinate is clamped to `[-extent, extent]` (m).
    pub workspace_extent: f64,
    pub gaze_length: f64,
    /// Trajectory `i` gets class `classes[i % classes.len()]`.
    pub classes: Vec<ActivityClass>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 100,
            length: 200,
            seed: 42,
            fps: 10.0,
            gaze_target_rate: 0.5,
            hand_lag: 5,
            noise_std: 0.005,
            workspace_extent: 3.0,
            gaze_length: DEFAULT_GAZE_LENGTH,
            classes: vec![ActivityClass::Tabletop, ActivityClass::Scanning, ActivityClass::Walking],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if self.n_trajectories == 0 {
            return bad("n_trajectories", "must be positive");
        }
        if self.length == 0 {
            return bad("length", "must be positive");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps", "must be positive");
        }
        if !(self.gaze_target_rate >= 0.0 && self.gaze_target_rate.is_finite()) {
            return bad("gaze_target_rate", "must be non-negative");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be non-negative");
        }
        if !(self.workspace_extent > 0.0 && self.workspace_extent.is_finite()) {
            return bad("workspace_extent", "must be positive");
        }
        if !(self.gaze_length > 0.0 && self.gaze_length.is_finite()) {
            return bad("gaze_length", "must be positive");
        }
        if self.classes.is_empty() {
            return bad("classes", "must not be empty");
        }
        Ok(())
    }
}

fn smoothing(dt: f64, tau: f64) -> f64 {
    1.0 - (-dt / tau).exp()
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn direction(yaw: f64, pitch: f64) -> Vec3 {
    Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin())
}

fn yaw_pitch(v: &Vec3) -> (f64, f64) {
    (v.y.atan2(v.x), v.z.atan2((v.x * v.x + v.y * v.y).sqrt()))
}

/// Head frame: x to the left, y up, z (gaze axis) forward.
fn head_rotation(yaw: f64, pitch: f64) -> Mat3 {
    let forward = direction(yaw, pitch);
    let left = Vec3::z().cross(&forward).normalize();
    let up = forward.cross(&left);
    Mat3::from_columns(&[left, up, forward])
}

fn yaw_matrix(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn elbow(shoulder: &Vec3, wrist: &Vec3, outward: &Vec3) -> Vec3 {
    let span = wrist - shoulder;
    let d = span.norm();
    let mid = shoulder + span / 2.0;
    let half = (d / 2.0).min(ARM_SEGMENT);
    let bend = (ARM_SEGMENT * ARM_SEGMENT - half * half).max(0.0).sqrt();
    let u = span.try_normalize(1e-12).unwrap_or_else(|| -Vec3::z());
    let down = -Vec3::z();
    let perp = (down - down.dot(&u) * u)
        .try_normalize(1e-9)
        .or_else(|| (outward - outward.dot(&u) * u).try_normalize(1e-9))
        .unwrap_or_else(Vec3::x);
    mid + bend * perp
}

struct Body {
    class: ActivityClass,
    root: Vec3,
    body_yaw: f64,
    heading: f64,
    turn: f64,
    eye_yaw: f64,
    eye_pitch: f64,
    head_yaw: f64,
    head_pitch: f64,
    wrists: [Vec3; 2],
    goal: Vec3,
    goal_history: VecDeque<Vec3>,
}

struct Dynamics {
    dt: f64,
    a_eye: f64,
    a_head: f64,
    a_wrist: f64,
    a_body: f64,
    jump_prob: f64,
    hand_lag: usize,
    extent: f64,
}

impl Body {
    fn head_position(&self) -> Vec3 {
        self.root + Vec3::new(0.0, 0.0, NECK_HEIGHT) + HEAD_FORWARD_OFFSET * direction(self.head_yaw, self.head_pitch)
    }

    fn shoulders(&self) -> [Vec3; 2] {
        let r = yaw_matrix(self.body_yaw);
        let base = self.root + Vec3::new(0.0, 0.0, SHOULDER_HEIGHT);
        [
            base + r * Vec3::new(0.0, SHOULDER_HALF_WIDTH, 0.0),
            base + r * Vec3::new(0.0, -SHOULDER_HALF_WIDTH, 0.0),
        ]
    }

    fn sample_goal(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let region = self.class.goal_region();
        let u = rng.random_range(region.forward.0..=region.forward.1);
        let v = rng.random_range(region.lateral.0..=region.lateral.1);
        let z = rng.random_range(region.height.0..=region.height.1);
        self.root + yaw_matrix(self.body_yaw) * Vec3::new(u, v, 0.0) + Vec3::new(0.0, 0.0, z)
    }

    fn goal_forward_distance(&self) -> f64 {
        let rel = yaw_matrix(self.body_yaw).transpose() * (self.goal - self.root);
        rel.x
    }

    fn wrist_targets(&self) -> [Vec3; 2] {
        let lagged = self.goal_history.front().copied().unwrap_or(self.goal);
        let r = yaw_matrix(self.body_yaw);
        let shoulders = self.shoulders();
        let offsets = [HAND_SPREAD, -HAND_SPREAD];
        std::array::from_fn(|k| {
            let target = lagged + r * Vec3::new(0.0, offsets[k], 0.0);
            let reach = target - shoulders[k];
            let d = reach.norm();
            if d > ARM_REACH {
                shoulders[k] + reach * (ARM_REACH / d)
            } else {
                target
            }
        })
    }

    fn step(&mut self, dyn_: &Dynamics, rng: &mut ChaCha8Rng, live: bool) {
        if live {
            let forced = self.class == ActivityClass::Walking && self.goal_forward_distance() < 0.4;
            if forced || rng.random::<f64>() < dyn_.jump_prob {
                self.goal = self.sample_goal(rng);
            }
        }
        self.goal_history.push_back(self.goal);
        while self.goal_history.len() > dyn_.hand_lag + 1 {
            self.goal_history.pop_front();
        }

        if live && self.class == ActivityClass::Walking {
            if rng.random::<f64>() < 0.2 * dyn_.dt {
                self.turn = -self.turn;
            }
            let horizontal = Vec3::new(self.root.x, self.root.y, 0.0);
            if horizontal.norm() > 0.3 * dyn_.extent {
                let home = (-self.root.y).atan2(-self.root.x);
                let delta = wrap_angle(home - self.heading);
                self.heading += delta.clamp(-WALK_RETURN_RATE * dyn_.dt, WALK_RETURN_RATE * dyn_.dt);
            } else {
                self.heading += self.turn * dyn_.dt;
            }
            self.heading = wrap_angle(self.heading);
            self.root += WALK_SPEED * dyn_.dt * Vec3::new(self.heading.cos(), self.heading.sin(), 0.0);
            self.body_yaw = wrap_angle(self.body_yaw + dyn_.a_body * 4.0 * wrap_angle(self.heading - self.body_yaw));
        } else if self.class != ActivityClass::Walking {
            self.body_yaw = wrap_angle(self.body_yaw + dyn_.a_body * wrap_angle(self.head_yaw - self.body_yaw));
        }

        let (goal_yaw, goal_pitch) = yaw_pitch(&(self.goal - self.head_position()));
        self.eye_yaw = wrap_angle(self.eye_yaw + dyn_.a_eye * wrap_angle(goal_yaw - self.eye_yaw));
        self.eye_pitch += dyn_.a_eye * (goal_pitch - self.eye_pitch);

        let max_step = HEAD_MAX_RATE * dyn_.dt;
        let dyaw = (dyn_.a_head * wrap_angle(self.eye_yaw - self.head_yaw)).clamp(-max_step, max_step);
        let dpitch = (dyn_.a_head * (self.eye_pitch - self.head_pitch)).clamp(-max_step, max_step);
        self.head_yaw = wrap_angle(self.head_yaw + dyaw);
        self.head_pitch += dpitch;

        let targets = self.wrist_targets();
        for (w, t) in self.wrists.iter_mut().zip(targets) {
            *w += dyn_.a_wrist * (t - *w);
        }
    }

    fn state(&self, gaze_length: f64) -> VisuomotorState {
        let head_p = self.head_position();
        let head = Se3Pose::from_parts_unchecked(head_p, head_rotation(self.head_yaw, self.head_pitch));
        let gaze = head_p + gaze_length * direction(self.eye_yaw, self.eye_pitch);
        let shoulders = self.shoulders();
        let r = yaw_matrix(self.body_yaw);
        let outward = [r * Vec3::y(), -(r * Vec3::y())];
        let elbows: [Vec3; 2] = std::array::from_fn(|k| elbow(&shoulders[k], &self.wrists[k], &outward[k]));
        VisuomotorState {
            head,
            gaze,
            joints: [shoulders[0], shoulders[1], elbows[0], elbows[1], self.wrists[0], self.wrists[1]],
        }
    }
}

/// Fixed smooth map from head pose to a feature vector.
struct VisualMap {
    weights: Vec<[f64; 12]>,
    phases: Vec<f64>,
}

impl VisualMap {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(VISUAL_MAP_SEED);
        let weights = (0..VISUAL_DIM)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5)))
            .collect();
        let phases = (0..VISUAL_DIM).map(|_| rng.random_range(-PI..PI)).collect();
        Self { weights, phases }
    }

    fn features(&self, head: &Se3Pose, noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = head.position();
        let r = head.rotation();
        let mut x = [0.0; 12];
        x[..3].copy_from_slice(p.as_slice());
        for i in 0..3 {
            for j in 0..3 {
                x[3 + 3 * i + j] = r[(i, j)];
            }
        }
        self.weights
            .iter()
            .zip(&self.phases)
            .map(|(w, phase)| {
                let arg: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + phase;
                let noise: f64 = rng.sample(StandardNormal);
                arg.sin() + noise_std * noise
            })
            .collect()
    }
}

fn add_noise(v: &Vec3, std: f64, extent: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let mut out = *v;
    if std > 0.0 {
        for c in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += std * z;
        }
    }
    out.map(|c| c.clamp(-extent, extent))
}

fn generate_one(cfg: &SyntheticConfig, index: usize, map: &VisualMap) -> TrajectoryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let class = cfg.classes[index % cfg.classes.len()];
    let dt = 1.0 / cfg.fps;
    let dynamics = Dynamics {
        dt,
        a_eye: smoothing(dt, EYE_TAU),
        a_head: smoothing(dt, HEAD_TAU),
        a_wrist: smoothing(dt, WRIST_TAU),
        a_body: smoothing(dt, BODY_TAU),
        jump_prob: 1.0 - (-cfg.gaze_target_rate * class.rate_multiplier() * dt).exp(),
        hand_lag: cfg.hand_lag,
        extent: cfg.workspace_extent,
    };

    let limit = 0.2 * cfg.workspace_extent;
    let heading = rng.random_range(-PI..PI);
    let mut body = Body {
        class,
        root: Vec3::new(rng.random_range(-limit..=limit), rng.random_range(-limit..=limit), 0.0),
        body_yaw: heading,
        heading,
        turn: if rng.random::<bool>() { WALK_TURN_RATE } else { -WALK_TURN_RATE },
        eye_yaw: heading,
        eye_pitch: 0.0,
        head_yaw: heading,
        head_pitch: 0.0,
        wrists: [Vec3::zeros(); 2],
        goal: Vec3::zeros(),
        goal_history: VecDeque::new(),
    };
    body.goal = body.sample_goal(&mut rng);
    let (yaw, pitch) = yaw_pitch(&(body.goal - body.head_position()));
    (body.eye_yaw, body.eye_pitch, body.head_yaw, body.head_pitch) = (yaw, pitch, yaw, pitch);
    body.wrists = body.wrist_targets();
    // Settle on the fixed point of the initial goal.
    for _ in 0..WARMUP_STEPS {
        body.step(&dynamics, &mut rng, false);
    }

    let mut states = Vec::with_capacity(cfg.length);
    let mut clean_heads = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            body.step(&dynamics, &mut rng, true);
        }
        let s = body.state(cfg.gaze_length);
        let e = cfg.workspace_extent;
        let head_p = add_noise(&s.head.position(), cfg.noise_std, e, &mut rng);
        let head = Se3Pose::from_parts_unchecked(head_p, s.head.rotation());
        clean_heads.push(head);
        states.push(VisuomotorState {
            head,
            gaze: add_noise(&s.gaze, cfg.noise_std, e, &mut rng),
            joints: std::array::from_fn::<_, NUM_JOINTS, _>(|j| add_noise(&s.joints[j], cfg.noise_std, e, &mut rng)),
        });
    }

    let duration = (cfg.length.saturating_sub(1)) as f64 / cfg.fps;
    let frames = (duration * VISUAL_FPS + 1e-9).floor() as usize + 1;
    let features = (0..frames)
        .map(|j| {
            let idx = ((j as f64 / VISUAL_FPS * cfg.fps).round() as usize).min(cfg.length - 1);
            map.features(&clean_heads[idx], cfg.noise_std, &mut rng)
        })
        .collect();

    TrajectoryRecord {
        id: format!("syn-{}-{index:05}", cfg.seed),
        fps: cfg.fps,
        class_label: class.label().to_string(),
        valid: vec![true; states.len()],
        states,
        visual_features: Some(features),
    }
}

/// Generates `cfg.n_trajectories` records. Trajectory `i` uses stream `i` of
/// a ChaCha generator seeded with `cfg.seed`, so output is deterministic and
/// independent of generation order.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    let map = VisualMap::new();
    Ok((0..cfg.n_trajectories).map(|i| generate_one(cfg, i, &map)).collect())
}
