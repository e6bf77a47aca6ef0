//! Synthetic rectangular-room worlds, trajectories and noisy sensor logs.
//!
//! Each room contributes four wall keys `room<i>:wall:<side>` with side one
//! of `-x`, `+x`, `-y`, `+y`. Wall normals point into the room, so the `-x`
//! wall of a room spanning `[x0, x1]` is `n = (1, 0, 0)`, `d = -x0`.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{plane_to_body, PlaneCoeffs};
use crate::geometry::{sphere_retract, Pose};
use crate::scene_graph::Rectangle;

mod pipeline;
pub mod tum;

pub use pipeline::{
    evaluate, run_pipeline, Evaluation, InterventionOutcome, InterventionStatus, PipelineEngine, PipelineError,
    PipelineOptions, PipelineReport, PipelineResult, StepOutcome,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Standard deviations: odometry per keyframe step, plane per observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub odom_translation: f64,
    pub odom_rotation: f64,
    pub plane_normal: f64,
    pub plane_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub time: f64,
    pub plane_keys: [String; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub rooms: Vec<RoomSpec>,
    pub trajectory: Vec<Waypoint>,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub occluded_plane_keys: Vec<String>,
    #[serde(default)]
    pub interventions: Vec<InterventionSpec>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl ScenarioError {
    fn from_json(e: serde_json::Error) -> Self {
        ScenarioError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

const SIDES: [&str; 4] = ["-x", "+x", "-y", "+y"];

pub fn wall_key(room: usize, side: &str) -> String {
    format!("room{room}:wall:{side}")
}

/// Ground-truth wall with the plane and the finite rectangle it bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthWall {
    pub key: String,
    pub plane: PlaneCoeffs,
    pub extent: Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRoom {
    pub name: String,
    pub center: Vector2<f64>,
    pub plane_keys: [String; 4],
}

impl RoomSpec {
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new((self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    /// Walls in `-x, +x, -y, +y` order.
    pub fn walls(&self, index: usize) -> [GroundTruthWall; 4] {
        let [x0, y0] = self.min;
        let [x1, y1] = self.max;
        let h = self.height / 2.0;
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let (hx, hy) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
        let specs = [
            (Vector3::x(), Vector3::new(x0, cy, h), Vector3::y(), hy),
            (-Vector3::x(), Vector3::new(x1, cy, h), Vector3::y(), hy),
            (Vector3::y(), Vector3::new(cx, y0, h), Vector3::x(), hx),
            (-Vector3::y(), Vector3::new(cx, y1, h), Vector3::x(), hx),
        ];
        let mut i = 0;
        specs.map(|(n, c, u, half_u)| {
            let wall = GroundTruthWall {
                key: wall_key(index, SIDES[i]),
                plane: PlaneCoeffs::through(n, &c),
                extent: Rectangle { center: c, axis_u: u, axis_v: Vector3::z(), half_u, half_v: h },
            };
            i += 1;
            wall
        })
    }
}

impl Scenario {
    pub fn walls(&self) -> Vec<GroundTruthWall> {
        self.rooms.iter().enumerate().flat_map(|(i, r)| r.walls(i)).collect()
    }

    pub fn ground_truth_rooms(&self) -> Vec<GroundTruthRoom> {
        self.rooms
            .iter()
            .enumerate()
            .map(|(i, r)| GroundTruthRoom {
                name: format!("room{i}"),
                center: r.center(),
                plane_keys: SIDES.map(|s| wall_key(i, s)),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!("schema {} is not supported (expected {SCHEMA_VERSION})", self.schema));
        }
        for (i, r) in self.rooms.iter().enumerate() {
            let finite = r.min.iter().chain(&r.max).all(|v| v.is_finite()) && r.height.is_finite();
            if !finite || !(r.max[0] > r.min[0] && r.max[1] > r.min[1] && r.height > 0.0) {
                return bad(format!("room {i} is degenerate"));
            }
        }
        if self.trajectory.is_empty() {
            return bad("trajectory is empty".into());
        }
        for w in &self.trajectory {
            if ![w.t, w.x, w.y, w.yaw].iter().all(|v| v.is_finite()) {
                return bad(format!("waypoint at t={} has a non-finite field", w.t));
            }
        }
        for pair in self.trajectory.windows(2) {
            if !(pair[1].t > pair[0].t) {
                return bad(format!("trajectory time {} does not follow {}", pair[1].t, pair[0].t));
            }
        }
        let n = &self.noise;
        for (name, v) in [
            ("odom_translation", n.odom_translation),
            ("odom_rotation", n.odom_rotation),
            ("plane_normal", n.plane_normal),
            ("plane_offset", n.plane_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("noise.{name} must be a non-negative number, got {v}"));
            }
        }
        let keys: BTreeSet<String> = self.walls().into_iter().map(|w| w.key).collect();
        for k in &self.occluded_plane_keys {
            if !keys.contains(k) {
                return bad(format!("occluded key {k:?} names no wall"));
            }
        }
        for iv in &self.interventions {
            if !iv.time.is_finite() {
                return bad("intervention time must be finite".into());
            }
            for k in &iv.plane_keys {
                if !keys.contains(k) {
                    return bad(format!("intervention key {k:?} names no wall"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(ScenarioError::from_json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    Scenario::from_json(&text)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    std::fs::write(path, scenario.to_json() + "\n")
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

/// Bundled scenarios, by file stem.
pub mod presets {
    pub const NOISELESS: &str = include_str!("../../scenarios/noiseless.json");
    pub const OCCLUSION: &str = include_str!("../../scenarios/occlusion.json");
    pub const NOISY: &str = include_str!("../../scenarios/noisy.json");

    pub fn get(name: &str) -> Option<&'static str> {
        match name {
            "noiseless" => Some(NOISELESS),
            "occlusion" => Some(OCCLUSION),
            "noisy" => Some(NOISY),
            _ => None,
        }
    }
}

/// Sensor and keyframing parameters shared by all scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub range: f64,
    pub height: f64,
    pub keyframe_distance: f64,
    pub keyframe_angle_deg: f64,
    /// Upper bound on the interpolation step along the trajectory.
    pub step: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel { range: 8.0, height: 1.0, keyframe_distance: 0.5, keyframe_angle_deg: 30.0, step: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogObservation {
    pub key: String,
    /// Body frame.
    pub plane: PlaneCoeffs,
    /// Body frame.
    pub extent: Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogKeyframe {
    pub stamp: f64,
    pub gt_pose: Pose,
    /// Measured motion from the previous keyframe; absent for the first.
    pub odometry: Option<Pose>,
    pub observations: Vec<LogObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationLog {
    pub schema: u32,
    pub scenario: Scenario,
    pub walls: Vec<GroundTruthWall>,
    pub rooms: Vec<GroundTruthRoom>,
    pub keyframes: Vec<LogKeyframe>,
    pub warnings: Vec<String>,
}

impl SimulationLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }

    pub fn from_json(text: &str) -> Result<SimulationLog, ScenarioError> {
        let log: SimulationLog = serde_json::from_str(text).map_err(ScenarioError::from_json)?;
        if log.schema != SCHEMA_VERSION {
            return Err(ScenarioError::Invalid(format!("log schema {} is not supported", log.schema)));
        }
        log.scenario.validate()?;
        Ok(log)
    }

    pub fn ground_truth_trajectory(&self) -> Vec<(f64, Pose)> {
        self.keyframes.iter().map(|k| (k.stamp, k.gt_pose)).collect()
    }
}

pub fn load_log(path: impl AsRef<Path>) -> Result<SimulationLog, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    SimulationLog::from_json(&text)
}

pub fn save_log(log: &SimulationLog, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    std::fs::write(path, log.to_json() + "\n")
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Dense samples `(t, x, y, yaw)` along the piecewise-linear trajectory.
fn densify(trajectory: &[Waypoint], step: f64) -> Vec<Waypoint> {
    let mut out = vec![trajectory[0]];
    for pair in trajectory.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let dyaw = wrap_angle(b.yaw - a.yaw);
        let dist = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        // one radian of turning counts as one metre of travel
        let n = ((dist.max(dyaw.abs()) / step).ceil() as usize).max(1);
        for i in 1..=n {
            let s = i as f64 / n as f64;
            out.push(Waypoint {
                t: a.t + s * (b.t - a.t),
                x: a.x + s * (b.x - a.x),
                y: a.y + s * (b.y - a.y),
                yaw: wrap_angle(a.yaw + s * dyaw),
            });
        }
    }
    out
}

/// Keyframe samples: the first waypoint, then whenever the robot has moved
/// `keyframe_distance` or turned `keyframe_angle_deg` since the last one,
/// and the final waypoint.
pub fn keyframe_waypoints(trajectory: &[Waypoint], sensor: &SensorModel) -> Vec<Waypoint> {
    let dense = densify(trajectory, sensor.step);
    let mut out = vec![dense[0]];
    let max_turn = sensor.keyframe_angle_deg.to_radians();
    for w in &dense[1..] {
        let last = out.last().unwrap();
        let moved = ((w.x - last.x).powi(2) + (w.y - last.y).powi(2)).sqrt();
        let turned = wrap_angle(w.yaw - last.yaw).abs();
        if moved >= sensor.keyframe_distance - 1e-9 || turned >= max_turn - 1e-9 {
            out.push(*w);
        }
    }
    let end = *dense.last().unwrap();
    if out.last().unwrap().t < end.t {
        out.push(end);
    }
    out
}

fn visible(wall: &GroundTruthWall, sensor_pos: &Vector3<f64>, range: f64) -> bool {
    wall.plane.signed_distance(sensor_pos) > 0.0 && wall.extent.distance_to(sensor_pos) <= range
}

pub fn simulate(scenario: &Scenario) -> SimulationLog {
    simulate_with(scenario, &SensorModel::default())
}

pub fn simulate_with(scenario: &Scenario, sensor: &SensorModel) -> SimulationLog {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut gauss = |sigma: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    };
    let walls = scenario.walls();
    let occluded: BTreeSet<&str> = scenario.occluded_plane_keys.iter().map(String::as_str).collect();
    let noise = scenario.noise;
    let mut warnings = Vec::new();
    let mut keyframes: Vec<LogKeyframe> = Vec::new();

    for w in keyframe_waypoints(&scenario.trajectory, sensor) {
        let gt_pose = Pose::planar(w.x, w.y, sensor.height, w.yaw);
        if !scenario.rooms.iter().any(|r| r.contains(w.x, w.y)) {
            warnings.push(format!("t={}: position ({}, {}) is outside every room", w.t, w.x, w.y));
        }
        let odometry = keyframes.last().map(|prev| {
            let rel = prev.gt_pose.between(&gt_pose);
            let (nx, ny, nyaw) = (gauss(noise.odom_translation), gauss(noise.odom_translation), gauss(noise.odom_rotation));
            if nx == 0.0 && ny == 0.0 && nyaw == 0.0 {
                rel
            } else {
                rel.compose(&Pose::planar(nx, ny, 0.0, nyaw))
            }
        });
        let mut observations = Vec::new();
        for wall in &walls {
            if occluded.contains(wall.key.as_str()) || !visible(wall, &gt_pose.translation, sensor.range) {
                continue;
            }
            let mut plane = plane_to_body(&wall.plane, &gt_pose);
            let (a, b, dd) = (gauss(noise.plane_normal), gauss(noise.plane_normal), gauss(noise.plane_offset));
            if a != 0.0 || b != 0.0 {
                plane.normal = sphere_retract(&plane.normal, a, b);
            }
            plane.offset += dd;
            observations.push(LogObservation {
                key: wall.key.clone(),
                plane,
                extent: wall.extent.transformed(&gt_pose.inverse()),
            });
        }
        keyframes.push(LogKeyframe { stamp: w.t, gt_pose, odometry, observations });
    }

    SimulationLog {
        schema: SCHEMA_VERSION,
        scenario: scenario.clone(),
        walls,
        rooms: scenario.ground_truth_rooms(),
        keyframes,
        warnings,
    }
}
