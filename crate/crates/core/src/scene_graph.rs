//! Hierarchical map: floors → rooms → planes, plus robot keyframes.
//!
//! All mutations go through [`SceneGraph`]; each committed mutation bumps
//! the revision counter and queues one [`Delta`] carrying the full values
//! of every entity it touched. A [`GraphSnapshot`] is a plain value, and
//! applying `deltas_since(r)` to the snapshot taken at `r` reproduces the
//! current snapshot exactly.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{Factor, FactorKind, FactorNoise, NoiseConfig, PlaneCoeffs};
use crate::geometry::Pose;
use crate::room_detect::{self, DetectorConfig, RoomViolation};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(KeyframeId, "kf");
id_type!(PlaneId, "plane");
id_type!(RoomId, "room");
id_type!(FloorId, "floor");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisClass {
    X,
    Y,
    Other,
}

impl AxisClass {
    /// Dominant horizontal normal direction, `X` iff `|n_x| ≥ cos(tol)`.
    pub fn of(normal: &Vector3<f64>, tolerance_deg: f64) -> AxisClass {
        let c = tolerance_deg.to_radians().cos();
        if normal.x.abs() >= c {
            AxisClass::X
        } else if normal.y.abs() >= c {
            AxisClass::Y
        } else {
            AxisClass::Other
        }
    }

    /// Unit horizontal axis the class refers to.
    pub fn axis(self) -> Option<Vector2<f64>> {
        match self {
            AxisClass::X => Some(Vector2::x()),
            AxisClass::Y => Some(Vector2::y()),
            AxisClass::Other => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneProvenance {
    Observed,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomProvenance {
    Auto,
    Human,
}

/// Rectangle with explicit in-plane axes. Used for observed wall segments
/// (body frame) and for ground-truth walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Rectangle {
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        let u = self.axis_u * self.half_u;
        let v = self.axis_v * self.half_v;
        [
            self.center - u - v,
            self.center + u - v,
            self.center + u + v,
            self.center - u + v,
        ]
    }

    pub fn transformed(&self, pose: &Pose) -> Rectangle {
        Rectangle {
            center: pose.transform_point(&self.center),
            axis_u: pose.rotation * self.axis_u,
            axis_v: pose.rotation * self.axis_v,
            half_u: self.half_u,
            half_v: self.half_v,
        }
    }

    /// Euclidean distance from `p` to the closest point of the rectangle.
    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.center;
        let a = d.dot(&self.axis_u).clamp(-self.half_u, self.half_u);
        let b = d.dot(&self.axis_v).clamp(-self.half_v, self.half_v);
        let closest = self.center + self.axis_u * a + self.axis_v * b;
        (p - closest).norm()
    }

    /// Cell-centred grid of points with at most `spacing` between
    /// neighbours along each axis.
    pub fn sample(&self, spacing: f64) -> Vec<Vector3<f64>> {
        let n_u = ((2.0 * self.half_u / spacing).round() as usize).max(1);
        let n_v = ((2.0 * self.half_v / spacing).round() as usize).max(1);
        let step_u = 2.0 * self.half_u / n_u as f64;
        let step_v = 2.0 * self.half_v / n_v as f64;
        let mut out = Vec::with_capacity(n_u * n_v);
        for i in 0..n_u {
            let a = -self.half_u + (i as f64 + 0.5) * step_u;
            for j in 0..n_v {
                let b = -self.half_v + (j as f64 + 0.5) * step_v;
                out.push(self.center + self.axis_u * a + self.axis_v * b);
            }
        }
        out
    }
}

/// Extent of a plane landmark: a rectangle centred on the plane whose axes
/// are derived from the normal (`u` horizontal, `v = n × u`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub center: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

/// In-plane axes used by every [`Extent`].
pub fn extent_axes(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let z = Vector3::z();
    let mut u = z.cross(normal);
    if u.norm() < 1e-6 {
        u = Vector3::x().cross(normal);
    }
    let u = u.normalize();
    let v = normal.cross(&u);
    (u, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub id: PlaneId,
    pub normal: Vector3<f64>,
    /// Convention `n·p + d = 0`.
    pub offset: f64,
    pub extent: Extent,
    pub axis_class: AxisClass,
    pub provenance: PlaneProvenance,
}

impl Plane {
    pub fn coeffs(&self) -> PlaneCoeffs {
        PlaneCoeffs::new(self.normal, self.offset)
    }

    pub fn rectangle(&self) -> Rectangle {
        let (u, v) = extent_axes(&self.normal);
        Rectangle {
            center: self.extent.center,
            axis_u: u,
            axis_v: v,
            half_u: self.extent.half_u,
            half_v: self.extent.half_v,
        }
    }

    /// Interval covered by the extent along the horizontal world axis `axis`.
    pub fn interval_along(&self, axis: &Vector2<f64>) -> (f64, f64) {
        let r = self.rectangle();
        let a3 = Vector3::new(axis.x, axis.y, 0.0);
        let c = r.center.dot(&a3);
        let reach = r.half_u * r.axis_u.dot(&a3).abs() + r.half_v * r.axis_v.dot(&a3).abs();
        (c - reach, c + reach)
    }

    /// Replace `(n, d)` and re-project the extent centre onto the new plane.
    fn set_coeffs(&mut self, c: &PlaneCoeffs, tolerance_deg: f64) {
        self.normal = c.normal;
        self.offset = c.offset;
        let center = self.extent.center;
        self.extent.center = center - self.normal * (self.normal.dot(&center) + self.offset);
        self.axis_class = AxisClass::of(&self.normal, tolerance_deg);
    }

    /// Grow the extent to the bounding rectangle of itself and `rect`.
    fn absorb(&mut self, rect: &Rectangle) {
        let (u, v) = extent_axes(&self.normal);
        let c = self.extent.center;
        let (mut lo_u, mut hi_u) = (-self.extent.half_u, self.extent.half_u);
        let (mut lo_v, mut hi_v) = (-self.extent.half_v, self.extent.half_v);
        for p in rect.corners() {
            let a = (p - c).dot(&u);
            let b = (p - c).dot(&v);
            lo_u = lo_u.min(a);
            hi_u = hi_u.max(a);
            lo_v = lo_v.min(b);
            hi_v = hi_v.max(b);
        }
        let center = c + u * ((lo_u + hi_u) / 2.0) + v * ((lo_v + hi_v) / 2.0);
        self.extent = Extent {
            center: center - self.normal * (self.normal.dot(&center) + self.offset),
            half_u: (hi_u - lo_u) / 2.0,
            half_v: (hi_v - lo_v) / 2.0,
        };
    }
}

/// Build a plane whose extent is `rect` projected onto it.
pub fn plane_from_rectangle(
    id: PlaneId,
    coeffs: &PlaneCoeffs,
    rect: &Rectangle,
    provenance: PlaneProvenance,
    tolerance_deg: f64,
) -> Plane {
    let normal = coeffs.normal;
    let c = rect.center - normal * (normal.dot(&rect.center) + coeffs.offset);
    let mut plane = Plane {
        id,
        normal,
        offset: coeffs.offset,
        extent: Extent { center: c, half_u: 0.0, half_v: 0.0 },
        axis_class: AxisClass::of(&normal, tolerance_deg),
        provenance,
    };
    plane.absorb(rect);
    plane
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub pose: Pose,
    pub stamp: f64,
    pub observed_plane_ids: Vec<PlaneId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub id: RoomId,
    pub center: Vector2<f64>,
    /// X pair then Y pair.
    pub plane_ids: [PlaneId; 4],
    pub provenance: RoomProvenance,
    pub floor_id: FloorId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Floor {
    pub id: FloorId,
    pub room_ids: Vec<RoomId>,
}

/// One plane measured from a keyframe, in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneObservation {
    pub plane: PlaneCoeffs,
    /// Observed segment of the plane, body frame.
    pub extent: Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Change {
    Keyframe(Keyframe),
    Plane(Plane),
    Room(Room),
    RoomRemoved(RoomId),
    Floor(Floor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub revision: u64,
    pub changes: Vec<Change>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub revision: u64,
    pub keyframes: Vec<Keyframe>,
    pub planes: Vec<Plane>,
    pub rooms: Vec<Room>,
    pub floors: Vec<Floor>,
}

fn upsert<T, K: Ord>(items: &mut Vec<T>, item: T, key: impl Fn(&T) -> K) {
    match items.binary_search_by(|x| key(x).cmp(&key(&item))) {
        Ok(i) => items[i] = item,
        Err(i) => items.insert(i, item),
    }
}

impl GraphSnapshot {
    pub fn apply(&mut self, delta: &Delta) -> Result<(), GraphError> {
        if delta.revision != self.revision + 1 {
            return Err(GraphError::RevisionGap {
                expected: self.revision + 1,
                got: delta.revision,
            });
        }
        for change in &delta.changes {
            match change {
                Change::Keyframe(k) => upsert(&mut self.keyframes, k.clone(), |x| x.id),
                Change::Plane(p) => upsert(&mut self.planes, p.clone(), |x| x.id),
                Change::Room(r) => upsert(&mut self.rooms, r.clone(), |x| x.id),
                Change::RoomRemoved(id) => self.rooms.retain(|r| r.id != *id),
                Change::Floor(f) => upsert(&mut self.floors, f.clone(), |x| x.id),
            }
        }
        self.revision = delta.revision;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty() && self.planes.is_empty() && self.rooms.is_empty() && self.floors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("keyframe stamp {got} does not follow last stamp {last}")]
    NonMonotoneStamp { last: f64, got: f64 },
    #[error("unknown plane {0}")]
    UnknownPlane(PlaneId),
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(KeyframeId),
    #[error("unknown room {0}")]
    UnknownRoom(RoomId),
    #[error("invalid room: {0}")]
    InvalidRoom(#[from] RoomViolation),
    #[error("{0} was created by an operator and cannot be removed automatically")]
    HumanRoomProtected(RoomId),
    #[error("revision {requested} is ahead of current revision {current}")]
    FutureRevision { requested: u64, current: u64 },
    #[error("revision {requested} is older than the delta buffer (oldest replayable {oldest})")]
    Evicted { requested: u64, oldest: u64 },
    #[error("delta revision {got} does not follow {expected}")]
    RevisionGap { expected: u64, got: u64 },
}

/// Gated nearest-neighbour plane association.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub max_angle_deg: f64,
    pub max_offset: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig { max_angle_deg: 10.0, max_offset: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub association: AssociationConfig,
    pub detector: DetectorConfig,
    pub noise: NoiseConfig,
    /// Number of deltas kept for replay.
    pub delta_capacity: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            association: AssociationConfig::default(),
            detector: DetectorConfig::default(),
            noise: NoiseConfig::default(),
            delta_capacity: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeAdded {
    pub id: KeyframeId,
    /// Landmark each observation was associated with, in input order.
    pub plane_ids: Vec<PlaneId>,
    pub new_planes: Vec<PlaneId>,
}

/// New values for optimized variables, written back by the optimizer.
#[derive(Debug, Clone, Default)]
pub struct EstimateUpdate {
    pub poses: Vec<(KeyframeId, Pose)>,
    pub planes: Vec<(PlaneId, PlaneCoeffs)>,
    pub rooms: Vec<(RoomId, Vector2<f64>)>,
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    config: GraphConfig,
    revision: u64,
    keyframes: Vec<Keyframe>,
    planes: Vec<Plane>,
    rooms: BTreeMap<RoomId, Room>,
    floors: Vec<Floor>,
    factors: Vec<Factor>,
    next_room: u64,
    deltas: VecDeque<Delta>,
}

impl Default for SceneGraph {
    fn default() -> Self {
        Self::new(GraphConfig::default())
    }
}

impl SceneGraph {
    pub fn new(config: GraphConfig) -> Self {
        SceneGraph {
            config,
            revision: 0,
            keyframes: Vec::new(),
            planes: Vec::new(),
            rooms: BTreeMap::new(),
            floors: Vec::new(),
            factors: Vec::new(),
            next_room: 0,
            deltas: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(id.0 as usize)
    }

    pub fn planes(&self) -> &[Plane] {
        &self.planes
    }

    pub fn plane(&self, id: PlaneId) -> Option<&Plane> {
        self.planes.get(id.0 as usize)
    }

    pub fn rooms(&self) -> impl Iterator<Item = &Room> {
        self.rooms.values()
    }

    pub fn room(&self, id: RoomId) -> Option<&Room> {
        self.rooms.get(&id)
    }

    pub fn room_count(&self) -> usize {
        self.rooms.len()
    }

    pub fn floors(&self) -> &[Floor] {
        &self.floors
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    fn commit(&mut self, changes: Vec<Change>) {
        self.revision += 1;
        self.deltas.push_back(Delta { revision: self.revision, changes });
        while self.deltas.len() > self.config.delta_capacity {
            self.deltas.pop_front();
        }
    }

    /// Register a plane landmark directly (ground truth, tests, scripted maps).
    pub fn add_plane(&mut self, coeffs: PlaneCoeffs, rect: &Rectangle, provenance: PlaneProvenance) -> PlaneId {
        let id = PlaneId(self.planes.len() as u64);
        let plane = plane_from_rectangle(id, &coeffs, rect, provenance, self.config.detector.angle_tolerance_deg);
        self.planes.push(plane.clone());
        self.commit(vec![Change::Plane(plane)]);
        id
    }

    /// Offset gate is the landmark's distance from the observed segment's
    /// centre, so it does not depend on where the world origin is.
    fn associate(&self, world: &PlaneCoeffs, rect: &Rectangle) -> Option<PlaneId> {
        let cos_gate = self.config.association.max_angle_deg.to_radians().cos();
        self.planes
            .iter()
            .filter(|p| p.normal.dot(&world.normal) > cos_gate)
            .map(|p| (p.id, p.coeffs().signed_distance(&rect.center).abs()))
            .filter(|(_, dd)| *dd < self.config.association.max_offset)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(id, _)| id)
    }

    pub fn add_keyframe(
        &mut self,
        pose: Pose,
        stamp: f64,
        observations: &[PlaneObservation],
    ) -> Result<KeyframeAdded, GraphError> {
        if let Some(last) = self.keyframes.last() {
            if !(stamp > last.stamp) {
                return Err(GraphError::NonMonotoneStamp { last: last.stamp, got: stamp });
            }
        }
        let id = KeyframeId(self.keyframes.len() as u64);
        let tol = self.config.detector.angle_tolerance_deg;
        let mut touched: Vec<PlaneId> = Vec::new();
        let mut plane_ids = Vec::with_capacity(observations.len());
        let mut new_planes = Vec::new();

        for obs in observations {
            let world = obs.plane.to_world(&pose);
            let rect = obs.extent.transformed(&pose);
            let pid = match self.associate(&world, &rect) {
                Some(pid) => {
                    self.planes[pid.0 as usize].absorb(&rect);
                    pid
                }
                None => {
                    let pid = PlaneId(self.planes.len() as u64);
                    self.planes
                        .push(plane_from_rectangle(pid, &world, &rect, PlaneProvenance::Observed, tol));
                    new_planes.push(pid);
                    pid
                }
            };
            if !touched.contains(&pid) {
                touched.push(pid);
            }
            plane_ids.push(pid);
            self.factors.push(Factor {
                kind: FactorKind::PlaneObs { keyframe: id, plane: pid, observed: obs.plane },
                noise: FactorNoise::new(self.config.noise.plane_information()),
            });
        }

        let keyframe = Keyframe { id, pose, stamp, observed_plane_ids: touched.clone() };
        self.keyframes.push(keyframe.clone());
        let mut changes = vec![Change::Keyframe(keyframe)];
        touched.sort();
        changes.extend(touched.iter().map(|p| Change::Plane(self.planes[p.0 as usize].clone())));
        self.commit(changes);
        Ok(KeyframeAdded { id, plane_ids, new_planes })
    }

    /// Relative-pose constraint `from⁻¹ ∘ to ≈ measured`. Factors are not
    /// part of snapshots, so no revision is committed.
    pub fn add_odometry(&mut self, from: KeyframeId, to: KeyframeId, measured: Pose) -> Result<(), GraphError> {
        for k in [from, to] {
            if self.keyframe(k).is_none() {
                return Err(GraphError::UnknownKeyframe(k));
            }
        }
        self.factors.push(Factor {
            kind: FactorKind::Odometry { from, to, measured },
            noise: FactorNoise::new(self.config.noise.odometry_information()),
        });
        Ok(())
    }

    pub fn validate_room(&self, plane_ids: &[PlaneId; 4], provenance: RoomProvenance) -> Result<(), RoomViolation> {
        room_detect::validate_candidate(plane_ids, self, &self.config.detector, provenance)
    }

    /// Room whose centre lies within the duplicate threshold of `center`.
    pub fn duplicate_of(&self, center: &Vector2<f64>) -> Option<RoomId> {
        let limit = self.config.detector.duplicate_distance;
        self.rooms
            .values()
            .find(|r| (r.center - center).norm() < limit)
            .map(|r| r.id)
    }

    /// Add a room initialised at the plane-implied centre.
    pub fn add_room_from_planes(
        &mut self,
        plane_ids: [PlaneId; 4],
        provenance: RoomProvenance,
    ) -> Result<RoomId, GraphError> {
        self.validate_room(&plane_ids, provenance)?;
        let planes = plane_ids.map(|p| self.planes[p.0 as usize].coeffs());
        let center = crate::factors::room_center_from_planes(&planes, self.config.detector.angle_tolerance_deg)
            .map_err(RoomViolation::from)?;
        self.add_room(center, plane_ids, provenance)
    }

    pub fn add_room(
        &mut self,
        center: Vector2<f64>,
        plane_ids: [PlaneId; 4],
        provenance: RoomProvenance,
    ) -> Result<RoomId, GraphError> {
        for p in plane_ids {
            if self.plane(p).is_none() {
                return Err(GraphError::UnknownPlane(p));
            }
        }
        self.validate_room(&plane_ids, provenance)?;
        let tol = self.config.detector.angle_tolerance_deg;
        let plane_ids = crate::factors::pair_planes(&plane_ids, |p| self.planes[p.0 as usize].normal, tol)
            .map_err(RoomViolation::from)?;
        let planes = plane_ids.map(|p| self.planes[p.0 as usize].coeffs());
        let implied = crate::factors::room_center_from_planes(&planes, tol).map_err(RoomViolation::from)?;
        if self.duplicate_of(&implied).is_some() {
            return Err(RoomViolation::DuplicateRoom.into());
        }

        if self.floors.is_empty() {
            self.floors.push(Floor { id: FloorId(0), room_ids: Vec::new() });
        }
        let floor_id = self.floors[0].id;
        let id = RoomId(self.next_room);
        self.next_room += 1;
        let room = Room { id, center, plane_ids, provenance, floor_id };
        self.rooms.insert(id, room.clone());
        self.floors[0].room_ids.push(id);

        let mut factor = Factor {
            kind: FactorKind::Room { room: id, planes: plane_ids, provenance },
            noise: FactorNoise::new(self.config.noise.room_information()),
        };
        if provenance == RoomProvenance::Human {
            factor = crate::factors::apply_human_weighting(factor, self.config.noise.human_kappa)
                .expect("human room factor with validated kappa");
        }
        self.factors.push(factor);
        self.commit(vec![Change::Room(room), Change::Floor(self.floors[0].clone())]);
        Ok(id)
    }

    /// Remove an automatically detected room and its factor.
    pub fn remove_room(&mut self, id: RoomId) -> Result<(), GraphError> {
        let room = self.rooms.get(&id).ok_or(GraphError::UnknownRoom(id))?;
        if room.provenance == RoomProvenance::Human {
            return Err(GraphError::HumanRoomProtected(id));
        }
        let floor_id = room.floor_id;
        self.rooms.remove(&id);
        self.factors
            .retain(|f| !matches!(f.kind, FactorKind::Room { room, .. } if room == id));
        let floor = self
            .floors
            .iter_mut()
            .find(|f| f.id == floor_id)
            .expect("room floor exists");
        floor.room_ids.retain(|r| *r != id);
        let floor = floor.clone();
        self.commit(vec![Change::RoomRemoved(id), Change::Floor(floor)]);
        Ok(())
    }

    /// Write optimized values back; commits one revision if anything changed.
    pub fn apply_estimate(&mut self, update: &EstimateUpdate) -> Result<(), GraphError> {
        let tol = self.config.detector.angle_tolerance_deg;
        let mut changes = Vec::new();
        for (id, pose) in &update.poses {
            let kf = self
                .keyframes
                .get_mut(id.0 as usize)
                .ok_or(GraphError::UnknownKeyframe(*id))?;
            if kf.pose != *pose {
                kf.pose = *pose;
                changes.push(Change::Keyframe(kf.clone()));
            }
        }
        for (id, coeffs) in &update.planes {
            let plane = self.planes.get_mut(id.0 as usize).ok_or(GraphError::UnknownPlane(*id))?;
            if plane.normal != coeffs.normal || plane.offset != coeffs.offset {
                plane.set_coeffs(coeffs, tol);
                changes.push(Change::Plane(plane.clone()));
            }
        }
        for (id, center) in &update.rooms {
            let room = self.rooms.get_mut(id).ok_or(GraphError::UnknownRoom(*id))?;
            if room.center != *center {
                room.center = *center;
                changes.push(Change::Room(room.clone()));
            }
        }
        if !changes.is_empty() {
            self.commit(changes);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            revision: self.revision,
            keyframes: self.keyframes.clone(),
            planes: self.planes.clone(),
            rooms: self.rooms.values().cloned().collect(),
            floors: self.floors.clone(),
        }
    }

    /// Ordered deltas `(revision, current]`.
    pub fn deltas_since(&self, revision: u64) -> Result<Vec<Delta>, GraphError> {
        if revision > self.revision {
            return Err(GraphError::FutureRevision { requested: revision, current: self.revision });
        }
        if revision == self.revision {
            return Ok(Vec::new());
        }
        let oldest = self.deltas.front().map(|d| d.revision).unwrap_or(self.revision + 1);
        if revision + 1 < oldest {
            return Err(GraphError::Evicted { requested: revision, oldest: oldest.saturating_sub(1) });
        }
        Ok(self.deltas.iter().filter(|d| d.revision > revision).cloned().collect())
    }

    /// Every id referenced by any entity or factor resolves.
    pub fn check_integrity(&self) -> Result<(), String> {
        for (i, k) in self.keyframes.iter().enumerate() {
            if k.id.0 as usize != i {
                return Err(format!("keyframe id {} at index {i}", k.id));
            }
            for p in &k.observed_plane_ids {
                if self.plane(*p).is_none() {
                    return Err(format!("{} observes missing {p}", k.id));
                }
            }
        }
        for w in self.keyframes.windows(2) {
            if !(w[1].stamp > w[0].stamp) {
                return Err(format!("stamps not increasing at {}", w[1].id));
            }
        }
        for (i, p) in self.planes.iter().enumerate() {
            if p.id.0 as usize != i {
                return Err(format!("plane id {} at index {i}", p.id));
            }
        }
        for r in self.rooms.values() {
            for p in &r.plane_ids {
                if self.plane(*p).is_none() {
                    return Err(format!("{} references missing {p}", r.id));
                }
            }
            let floor = self.floors.iter().find(|f| f.id == r.floor_id);
            match floor {
                Some(f) if f.room_ids.contains(&r.id) => {}
                _ => return Err(format!("{} not listed by its floor", r.id)),
            }
            let owners = self.floors.iter().filter(|f| f.room_ids.contains(&r.id)).count();
            if owners != 1 {
                return Err(format!("{} belongs to {owners} floors", r.id));
            }
        }
        for f in &self.floors {
            for r in &f.room_ids {
                if !self.rooms.contains_key(r) {
                    return Err(format!("{} lists missing {r}", f.id));
                }
            }
        }
        for factor in &self.factors {
            for key in factor.keys() {
                let ok = match key {
                    crate::factors::VarKey::Keyframe(k) => self.keyframe(k).is_some(),
                    crate::factors::VarKey::Plane(p) => self.plane(p).is_some(),
                    crate::factors::VarKey::Room(r) => self.rooms.contains_key(&r),
                };
                if !ok {
                    return Err(format!("factor references missing {key:?}"));
                }
            }
        }
        Ok(())
    }
}
