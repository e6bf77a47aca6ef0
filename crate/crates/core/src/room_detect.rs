//! Rectangular room detection from the current plane set, and the
//! validation rules shared with operator-created rooms.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{position_along, room_center_from_planes, RoomMathError};
use crate::scene_graph::{AxisClass, Plane, PlaneId, RoomId, RoomProvenance, SceneGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub min_width: f64,
    pub max_width: f64,
    /// Anti-parallel and axis-class tolerance.
    pub angle_tolerance_deg: f64,
    /// Fraction of the other pair's span each wall extent must cover.
    pub min_overlap: f64,
    pub duplicate_distance: f64,
    /// A same-axis wall further than this inside a pair splits the candidate.
    pub interior_margin: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            min_width: 1.5,
            max_width: 10.0,
            angle_tolerance_deg: 10.0,
            min_overlap: 0.5,
            duplicate_distance: 1.0,
            interior_margin: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.min_width > 0.0 && self.min_width < self.max_width) {
            return Err(format!("width range [{}, {}] is invalid", self.min_width, self.max_width));
        }
        if !(self.angle_tolerance_deg > 0.0 && self.angle_tolerance_deg < 45.0) {
            return Err(format!("angle tolerance {} outside (0, 45)", self.angle_tolerance_deg));
        }
        if !(self.min_overlap >= 0.0 && self.duplicate_distance > 0.0 && self.interior_margin >= 0.0) {
            return Err("overlap, duplicate distance and interior margin must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RoomViolation {
    #[error("a room needs four distinct planes")]
    NotFourDistinct,
    #[error("unknown plane {0}")]
    UnknownPlane(PlaneId),
    #[error("a room needs exactly two X planes and two Y planes")]
    AxisMismatch,
    #[error("paired walls are not anti-parallel")]
    NotAntiParallel,
    #[error("wall separation outside the allowed width range")]
    WidthOutOfRange,
    #[error("wall extents do not cover the opposite pair's span")]
    NoOverlap,
    #[error("another wall lies inside the candidate")]
    InteriorPlane,
    #[error("a room already exists near this centre")]
    DuplicateRoom,
}

impl RoomViolation {
    pub fn name(&self) -> &'static str {
        match self {
            RoomViolation::NotFourDistinct => "not-4-distinct",
            RoomViolation::UnknownPlane(_) => "unknown-plane",
            RoomViolation::AxisMismatch => "axis-mismatch",
            RoomViolation::NotAntiParallel => "not-anti-parallel",
            RoomViolation::WidthOutOfRange => "width-out-of-range",
            RoomViolation::NoOverlap => "no-overlap",
            RoomViolation::InteriorPlane => "interior-plane",
            RoomViolation::DuplicateRoom => "duplicate-room",
        }
    }
}

impl From<RoomMathError> for RoomViolation {
    fn from(e: RoomMathError) -> Self {
        match e {
            RoomMathError::NotAntiParallel => RoomViolation::NotAntiParallel,
            RoomMathError::AxisMismatch => RoomViolation::AxisMismatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomCandidate {
    /// X pair then Y pair, each pair in ascending id order.
    pub plane_ids: [PlaneId; 4],
    pub center: Vector2<f64>,
}

impl RoomCandidate {
    fn sorted_ids(&self) -> [PlaneId; 4] {
        let mut ids = self.plane_ids;
        ids.sort();
        ids
    }

    fn min_id(&self) -> PlaneId {
        self.sorted_ids()[0]
    }
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Ordered span of a wall pair along its axis.
fn pair_span(a: &Plane, b: &Plane, u: &Vector2<f64>) -> (f64, f64) {
    let sa = position_along(&a.coeffs(), u);
    let sb = position_along(&b.coeffs(), u);
    (sa.min(sb), sa.max(sb))
}

/// Each wall of a pair must cover `min_overlap` of the other pair's span.
fn pair_covers(pair: [&Plane; 2], other_span: (f64, f64), along: &Vector2<f64>, min_overlap: f64) -> bool {
    let need = min_overlap * (other_span.1 - other_span.0);
    pair.iter().all(|p| interval_overlap(p.interval_along(along), other_span) >= need)
}

fn pair_width_ok(a: &Plane, b: &Plane, u: &Vector2<f64>, config: &DetectorConfig) -> bool {
    let (lo, hi) = pair_span(a, b, u);
    let w = hi - lo;
    w >= config.min_width && w <= config.max_width
}

fn anti_parallel(a: &Plane, b: &Plane, tolerance_deg: f64) -> bool {
    a.normal.dot(&-b.normal) >= tolerance_deg.to_radians().cos()
}

/// Some other wall of the same axis class strictly inside the pair, facing
/// into the candidate's cross span.
fn has_interior_wall(
    graph: &SceneGraph,
    pair: [&Plane; 2],
    class: AxisClass,
    u: &Vector2<f64>,
    cross_span: (f64, f64),
    along: &Vector2<f64>,
    config: &DetectorConfig,
) -> bool {
    let (lo, hi) = pair_span(pair[0], pair[1], u);
    let need = config.min_overlap * (cross_span.1 - cross_span.0);
    graph.planes().iter().any(|p| {
        if p.axis_class != class || p.id == pair[0].id || p.id == pair[1].id {
            return false;
        }
        let s = position_along(&p.coeffs(), u);
        s > lo + config.interior_margin
            && s < hi - config.interior_margin
            && interval_overlap(p.interval_along(along), cross_span) >= need
    })
}

/// Check the room rules in order and report the first one broken.
///
/// Operator rooms skip the extent-overlap and interior-wall rules: the
/// operator can see walls the sensor never covered.
pub fn validate_candidate(
    plane_ids: &[PlaneId; 4],
    graph: &SceneGraph,
    config: &DetectorConfig,
    provenance: RoomProvenance,
) -> Result<(), RoomViolation> {
    let mut sorted = *plane_ids;
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(RoomViolation::NotFourDistinct);
    }
    let mut planes = Vec::with_capacity(4);
    for id in plane_ids {
        planes.push(graph.plane(*id).ok_or(RoomViolation::UnknownPlane(*id))?);
    }
    let tol = config.angle_tolerance_deg;
    let classes: Vec<AxisClass> = planes.iter().map(|p| AxisClass::of(&p.normal, tol)).collect();
    let xs: Vec<&Plane> = planes.iter().zip(&classes).filter(|(_, c)| **c == AxisClass::X).map(|(p, _)| *p).collect();
    let ys: Vec<&Plane> = planes.iter().zip(&classes).filter(|(_, c)| **c == AxisClass::Y).map(|(p, _)| *p).collect();
    if xs.len() != 2 || ys.len() != 2 {
        return Err(RoomViolation::AxisMismatch);
    }
    if !anti_parallel(xs[0], xs[1], tol) || !anti_parallel(ys[0], ys[1], tol) {
        return Err(RoomViolation::NotAntiParallel);
    }
    let (ex, ey) = (Vector2::x(), Vector2::y());
    if !pair_width_ok(xs[0], xs[1], &ex, config) || !pair_width_ok(ys[0], ys[1], &ey, config) {
        return Err(RoomViolation::WidthOutOfRange);
    }
    if provenance == RoomProvenance::Human {
        return Ok(());
    }
    let x_span = pair_span(xs[0], xs[1], &ex);
    let y_span = pair_span(ys[0], ys[1], &ey);
    if !pair_covers([xs[0], xs[1]], y_span, &ey, config.min_overlap)
        || !pair_covers([ys[0], ys[1]], x_span, &ex, config.min_overlap)
    {
        return Err(RoomViolation::NoOverlap);
    }
    if has_interior_wall(graph, [xs[0], xs[1]], AxisClass::X, &ex, y_span, &ey, config)
        || has_interior_wall(graph, [ys[0], ys[1]], AxisClass::Y, &ey, x_span, &ex, config)
    {
        return Err(RoomViolation::InteriorPlane);
    }
    Ok(())
}

/// Drop near-duplicate candidates. Conflicting pairs are visited in order of
/// ascending centre distance (ties by smaller min plane id); the candidate
/// with the lexicographically larger sorted id tuple loses.
pub fn deduplicate(candidates: Vec<RoomCandidate>, threshold: f64) -> Vec<RoomCandidate> {
    let n = candidates.len();
    let mut conflicts = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = (candidates[i].center - candidates[j].center).norm();
            if d < threshold {
                let key = candidates[i].min_id().min(candidates[j].min_id());
                conflicts.push((d, key, i, j));
            }
        }
    }
    conflicts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then((a.2, a.3).cmp(&(b.2, b.3))));
    let mut alive = vec![true; n];
    for (_, _, i, j) in conflicts {
        if alive[i] && alive[j] {
            let loser = if candidates[i].sorted_ids() > candidates[j].sorted_ids() { i } else { j };
            alive[loser] = false;
        }
    }
    let mut out: Vec<RoomCandidate> = candidates.into_iter().zip(alive).filter(|(_, a)| *a).map(|(c, _)| c).collect();
    sort_candidates(&mut out);
    out
}

fn sort_candidates(cs: &mut [RoomCandidate]) {
    cs.sort_by(|a, b| a.min_id().cmp(&b.min_id()).then(a.sorted_ids().cmp(&b.sorted_ids())));
}

/// All valid, non-duplicate rooms not already present in `graph`.
pub fn detect_rooms(graph: &SceneGraph, config: &DetectorConfig) -> Vec<RoomCandidate> {
    let tol = config.angle_tolerance_deg;
    let of_class = |c: AxisClass| -> Vec<PlaneId> {
        graph.planes().iter().filter(|p| p.axis_class == c).map(|p| p.id).collect()
    };
    let pairs = |ids: &[PlaneId]| -> Vec<[PlaneId; 2]> {
        let mut out = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let (pa, pb) = (graph.plane(*a).expect("listed"), graph.plane(*b).expect("listed"));
                if anti_parallel(pa, pb, tol) {
                    out.push([*a, *b]);
                }
            }
        }
        out
    };
    let x_pairs = pairs(&of_class(AxisClass::X));
    let y_pairs = pairs(&of_class(AxisClass::Y));

    let mut candidates = Vec::new();
    for xp in &x_pairs {
        for yp in &y_pairs {
            let ids = [xp[0], xp[1], yp[0], yp[1]];
            if validate_candidate(&ids, graph, config, RoomProvenance::Auto).is_err() {
                continue;
            }
            let coeffs = ids.map(|p| graph.plane(p).expect("validated").coeffs());
            let Ok(center) = room_center_from_planes(&coeffs, tol) else { continue };
            if graph.duplicate_of(&center).is_some() {
                continue;
            }
            candidates.push(RoomCandidate { plane_ids: ids, center });
        }
    }
    deduplicate(candidates, config.duplicate_distance)
}

/// Remove automatic rooms that no longer pass validation after the planes
/// moved. Operator rooms are kept regardless.
pub fn refresh_auto_rooms(graph: &mut SceneGraph) -> Vec<RoomId> {
    let config = graph.config().detector.clone();
    let stale: Vec<RoomId> = graph
        .rooms()
        .filter(|r| r.provenance == RoomProvenance::Auto)
        .filter(|r| validate_candidate(&r.plane_ids, graph, &config, RoomProvenance::Auto).is_err())
        .map(|r| r.id)
        .collect();
    for id in &stale {
        graph.remove_room(*id).expect("auto room exists");
    }
    stale
}

/// Detect and insert rooms; returns the new room ids.
pub fn detect_and_add(graph: &mut SceneGraph) -> Vec<RoomId> {
    let config = graph.config().detector.clone();
    let mut added = Vec::new();
    for c in detect_rooms(graph, &config) {
        match graph.add_room(c.center, c.plane_ids, RoomProvenance::Auto) {
            Ok(id) => added.push(id),
            Err(e) => log::debug!("skipping candidate {:?}: {e}", c.plane_ids),
        }
    }
    added
}
