#![allow(dead_code)]

use hitl_sgraph::factors::PlaneCoeffs;
use hitl_sgraph::scene_graph::{PlaneId, PlaneProvenance, Rectangle, SceneGraph};
use nalgebra::Vector3;

/// Vertical wall segment: `axis` 'x' puts it at x = pos spanning y ∈ [lo, hi].
pub fn wall(axis: char, pos: f64, inward: f64, lo: f64, hi: f64) -> (PlaneCoeffs, Rectangle) {
    let (normal, center, u) = match axis {
        'x' => (Vector3::new(inward, 0.0, 0.0), Vector3::new(pos, (lo + hi) / 2.0, 1.25), Vector3::y()),
        _ => (Vector3::new(0.0, inward, 0.0), Vector3::new((lo + hi) / 2.0, pos, 1.25), Vector3::x()),
    };
    let rect = Rectangle { center, axis_u: u, axis_v: Vector3::z(), half_u: (hi - lo) / 2.0, half_v: 1.25 };
    (PlaneCoeffs::through(normal, &center), rect)
}

pub fn add_wall(g: &mut SceneGraph, axis: char, pos: f64, inward: f64, lo: f64, hi: f64) -> PlaneId {
    let (c, r) = wall(axis, pos, inward, lo, hi);
    g.add_plane(c, &r, PlaneProvenance::GroundTruth)
}

pub fn add_rect(g: &mut SceneGraph, x0: f64, x1: f64, y0: f64, y1: f64) -> [PlaneId; 4] {
    [
        add_wall(g, 'x', x0, 1.0, y0, y1),
        add_wall(g, 'x', x1, -1.0, y0, y1),
        add_wall(g, 'y', y0, 1.0, x0, x1),
        add_wall(g, 'y', y1, -1.0, x0, x1),
    ]
}
