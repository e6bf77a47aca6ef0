mod common;

use common::{add_rect, wall};
use hitl_sgraph::geometry::Pose;
use hitl_sgraph::room_detect::{detect_and_add, refresh_auto_rooms};
use hitl_sgraph::scene_graph::{
    EstimateUpdate, GraphConfig, GraphError, GraphSnapshot, KeyframeId, PlaneId, PlaneObservation, PlaneProvenance,
    RoomId, RoomProvenance, SceneGraph,
};
use nalgebra::Vector2;
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Keyframe { x: f64, y: f64, yaw: f64, walls: Vec<(bool, u8, bool)> },
    Plane { vertical: bool, slot: u8, inward: bool },
    Rect { x0: u8, w: u8, y0: u8, h: u8 },
    Room { picks: [u8; 4], human: bool },
    Remove(u8),
    Nudge { which: u8, dx: f64 },
    Detect,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0.0..12.0, 0.0..12.0, -3.1..3.1, prop::collection::vec((any::<bool>(), 0u8..7, any::<bool>()), 0..4))
            .prop_map(|(x, y, yaw, walls)| Op::Keyframe { x, y, yaw, walls }),
        2 => (any::<bool>(), 0u8..7, any::<bool>()).prop_map(|(vertical, slot, inward)| Op::Plane { vertical, slot, inward }),
        1 => (0u8..5, 1u8..4, 0u8..5, 1u8..4).prop_map(|(x0, w, y0, h)| Op::Rect { x0, w, y0, h }),
        2 => (any::<[u8; 4]>(), any::<bool>()).prop_map(|(picks, human)| Op::Room { picks, human }),
        1 => any::<u8>().prop_map(Op::Remove),
        1 => (any::<u8>(), -0.2..0.2).prop_map(|(which, dx)| Op::Nudge { which, dx }),
        1 => Just(Op::Detect),
    ]
}

fn observation(pose: &Pose, vertical: bool, slot: u8, inward: bool) -> PlaneObservation {
    let (coeffs, rect) = wall(if vertical { 'x' } else { 'y' }, slot as f64 * 2.0, if inward { 1.0 } else { -1.0 }, 0.0, 4.0);
    let inv = pose.inverse();
    PlaneObservation { plane: coeffs.to_world(&inv), extent: rect.transformed(&inv) }
}

/// Keeps exhaustive detection cheap.
const MAX_PLANES: usize = 24;

struct Harness {
    graph: SceneGraph,
    stamp: f64,
    human: Vec<RoomId>,
}

impl Harness {
    fn apply(&mut self, op: &Op) {
        let g = &mut self.graph;
        match op {
            Op::Keyframe { x, y, yaw, walls } => {
                let pose = Pose::planar(*x, *y, 1.0, *yaw);
                let obs: Vec<_> = walls.iter().map(|(v, s, i)| observation(&pose, *v, *s, *i)).collect();
                self.stamp += 0.5;
                let added = g.add_keyframe(pose, self.stamp, &obs).unwrap();
                if added.id.0 > 0 {
                    let prev = g.keyframe(KeyframeId(added.id.0 - 1)).unwrap().pose;
                    g.add_odometry(KeyframeId(added.id.0 - 1), added.id, prev.between(&pose)).unwrap();
                }
            }
            Op::Plane { .. } | Op::Rect { .. } if g.planes().len() >= MAX_PLANES => {}
            Op::Plane { vertical, slot, inward } => {
                let (c, r) = wall(if *vertical { 'x' } else { 'y' }, *slot as f64 * 2.0, if *inward { 1.0 } else { -1.0 }, 0.0, 12.0);
                g.add_plane(c, &r, PlaneProvenance::GroundTruth);
            }
            Op::Rect { x0, w, y0, h } => {
                let (x0, y0) = (*x0 as f64 * 2.0, *y0 as f64 * 2.0);
                add_rect(g, x0, x0 + *w as f64 * 2.0, y0, y0 + *h as f64 * 2.0);
            }
            Op::Room { picks, human } => {
                let n = g.planes().len();
                if n == 0 {
                    return;
                }
                let ids = picks.map(|p| PlaneId((p as usize % n) as u64));
                let prov = if *human { RoomProvenance::Human } else { RoomProvenance::Auto };
                let before = g.revision();
                match g.add_room_from_planes(ids, prov) {
                    Ok(id) if *human => self.human.push(id),
                    Ok(_) => {}
                    Err(_) => assert_eq!(g.revision(), before, "rejected room must not commit"),
                }
            }
            Op::Remove(k) => {
                let ids: Vec<RoomId> = g.rooms().map(|r| r.id).collect();
                if ids.is_empty() {
                    return;
                }
                let id = ids[*k as usize % ids.len()];
                let human = g.room(id).unwrap().provenance == RoomProvenance::Human;
                match g.remove_room(id) {
                    Ok(()) => assert!(!human),
                    Err(e) => assert!(human && matches!(e, GraphError::HumanRoomProtected(_))),
                }
            }
            Op::Nudge { which, dx } => {
                let mut update = EstimateUpdate::default();
                if let Some(kf) = g.keyframes().get(*which as usize % g.keyframes().len().max(1)) {
                    let mut pose = kf.pose;
                    pose.translation.x += dx;
                    update.poses.push((kf.id, pose));
                }
                if let Some(room) = g.rooms().next() {
                    update.rooms.push((room.id, room.center + Vector2::new(*dx, 0.0)));
                }
                g.apply_estimate(&update).unwrap();
            }
            Op::Detect => {
                refresh_auto_rooms(g);
                detect_and_add(g);
            }
        }
    }
}

fn check_replay(graph: &SceneGraph, mirror: &mut GraphSnapshot) {
    for delta in graph.deltas_since(mirror.revision).unwrap() {
        mirror.apply(&delta).unwrap();
    }
    assert_eq!(*mirror, graph.snapshot());
}

fn run(ops: &[Op], capacity: usize) {
    let config = GraphConfig { delta_capacity: capacity, ..GraphConfig::default() };
    let mut h = Harness { graph: SceneGraph::new(config), stamp: 0.0, human: Vec::new() };
    let mut incremental = GraphSnapshot::default();
    for (i, op) in ops.iter().enumerate() {
        let before = h.graph.revision();
        h.apply(op);
        let after = h.graph.revision();
        assert!(after >= before);
        h.graph.check_integrity().unwrap_or_else(|e| panic!("after op {i} {op:?}: {e}"));
        for id in &h.human {
            assert!(h.graph.room(*id).is_some(), "human room {id} vanished after {op:?}");
        }
        check_replay(&h.graph, &mut incremental);
        if h.graph.revision() <= capacity as u64 {
            let mut full = GraphSnapshot::default();
            check_replay(&h.graph, &mut full);
        }
    }
    assert_eq!(h.graph.deltas_since(h.graph.revision()).unwrap(), Vec::new());
    assert!(h.graph.deltas_since(h.graph.revision() + 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn replay_reconstructs_graph_after_every_mutation(ops in prop::collection::vec(op(), 100..140)) {
        run(&ops, 4096);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn long_sequences_with_small_buffer(ops in prop::collection::vec(op(), 500..520)) {
        run(&ops, 64);
    }
}

#[test]
fn evicted_revision_is_reported() {
    let config = GraphConfig { delta_capacity: 4, ..GraphConfig::default() };
    let mut g = SceneGraph::new(config);
    for i in 0..10 {
        let (c, r) = wall('x', i as f64, 1.0, 0.0, 1.0);
        g.add_plane(c, &r, PlaneProvenance::GroundTruth);
    }
    assert_eq!(g.revision(), 10);
    assert!(matches!(g.deltas_since(2), Err(GraphError::Evicted { .. })));
    assert_eq!(g.deltas_since(6).unwrap().len(), 4);
}
