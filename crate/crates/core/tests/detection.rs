mod common;

use common::{add_rect, add_wall};
use hitl_sgraph::factors::room_center_from_planes;
use hitl_sgraph::room_detect::{detect_and_add, detect_rooms, refresh_auto_rooms, validate_candidate, DetectorConfig};
use hitl_sgraph::scene_graph::{PlaneId, RoomProvenance, SceneGraph};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All 4-subsets, each tried under every X/Y split, validated, suppressed
/// near existing rooms, then de-duplicated pairwise by distance.
fn brute_force(g: &SceneGraph, cfg: &DetectorConfig) -> Vec<(Vec<PlaneId>, Vector2<f64>)> {
    let ids: Vec<PlaneId> = g.planes().iter().map(|p| p.id).collect();
    let n = ids.len();
    let mut found = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    let set = [ids[a], ids[b], ids[c], ids[d]];
                    if validate_candidate(&set, g, cfg, RoomProvenance::Auto).is_err() {
                        continue;
                    }
                    let coeffs = set.map(|p| g.plane(p).unwrap().coeffs());
                    let center = room_center_from_planes(&coeffs, cfg.angle_tolerance_deg).unwrap();
                    if g.rooms().any(|r| (r.center - center).norm() < cfg.duplicate_distance) {
                        continue;
                    }
                    found.push((set.to_vec(), center));
                }
            }
        }
    }
    let mut conflicts = Vec::new();
    for i in 0..found.len() {
        for j in i + 1..found.len() {
            let dist = (found[i].1 - found[j].1).norm();
            if dist < cfg.duplicate_distance {
                conflicts.push((dist, found[i].0[0].min(found[j].0[0]), i, j));
            }
        }
    }
    conflicts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut dead = vec![false; found.len()];
    for (_, _, i, j) in conflicts {
        if !dead[i] && !dead[j] {
            let loser = if found[i].0 > found[j].0 { i } else { j };
            dead[loser] = true;
        }
    }
    let mut out: Vec<_> = found.into_iter().zip(dead).filter(|(_, d)| !d).map(|(f, _)| f).collect();
    out.sort_by(|x, y| x.0.cmp(&y.0));
    out
}

fn random_graph(rng: &mut ChaCha8Rng) -> SceneGraph {
    let mut g = SceneGraph::default();
    let count = rng.random_range(4..=20);
    for _ in 0..count {
        let axis = if rng.random_bool(0.5) { 'x' } else { 'y' };
        let pos = rng.random_range(0..6) as f64 * 2.0 + rng.random_range(-0.05..0.05);
        let inward = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lo = rng.random_range(-1.0..6.0);
        let hi = lo + rng.random_range(1.0..12.0);
        add_wall(&mut g, axis, pos, inward, lo, hi);
    }
    g
}

#[test]
fn detection_equals_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DetectorConfig::default();
    let mut nonempty = 0;
    for _ in 0..200 {
        let g = random_graph(&mut rng);
        let got: Vec<_> = detect_rooms(&g, &cfg)
            .into_iter()
            .map(|c| {
                let mut ids = c.plane_ids.to_vec();
                ids.sort();
                (ids, c.center)
            })
            .collect();
        let want = brute_force(&g, &cfg);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).norm() < 1e-12);
        }
        nonempty += usize::from(!got.is_empty());
    }
    assert!(nonempty > 20, "too few graphs exercised detection: {nonempty}");
}

#[test]
fn detection_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_graph(&mut rng);
    let cfg = DetectorConfig::default();
    assert_eq!(detect_rooms(&g, &cfg), detect_rooms(&g, &cfg));
}

#[test]
fn human_rooms_survive_detection_passes() {
    let mut g = SceneGraph::default();
    let ids = add_rect(&mut g, 0.0, 4.0, 0.0, 6.0);
    let short = add_wall(&mut g, 'x', 10.0, -1.0, 0.0, 0.5);
    let human = g.add_room_from_planes([ids[0], short, ids[2], ids[3]], RoomProvenance::Human).unwrap();
    for _ in 0..5 {
        refresh_auto_rooms(&mut g);
        detect_and_add(&mut g);
    }
    assert!(g.room(human).is_some());
    // the fully observed [0,4] room is far enough from the human one to be added once
    assert_eq!(g.rooms().filter(|r| r.provenance == RoomProvenance::Auto).count(), 1);
    assert_eq!(g.room_count(), 2);
    g.check_integrity().unwrap();
}

#[test]
fn spanning_candidate_across_a_dividing_wall_is_rejected() {
    let mut g = SceneGraph::default();
    add_wall(&mut g, 'x', 0.0, 1.0, 0.0, 5.0);
    add_wall(&mut g, 'x', 4.0, -1.0, 0.0, 5.0);
    add_wall(&mut g, 'x', 4.0, 1.0, 0.0, 5.0);
    add_wall(&mut g, 'x', 8.0, -1.0, 0.0, 5.0);
    add_wall(&mut g, 'y', 0.0, 1.0, 0.0, 8.0);
    add_wall(&mut g, 'y', 5.0, -1.0, 0.0, 8.0);
    let spanning = [PlaneId(0), PlaneId(3), PlaneId(4), PlaneId(5)];
    let err = validate_candidate(&spanning, &g, &DetectorConfig::default(), RoomProvenance::Auto).unwrap_err();
    assert_eq!(err.name(), "interior-plane");
    assert_eq!(detect_rooms(&g, &DetectorConfig::default()).len(), 2);
}
