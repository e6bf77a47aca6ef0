use hitl_sgraph::geometry::Pose;
use hitl_sgraph::metrics::{ate, map_rmse, room_prf, RoomMatchConfig};
use hitl_sgraph::scene_graph::Rectangle;
use nalgebra::{Point2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn segment_distance(p: Point2<f64>, a: Point2<f64>, b: Point2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Distance from `p` to a filled rectangle: in-plane part from the four boundary
/// segments (zero when inside), combined with the out-of-plane part.
fn rect_distance(r: &Rectangle, p: &Vector3<f64>) -> f64 {
    let c = r.corners();
    let e1 = c[1] - c[0];
    let e2 = c[3] - c[0];
    let (u, v) = (e1.normalize(), e2.normalize());
    let normal = u.cross(&v);
    let d = p - c[0];
    let q = Point2::new(d.dot(&u), d.dot(&v));
    let (w, h) = (e1.norm(), e2.norm());
    let inside = q.x >= 0.0 && q.x <= w && q.y >= 0.0 && q.y <= h;
    let corners = [Point2::new(0.0, 0.0), Point2::new(w, 0.0), Point2::new(w, h), Point2::new(0.0, h)];
    let in_plane = if inside {
        0.0
    } else {
        (0..4).map(|i| segment_distance(q, corners[i], corners[(i + 1) % 4])).fold(f64::INFINITY, f64::min)
    };
    in_plane.hypot(d.dot(&normal))
}

/// Midpoints of a regular subdivision, built from the corners.
fn samples(r: &Rectangle, spacing: f64) -> Vec<Vector3<f64>> {
    let c = r.corners();
    let (e1, e2) = (c[1] - c[0], c[3] - c[0]);
    let nu = ((e1.norm() / spacing).round() as usize).max(1);
    let nv = ((e2.norm() / spacing).round() as usize).max(1);
    let mut out = Vec::new();
    for i in 0..nu {
        for j in 0..nv {
            out.push(c[0] + e1 * ((i as f64 + 0.5) / nu as f64) + e2 * ((j as f64 + 0.5) / nv as f64));
        }
    }
    out
}

fn random_rect(rng: &mut ChaCha8Rng) -> Rectangle {
    let axis_u = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
    let mut axis_v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    axis_v = (axis_v - axis_u * axis_u.dot(&axis_v)).normalize();
    Rectangle {
        center: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0)),
        axis_u,
        axis_v,
        half_u: rng.random_range(0.1..2.0),
        half_v: rng.random_range(0.1..1.5),
    }
}

#[test]
fn map_rmse_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let est: Vec<_> = (0..rng.random_range(1..4)).map(|_| random_rect(&mut rng)).collect();
        let gt: Vec<_> = (0..rng.random_range(1..5)).map(|_| random_rect(&mut rng)).collect();
        let spacing = rng.random_range(0.05..0.4);
        let mut sum = 0.0;
        let mut n = 0;
        for r in &est {
            for p in samples(r, spacing) {
                let d = gt.iter().map(|g| rect_distance(g, &p)).fold(f64::INFINITY, f64::min);
                sum += d * d;
                n += 1;
            }
        }
        let want = (sum / n as f64).sqrt();
        let got = map_rmse(&est, &gt, spacing).unwrap();
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn map_rmse_of_a_map_against_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rects: Vec<_> = (0..5).map(|_| random_rect(&mut rng)).collect();
    assert!(map_rmse(&rects, &rects, 0.1).unwrap() < 1e-12);
}

/// Largest matching where every assigned pair is closer than `tau`.
fn max_matching(det: &[Vector2<f64>], gt: &[Vector2<f64>], tau: f64, i: usize, used: u32) -> usize {
    if i == det.len() {
        return 0;
    }
    let mut best = max_matching(det, gt, tau, i + 1, used);
    for (j, g) in gt.iter().enumerate() {
        if used & (1 << j) == 0 && (det[i] - g).norm() < tau {
            best = best.max(1 + max_matching(det, gt, tau, i + 1, used | (1 << j)));
        }
    }
    best
}

#[test]
fn room_prf_matches_brute_force_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = RoomMatchConfig::default();
    let tau = config.max_distance;
    for _ in 0..300 {
        // ground truth on a lattice wider than 2τ
        let mut gt = Vec::new();
        for i in 0..4 {
            for j in 0..3 {
                if rng.random_bool(0.6) {
                    gt.push(Vector2::new(i as f64 * 1.2, j as f64 * 1.2));
                }
            }
        }
        let det: Vec<_> = (0..rng.random_range(0..9))
            .map(|_| Vector2::new(rng.random_range(-0.5..4.0), rng.random_range(-0.5..3.0)))
            .collect();
        let tp = max_matching(&det, &gt, tau, 0, 0);
        let prf = room_prf(&det, &gt, &config);
        assert_eq!(prf.true_positives, tp);
        let p = if det.is_empty() { 1.0 } else { tp as f64 / det.len() as f64 };
        let r = if gt.is_empty() { 1.0 } else { tp as f64 / gt.len() as f64 };
        assert!((prf.precision - p).abs() < 1e-15);
        assert!((prf.recall - r).abs() < 1e-15);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        assert!((prf.f1 - f1).abs() < 1e-12);
    }
}

fn trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, Pose)> {
    (0..n)
        .map(|i| {
            let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..2.0));
            (i as f64 * 0.5, Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, rng.random_range(-3.0..3.0)), t))
        })
        .collect()
}

fn transformed(traj: &[(f64, Pose)], g: &Pose) -> Vec<(f64, Pose)> {
    traj.iter().map(|(t, p)| (*t, g.compose(p))).collect()
}

#[test]
fn ate_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let gt = trajectory(&mut rng, 30);
        let noisy: Vec<_> = gt
            .iter()
            .map(|(t, p)| {
                let mut q = *p;
                q.translation += Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
                (*t, q)
            })
            .collect();
        let base = ate(&noisy, &gt, true).unwrap();
        let g = Pose::new(
            UnitQuaternion::from_euler_angles(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)),
            Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)),
        );
        // a rigid motion of the estimate is absorbed by the alignment
        assert!((ate(&transformed(&noisy, &g), &gt, true).unwrap() - base).abs() < 1e-9);
        assert!(ate(&transformed(&gt, &g), &gt, true).unwrap() < 1e-9);
        // alignment never hurts
        assert!(base <= ate(&noisy, &gt, false).unwrap() + 1e-12);
        // a constant offset is the unaligned error exactly
        let c = Vector3::new(0.3, -0.4, 0.0);
        let shifted: Vec<_> = gt.iter().map(|(t, p)| (*t, Pose::new(p.rotation, p.translation + c))).collect();
        assert!((ate(&shifted, &gt, false).unwrap() - 0.5).abs() < 1e-12);
        // order of poses in the estimate does not matter
        let mut reversed = noisy.clone();
        reversed.reverse();
        assert!((ate(&reversed, &gt, true).unwrap() - base).abs() < 1e-12);
    }
}

#[test]
fn aligned_ate_is_a_local_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let gt = trajectory(&mut rng, 20);
    let est: Vec<_> = gt
        .iter()
        .map(|(t, p)| (*t, Pose::new(p.rotation, p.translation * 1.02 + Vector3::new(0.1, 0.0, 0.05))))
        .collect();
    let best = ate(&est, &gt, true).unwrap();
    for _ in 0..500 {
        let w = 0.02;
        let g = Pose::new(
            UnitQuaternion::from_euler_angles(rng.random_range(-w..w), rng.random_range(-w..w), rng.random_range(-w..w)),
            Vector3::new(rng.random_range(-w..w), rng.random_range(-w..w), rng.random_range(-w..w)),
        );
        let perturbed = transformed(&est, &g);
        assert!(ate(&perturbed, &gt, false).unwrap() + 1e-12 >= best);
    }
}

#[test]
fn ate_requires_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = trajectory(&mut rng, 5);
    let late: Vec<_> = gt.iter().map(|(t, p)| (t + 100.0, *p)).collect();
    assert!(ate(&late, &gt, true).is_err());
}

#[test]
fn map_rmse_scales_with_a_normal_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let gt: Vec<_> = (0..3)
        .map(|i| {
            let mut r = random_rect(&mut rng);
            r.center.x += i as f64 * 20.0;
            r
        })
        .collect();
    for delta in [0.01, 0.05, 0.2] {
        let shifted: Vec<_> = gt
            .iter()
            .map(|r| Rectangle { center: r.center + r.axis_u.cross(&r.axis_v) * delta, ..*r })
            .collect();
        let got = map_rmse(&shifted, &gt, 0.1).unwrap();
        assert!((got - delta).abs() < 1e-12, "{got} vs {delta}");
    }
}

#[test]
fn room_prf_monotonicity() {
    let config = RoomMatchConfig::default();
    let gt = vec![Vector2::new(0.0, 0.0), Vector2::new(3.0, 0.0), Vector2::new(0.0, 3.0)];
    let mut det = vec![Vector2::new(0.1, 0.0)];
    let mut last = room_prf(&det, &gt, &config);
    for g in &gt[1..] {
        det.push(g + Vector2::new(0.0, 0.2));
        let next = room_prf(&det, &gt, &config);
        assert!(next.recall >= last.recall);
        last = next;
    }
    det.push(Vector2::new(50.0, 50.0));
    let far = room_prf(&det, &gt, &config);
    assert!(far.precision < last.precision);
    assert_eq!(far.recall, last.recall);
}
