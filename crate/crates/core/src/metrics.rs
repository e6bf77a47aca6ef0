//! Trajectory, map and room-detection metrics against ground truth.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::scene_graph::Rectangle;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("only {0} timestamps could be associated; at least 2 are needed")]
    NoTimestampOverlap(usize),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("sample spacing must be positive")]
    BadSpacing,
}

/// Maximum timestamp difference for associating two poses.
pub const STAMP_TOLERANCE: f64 = 0.01;

/// Pairs `(estimate, ground truth)` by nearest ground-truth stamp.
pub fn associate(estimate: &[(f64, Pose)], ground_truth: &[(f64, Pose)]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut gt: Vec<&(f64, Pose)> = ground_truth.iter().collect();
    gt.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    for (t, pose) in estimate {
        let i = gt.partition_point(|g| g.0 < *t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| gt.get(j))
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
        if let Some(g) = best {
            if (g.0 - t).abs() <= STAMP_TOLERANCE {
                out.push((pose.translation, g.1.translation));
            }
        }
    }
    out
}

/// Rotation and translation minimising `Σ ‖g − (R·e + t)‖²`.
pub fn rigid_alignment(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = pairs.len() as f64;
    let ce = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let cg = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, g) in pairs {
        cov += (g - cg) * (e - ce).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // singular values come sorted, so the last one is the smallest
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    (r, cg - r * ce)
}

/// RMSE of translational differences, optionally after rigid alignment.
pub fn ate(estimate: &[(f64, Pose)], ground_truth: &[(f64, Pose)], align: bool) -> Result<f64, MetricsError> {
    let pairs = associate(estimate, ground_truth);
    if pairs.len() < 2 {
        return Err(MetricsError::NoTimestampOverlap(pairs.len()));
    }
    let (r, t) = if align { rigid_alignment(&pairs) } else { (Matrix3::identity(), Vector3::zeros()) };
    let sum: f64 = pairs.iter().map(|(e, g)| (g - (r * e + t)).norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// RMSE of distances from points sampled on `estimated` to the nearest
/// rectangle of `ground_truth`.
pub fn map_rmse(estimated: &[Rectangle], ground_truth: &[Rectangle], spacing: f64) -> Result<f64, MetricsError> {
    if estimated.is_empty() {
        return Err(MetricsError::Empty("estimated plane"));
    }
    if ground_truth.is_empty() {
        return Err(MetricsError::Empty("ground-truth plane"));
    }
    if !(spacing > 0.0) {
        return Err(MetricsError::BadSpacing);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for rect in estimated {
        for p in rect.sample(spacing) {
            let d = ground_truth.iter().map(|g| g.distance_to(&p)).fold(f64::INFINITY, f64::min);
            sum += d * d;
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

pub const MAP_SAMPLE_SPACING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomMatchConfig {
    pub max_distance: f64,
}

impl Default for RoomMatchConfig {
    fn default() -> Self {
        RoomMatchConfig { max_distance: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
}

/// Greedy one-to-one matching by ascending centre distance.
pub fn match_rooms(detected: &[Vector2<f64>], ground_truth: &[Vector2<f64>], config: &RoomMatchConfig) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, g) in ground_truth.iter().enumerate() {
            let dist = (d - g).norm();
            if dist < config.max_distance {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used_d = vec![false; detected.len()];
    let mut used_g = vec![false; ground_truth.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_d[i] && !used_g[j] {
            used_d[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn room_prf(detected: &[Vector2<f64>], ground_truth: &[Vector2<f64>], config: &RoomMatchConfig) -> Prf {
    let tp = match_rooms(detected, ground_truth, config).len();
    let precision = if detected.is_empty() { 1.0 } else { tp as f64 / detected.len() as f64 };
    let recall = if ground_truth.is_empty() { 1.0 } else { tp as f64 / ground_truth.len() as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Prf { precision, recall, f1, true_positives: tp }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub seed: u64,
    pub method: String,
    pub ate_m: f64,
    pub map_rmse_m: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub const CSV_HEADER: &str = "scenario,seed,method,ate_m,map_rmse_m,precision,recall,f1";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9},{:.6},{:.6},{:.6}",
            self.scenario, self.seed, self.method, self.ate_m, self.map_rmse_m, self.precision, self.recall, self.f1
        )
    }
}
