//! Rigid-body poses and the small amount of Lie-group machinery the
//! optimizer needs.
//!
//! Tangent vectors of a [`Pose`] are ordered `[ω; v]` (rotation first,
//! translation second). The exponential map is the decoupled one on
//! SO(3) × ℝ³, applied on the right:
//!
//! ```text
//! pose ⊕ [ω; v] = pose ∘ (Exp(ω), v)   ⇒   R' = R·Exp(ω),  t' = t + R·v
//! ```

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

const SMALL_ANGLE: f64 = 1e-10;

/// Rigid-body transform. For keyframes this is world-from-body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    /// `[w, x, y, z]`
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, x, y, z] = r.rotation;
        let q = Quaternion::new(w, x, y, z);
        // keep already-unit input bit-exact so serialization round-trips
        let rotation = if (q.norm_squared() - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Pose {
            rotation,
            translation: Vector3::from(r.translation),
        }
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr {
            rotation: [q.w, q.i, q.j, q.k],
            translation: p.translation.into(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(UnitQuaternion::identity(), t)
    }

    /// Planar pose: position `(x, y, z)` with heading `yaw` about +z.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// `self⁻¹ ∘ other`
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn exp(tangent: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(tangent[0], tangent[1], tangent[2]);
        let v = Vector3::new(tangent[3], tangent[4], tangent[5]);
        Pose::new(so3_exp(&omega), v)
    }

    pub fn log(&self) -> Vector6<f64> {
        let w = so3_log(&self.rotation);
        Vector6::new(
            w.x,
            w.y,
            w.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        )
    }

    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let mut out = self.compose(&Pose::exp(delta));
        out.rotation.renormalize();
        out
    }

    pub fn yaw(&self) -> f64 {
        self.rotation.euler_angles().2
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    if theta < SMALL_ANGLE {
        // second-order expansion keeps the map smooth through zero
        let q = Quaternion::new(1.0 - theta * theta / 8.0, omega.x / 2.0, omega.y / 2.0, omega.z / 2.0);
        return UnitQuaternion::new_normalize(q);
    }
    UnitQuaternion::from_axis_angle(&Unit::new_unchecked(omega / theta), theta)
}

/// Rotation vector with angle in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut q = *q.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    let vec = q.imag();
    let s = vec.norm();
    if s < SMALL_ANGLE {
        return vec * 2.0;
    }
    let theta = 2.0 * s.atan2(q.w);
    vec * (theta / s)
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coef * k * k
}

/// Two orthonormal vectors spanning the tangent plane of the unit sphere
/// at `n`. Deterministic in `n`.
pub fn sphere_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = n.cross(&seed).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// Exponential map on the unit sphere: move `n` along the tangent
/// direction `b1·a + b2·b`.
pub fn sphere_retract(n: &Vector3<f64>, a: f64, b: f64) -> Vector3<f64> {
    let (b1, b2) = sphere_basis(n);
    let tangent = b1 * a + b2 * b;
    let theta = tangent.norm();
    if theta < SMALL_ANGLE {
        return (n + tangent).normalize();
    }
    (n * theta.cos() + tangent * (theta.sin() / theta)).normalize()
}

pub fn rotation_about_z(yaw: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
}
