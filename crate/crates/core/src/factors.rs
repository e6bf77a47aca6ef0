//! Residuals and information matrices for the three constraint kinds.
//!
//! Every residual is defined at the current variable values; Jacobians are
//! taken with respect to the retraction perturbations used by the
//! optimizer (see [`crate::optimizer::retract`]):
//!
//! * pose `[ω; v]`: `R·Exp(ω)`, `t + R·v`
//! * plane `[α; β; δd]`: unit normal moved along its tangent basis, offset `d + δd`
//! * room `[δx; δy]`: plain addition
//!
//! # Room centre
//!
//! For an axis `u` (world x or y) the signed position of a wall plane
//! `n·p + d = 0` along `u` is `s = −d·(n·u)`. This is unchanged by the
//! flip `(n, d) → (−n, −d)`, so the midpoint `((s_a + s_b)/2)·u` of two
//! opposing walls does not depend on which way their normals point. The
//! room residual is
//!
//! ```text
//! e = p_room − (v_x + v_y)
//! ```
//!
//! with `v_x`, `v_y` the midpoints of the X and Y wall pairs.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, so3_right_jacobian_inv, sphere_basis, Pose};
use crate::scene_graph::{AxisClass, KeyframeId, PlaneId, RoomId, RoomProvenance};

/// Hessian-form plane coefficients. World or body frame depending on use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneCoeffs {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl PlaneCoeffs {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        PlaneCoeffs { normal, offset }
    }

    /// Plane through `point` with unit `normal`.
    pub fn through(normal: Vector3<f64>, point: &Vector3<f64>) -> Self {
        PlaneCoeffs { normal, offset: -normal.dot(point) }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn flipped(&self) -> Self {
        PlaneCoeffs { normal: -self.normal, offset: -self.offset }
    }

    /// Body-frame plane mapped into the world by world-from-body `pose`.
    pub fn to_world(&self, pose: &Pose) -> PlaneCoeffs {
        let n = pose.rotation * self.normal;
        PlaneCoeffs { normal: n, offset: self.offset - n.dot(&pose.translation) }
    }
}

/// `n_b = Rᵀ n_w`, `d_b = d_w + n_w·t` for world-from-body `pose`.
pub fn plane_to_body(plane_world: &PlaneCoeffs, pose: &Pose) -> PlaneCoeffs {
    PlaneCoeffs {
        normal: pose.rotation.inverse() * plane_world.normal,
        offset: plane_world.offset + plane_world.normal.dot(&pose.translation),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RoomMathError {
    #[error("planes are not anti-parallel")]
    NotAntiParallel,
    #[error("plane axis does not match the pair axis")]
    AxisMismatch,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("human weighting requires kappa > 1, got {0}")]
    KappaTooSmall(f64),
    #[error("human weighting applies only to operator-created room factors")]
    NotHumanRoom,
    #[error("factor expects {expected} variables, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("variable {index} has the wrong kind for this factor")]
    VariableKind { index: usize },
}

/// Default information matrices and the operator confidence scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub odometry_rotation: f64,
    pub odometry_translation: f64,
    pub plane_normal: f64,
    pub plane_offset: f64,
    pub room: f64,
    pub human_kappa: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            odometry_rotation: 100.0,
            odometry_translation: 400.0,
            plane_normal: 50.0,
            plane_offset: 100.0,
            room: 1.0,
            human_kappa: 10.0,
        }
    }
}

impl NoiseConfig {
    pub fn odometry_information(&self) -> DMatrix<f64> {
        let r = self.odometry_rotation;
        let t = self.odometry_translation;
        DMatrix::from_diagonal(&DVector::from_vec(vec![r, r, r, t, t, t]))
    }

    pub fn plane_information(&self) -> DMatrix<f64> {
        let n = self.plane_normal;
        DMatrix::from_diagonal(&DVector::from_vec(vec![n, n, n, self.plane_offset]))
    }

    pub fn room_information(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.room
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorNoise {
    pub information: DMatrix<f64>,
    /// Scale already folded into `information`; 1 unless operator-weighted.
    pub human_scale: f64,
}

impl FactorNoise {
    pub fn new(information: DMatrix<f64>) -> Self {
        FactorNoise { information, human_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    Odometry { from: KeyframeId, to: KeyframeId, measured: Pose },
    PlaneObs { keyframe: KeyframeId, plane: PlaneId, observed: PlaneCoeffs },
    /// `planes` holds the X pair followed by the Y pair.
    Room { room: RoomId, planes: [PlaneId; 4], provenance: RoomProvenance },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    Keyframe(KeyframeId),
    Plane(PlaneId),
    Room(RoomId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variable {
    Pose(Pose),
    Plane(PlaneCoeffs),
    Room(Vector2<f64>),
}

impl Variable {
    pub fn dim(&self) -> usize {
        match self {
            Variable::Pose(_) => 6,
            Variable::Plane(_) => 3,
            Variable::Room(_) => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorType {
    Odometry,
    PlaneObs,
    Room,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub noise: FactorNoise,
}

fn pose_at(vars: &[&Variable], i: usize) -> Result<Pose, FactorError> {
    match vars[i] {
        Variable::Pose(p) => Ok(*p),
        _ => Err(FactorError::VariableKind { index: i }),
    }
}

fn plane_at(vars: &[&Variable], i: usize) -> Result<PlaneCoeffs, FactorError> {
    match vars[i] {
        Variable::Plane(p) => Ok(*p),
        _ => Err(FactorError::VariableKind { index: i }),
    }
}

fn room_at(vars: &[&Variable], i: usize) -> Result<Vector2<f64>, FactorError> {
    match vars[i] {
        Variable::Room(p) => Ok(*p),
        _ => Err(FactorError::VariableKind { index: i }),
    }
}

impl Factor {
    pub fn factor_type(&self) -> FactorType {
        match self.kind {
            FactorKind::Odometry { .. } => FactorType::Odometry,
            FactorKind::PlaneObs { .. } => FactorType::PlaneObs,
            FactorKind::Room { .. } => FactorType::Room,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            FactorKind::Odometry { .. } => 6,
            FactorKind::PlaneObs { .. } => 4,
            FactorKind::Room { .. } => 2,
        }
    }

    /// Variables this factor connects, in the order `residual` expects.
    pub fn keys(&self) -> Vec<VarKey> {
        match &self.kind {
            FactorKind::Odometry { from, to, .. } => vec![VarKey::Keyframe(*from), VarKey::Keyframe(*to)],
            FactorKind::PlaneObs { keyframe, plane, .. } => {
                vec![VarKey::Keyframe(*keyframe), VarKey::Plane(*plane)]
            }
            FactorKind::Room { room, planes, .. } => {
                let mut k = vec![VarKey::Room(*room)];
                k.extend(planes.iter().map(|p| VarKey::Plane(*p)));
                k
            }
        }
    }

    fn check_arity(&self, vars: &[&Variable]) -> Result<(), FactorError> {
        let expected = self.keys().len();
        if vars.len() != expected {
            return Err(FactorError::Arity { expected, got: vars.len() });
        }
        Ok(())
    }

    pub fn residual(&self, vars: &[&Variable]) -> Result<DVector<f64>, FactorError> {
        self.check_arity(vars)?;
        Ok(match &self.kind {
            FactorKind::Odometry { measured, .. } => {
                let r = odometry_residual(&pose_at(vars, 0)?, &pose_at(vars, 1)?, measured);
                DVector::from_column_slice(r.as_slice())
            }
            FactorKind::PlaneObs { observed, .. } => {
                let r = plane_obs_residual(&pose_at(vars, 0)?, &plane_at(vars, 1)?, observed);
                DVector::from_column_slice(r.as_slice())
            }
            FactorKind::Room { .. } => {
                let p = room_at(vars, 0)?;
                let planes = [plane_at(vars, 1)?, plane_at(vars, 2)?, plane_at(vars, 3)?, plane_at(vars, 4)?];
                let e = room_residual_paired(&p, &planes);
                DVector::from_column_slice(e.as_slice())
            }
        })
    }

    /// `eᵀ Ω e`
    pub fn cost(&self, vars: &[&Variable]) -> Result<f64, FactorError> {
        let e = self.residual(vars)?;
        Ok((e.transpose() * &self.noise.information * &e)[(0, 0)])
    }

    /// Closed-form Jacobians, one block per connected variable.
    pub fn analytic_jacobians(&self, vars: &[&Variable]) -> Result<Vec<DMatrix<f64>>, FactorError> {
        self.check_arity(vars)?;
        Ok(match &self.kind {
            FactorKind::Odometry { measured, .. } => {
                odometry_jacobians(&pose_at(vars, 0)?, &pose_at(vars, 1)?, measured).to_vec()
            }
            FactorKind::PlaneObs { .. } => plane_obs_jacobians(&pose_at(vars, 0)?, &plane_at(vars, 1)?).to_vec(),
            FactorKind::Room { .. } => {
                let planes = [plane_at(vars, 1)?, plane_at(vars, 2)?, plane_at(vars, 3)?, plane_at(vars, 4)?];
                room_jacobians(&planes).to_vec()
            }
        })
    }
}

/// `Log(measured⁻¹ ∘ pose_i⁻¹ ∘ pose_j)` as `[ω; t]`.
pub fn odometry_residual(pose_i: &Pose, pose_j: &Pose, measured: &Pose) -> nalgebra::Vector6<f64> {
    measured.inverse().compose(&pose_i.between(pose_j)).log()
}

fn odometry_jacobians(pose_i: &Pose, pose_j: &Pose, measured: &Pose) -> [DMatrix<f64>; 2] {
    let err = measured.inverse().compose(&pose_i.between(pose_j));
    let r = err.log();
    let phi = Vector3::new(r[0], r[1], r[2]);
    let jr_inv = so3_right_jacobian_inv(&phi);
    let d_rot = err.rotation_matrix();
    let rm_t = measured.rotation_matrix().transpose();
    let p = pose_i.rotation.inverse() * (pose_j.translation - pose_i.translation);

    let mut ji = DMatrix::zeros(6, 6);
    let rot_i = -jr_inv * d_rot.transpose() * rm_t;
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_i);
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rm_t * skew(&p)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rm_t));

    let mut jj = DMatrix::zeros(6, 6);
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&d_rot);
    [ji, jj]
}

/// `(n_pred − n_obs, d_pred − d_obs)` with the prediction from [`plane_to_body`].
pub fn plane_obs_residual(pose: &Pose, plane_world: &PlaneCoeffs, observed: &PlaneCoeffs) -> nalgebra::Vector4<f64> {
    let pred = plane_to_body(plane_world, pose);
    let dn = pred.normal - observed.normal;
    nalgebra::Vector4::new(dn.x, dn.y, dn.z, pred.offset - observed.offset)
}

fn plane_obs_jacobians(pose: &Pose, plane_world: &PlaneCoeffs) -> [DMatrix<f64>; 2] {
    let pred = plane_to_body(plane_world, pose);
    let rt: Matrix3<f64> = pose.rotation_matrix().transpose();
    let (b1, b2) = sphere_basis(&plane_world.normal);

    let mut jp = DMatrix::zeros(4, 6);
    jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&pred.normal));
    for c in 0..3 {
        jp[(3, 3 + c)] = pred.normal[c];
    }

    let mut jl = DMatrix::zeros(4, 3);
    let n1 = rt * b1;
    let n2 = rt * b2;
    for r in 0..3 {
        jl[(r, 0)] = n1[r];
        jl[(r, 1)] = n2[r];
    }
    jl[(3, 0)] = b1.dot(&pose.translation);
    jl[(3, 1)] = b2.dot(&pose.translation);
    jl[(3, 2)] = 1.0;
    [jp, jl]
}

fn axis3(u: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(u.x, u.y, 0.0)
}

/// Signed position of a plane along horizontal axis `u`.
pub fn position_along(plane: &PlaneCoeffs, u: &Vector2<f64>) -> f64 {
    -plane.offset * plane.normal.dot(&axis3(u))
}

fn pair_midpoint(a: &PlaneCoeffs, b: &PlaneCoeffs, u: &Vector2<f64>) -> Vector2<f64> {
    u * ((position_along(a, u) + position_along(b, u)) / 2.0)
}

/// Midpoint displacement (`v_x` or `v_y`) of two opposing walls along `u`.
pub fn room_center_from_pair(
    plane_a: &PlaneCoeffs,
    plane_b: &PlaneCoeffs,
    u: &Vector2<f64>,
    tolerance_deg: f64,
) -> Result<Vector2<f64>, RoomMathError> {
    let cos_tol = tolerance_deg.to_radians().cos();
    let u3 = axis3(u);
    if plane_a.normal.dot(&u3).abs() < cos_tol || plane_b.normal.dot(&u3).abs() < cos_tol {
        return Err(RoomMathError::AxisMismatch);
    }
    if plane_a.normal.dot(&-plane_b.normal) < cos_tol {
        return Err(RoomMathError::NotAntiParallel);
    }
    Ok(pair_midpoint(plane_a, plane_b, u))
}

/// Split four planes into `[X, X, Y, Y]` order by axis class.
pub fn pair_planes<T: Copy>(
    items: &[T; 4],
    normal: impl Fn(&T) -> Vector3<f64>,
    tolerance_deg: f64,
) -> Result<[T; 4], RoomMathError> {
    let mut xs = Vec::with_capacity(2);
    let mut ys = Vec::with_capacity(2);
    for it in items {
        match AxisClass::of(&normal(it), tolerance_deg) {
            AxisClass::X => xs.push(*it),
            AxisClass::Y => ys.push(*it),
            AxisClass::Other => return Err(RoomMathError::AxisMismatch),
        }
    }
    if xs.len() != 2 || ys.len() != 2 {
        return Err(RoomMathError::AxisMismatch);
    }
    Ok([xs[0], xs[1], ys[0], ys[1]])
}

/// `v_x + v_y` for four walls in any order.
pub fn room_center_from_planes(planes: &[PlaneCoeffs; 4], tolerance_deg: f64) -> Result<Vector2<f64>, RoomMathError> {
    let [xa, xb, ya, yb] = pair_planes(planes, |p| p.normal, tolerance_deg)?;
    let vx = room_center_from_pair(&xa, &xb, &Vector2::x(), tolerance_deg)?;
    let vy = room_center_from_pair(&ya, &yb, &Vector2::y(), tolerance_deg)?;
    Ok(vx + vy)
}

/// `e = p_room − (v_x + v_y)` for four walls in any order.
pub fn room_residual(
    p_room: &Vector2<f64>,
    planes: &[PlaneCoeffs; 4],
    tolerance_deg: f64,
) -> Result<Vector2<f64>, RoomMathError> {
    Ok(p_room - room_center_from_planes(planes, tolerance_deg)?)
}

/// Residual for planes already ordered `[X, X, Y, Y]`; no validation.
pub fn room_residual_paired(p_room: &Vector2<f64>, planes: &[PlaneCoeffs; 4]) -> Vector2<f64> {
    p_room - pair_midpoint(&planes[0], &planes[1], &Vector2::x()) - pair_midpoint(&planes[2], &planes[3], &Vector2::y())
}

fn room_jacobians(planes: &[PlaneCoeffs; 4]) -> [DMatrix<f64>; 5] {
    let mut out = [
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 3),
        DMatrix::zeros(2, 3),
        DMatrix::zeros(2, 3),
        DMatrix::zeros(2, 3),
    ];
    for (i, plane) in planes.iter().enumerate() {
        let (row, u) = if i < 2 { (0, Vector3::x()) } else { (1, Vector3::y()) };
        let (b1, b2) = sphere_basis(&plane.normal);
        // e_row = p_row − ½ Σ s_k,  s = −d (n·u)
        let j = &mut out[i + 1];
        j[(row, 0)] = 0.5 * plane.offset * b1.dot(&u);
        j[(row, 1)] = 0.5 * plane.offset * b2.dot(&u);
        j[(row, 2)] = 0.5 * plane.normal.dot(&u);
    }
    out
}

/// Scale a human room factor's information by `kappa`. Applied once, at
/// creation.
pub fn apply_human_weighting(mut factor: Factor, kappa: f64) -> Result<Factor, FactorError> {
    if !(kappa > 1.0) {
        return Err(FactorError::KappaTooSmall(kappa));
    }
    match factor.kind {
        FactorKind::Room { provenance: RoomProvenance::Human, .. } => {
            factor.noise.information *= kappa;
            factor.noise.human_scale *= kappa;
            Ok(factor)
        }
        _ => Err(FactorError::NotHumanRoom),
    }
}
