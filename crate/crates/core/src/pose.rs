//! 6-DoF pose of the white-marker platform from its four imaged centroids.
//!
//! The solver initializes from a normalized-DLT homography decomposed for a
//! planar target and refines with Levenberg–Marquardt on the reprojection
//! error. The planar two-fold ambiguity is resolved by refining from both
//! candidate orientations and keeping the lower-residual solution,
//! tie-broken toward the rest pose.
//!
//! Rotations are quaternions internally; Z-Y-X intrinsic Euler angles appear
//! only at the reporting boundary.

use crate::camera::{project_ideal, CameraIntrinsics};
use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("LM did not converge after {iterations} iterations (rms {rms:.3e} px)")]
    Convergence { iterations: usize, rms: f64, best: Pose6D },
    #[error("invalid platform model: {0}")]
    InvalidModel(String),
}

/// Rigid transform: rotation then translation, mapping platform coordinates
/// into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose6D {
    pub fn identity() -> Self {
        Self { translation: Vector3::zeros(), rotation: UnitQuaternion::identity() }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { translation, rotation }
    }

    /// Build from translation (mm) and Z-Y-X intrinsic Euler angles (deg).
    pub fn from_euler_zyx_deg(t: [f64; 3], angles_deg: [f64; 3]) -> Self {
        let [rx, ry, rz] = angles_deg.map(|a| a.to_radians());
        // nalgebra's from_euler_angles(roll, pitch, yaw) builds Rz*Ry*Rx.
        Self {
            translation: Vector3::new(t[0], t[1], t[2]),
            rotation: UnitQuaternion::from_euler_angles(rx, ry, rz),
        }
    }

    /// Z-Y-X intrinsic Euler angles in degrees, reported as (rx, ry, rz) =
    /// (roll, pitch, yaw).
    pub fn euler_zyx_deg(&self) -> [f64; 3] {
        let (roll, pitch, yaw) = self.rotation.euler_angles();
        [roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees()]
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        Pose6D {
            translation: self.rotation * other.translation + self.translation,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Pose6D {
        let rinv = self.rotation.inverse();
        Pose6D { translation: -(rinv * self.translation), rotation: rinv }
    }

    /// Angular distance to another pose, radians.
    pub fn rotation_distance(&self, other: &Pose6D) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Flat JSON form `{tx, ty, tz, rx, ry, rz}` in mm / deg.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose6DJson {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl From<&Pose6D> for Pose6DJson {
    fn from(p: &Pose6D) -> Self {
        let [rx, ry, rz] = p.euler_zyx_deg();
        Self { tx: p.translation.x, ty: p.translation.y, tz: p.translation.z, rx, ry, rz }
    }
}

impl From<&Pose6DJson> for Pose6D {
    fn from(j: &Pose6DJson) -> Self {
        Pose6D::from_euler_zyx_deg([j.tx, j.ty, j.tz], [j.rx, j.ry, j.rz])
    }
}

/// The white-marker plane: four coplanar marker positions in the platform
/// frame and the platform's rest pose in the camera frame.
#[derive(Debug, Clone)]
pub struct PlatformModel {
    pub marker_points: [Vector3<f64>; 4],
    pub rest_pose: Pose6D,
}

impl PlatformModel {
    pub fn new(marker_points: [Vector3<f64>; 4], rest_pose: Pose6D) -> Result<Self, PoseError> {
        let m = Self { marker_points, rest_pose };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        let [a, b, c, d] = &self.marker_points;
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-9 {
            return Err(PoseError::InvalidModel("first three markers are collinear".into()));
        }
        let dist = (d - a).dot(&n.normalize()).abs();
        if dist > 1e-9 {
            return Err(PoseError::InvalidModel(format!("markers not coplanar: offset {dist} mm")));
        }
        Ok(())
    }
}

impl Default for PlatformModel {
    /// Four markers on a 12 mm square, platform plane 8 mm from the camera.
    /// Storage order matches the detector's angular ordering around the
    /// image center so correspondence is positional.
    fn default() -> Self {
        Self {
            marker_points: [
                Vector3::new(-6.0, -6.0, 0.0),
                Vector3::new(6.0, -6.0, 0.0),
                Vector3::new(6.0, 6.0, 0.0),
                Vector3::new(-6.0, 6.0, 0.0),
            ],
            rest_pose: Pose6D::new(Vector3::new(0.0, 0.0, 8.0), UnitQuaternion::identity()),
        }
    }
}

/// Solver parameters for the LM refinement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnpConfig {
    pub lm_initial_damping: f64,
    pub lm_damping_scale: f64,
    pub lm_max_iters: usize,
    pub lm_step_tol: f64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self { lm_initial_damping: 1e-3, lm_damping_scale: 10.0, lm_max_iters: 100, lm_step_tol: 1e-10 }
    }
}

/// Result of a planar PnP solve.
#[derive(Debug, Clone, Copy)]
pub struct PnpSolution {
    pub pose: Pose6D,
    pub reprojection_rms_px: f64,
    pub iterations: usize,
}

/// RMS distance in px between projected model points and observations.
/// Points that fail to project contribute an infinite penalty.
pub fn reprojection_rms(
    model: &PlatformModel,
    pose: &Pose6D,
    image_pts: &[Vector2<f64>; 4],
    intr: &CameraIntrinsics,
) -> f64 {
    let mut se = 0.0;
    for (s, obs) in model.marker_points.iter().zip(image_pts) {
        let p = pose.transform_point(s);
        match project_ideal(&p, intr) {
            Ok(px) => se += (px - obs).norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    (se / 4.0).sqrt()
}

/// Residual vector (8) and Jacobian (8x6) of the reprojection error at a
/// pose. Parameters are ordered `[dt; dω]` with the rotation perturbation
/// applied as `R ← exp(dω) · R`.
pub fn reprojection_residuals_and_jacobian(
    model_pts: &[Vector3<f64>; 4],
    pose: &Pose6D,
    image_pts: &[Vector2<f64>; 4],
    intr: &CameraIntrinsics,
) -> Option<(SVector<f64, 8>, SMatrix<f64, 8, 6>)> {
    let mut r = SVector::<f64, 8>::zeros();
    let mut j = SMatrix::<f64, 8, 6>::zeros();
    for (i, (s, obs)) in model_pts.iter().zip(image_pts).enumerate() {
        let rs = pose.rotation * s;
        let p = rs + pose.translation;
        if p.z <= 1e-9 {
            return None;
        }
        let inv_z = 1.0 / p.z;
        let u = intr.fx * p.x * inv_z + intr.cx;
        let v = intr.fy * p.y * inv_z + intr.cy;
        r[2 * i] = u - obs.x;
        r[2 * i + 1] = v - obs.y;

        // d(u,v)/dp
        let du = Vector3::new(intr.fx * inv_z, 0.0, -intr.fx * p.x * inv_z * inv_z);
        let dv = Vector3::new(0.0, intr.fy * inv_z, -intr.fy * p.y * inv_z * inv_z);
        // dp/dt = I, dp/dω = -[R s]×
        let skew = Matrix3::new(0.0, -rs.z, rs.y, rs.z, 0.0, -rs.x, -rs.y, rs.x, 0.0);
        for k in 0..3 {
            j[(2 * i, k)] = du[k];
            j[(2 * i + 1, k)] = dv[k];
        }
        let jw_u = -du.transpose() * skew;
        let jw_v = -dv.transpose() * skew;
        for k in 0..3 {
            j[(2 * i, 3 + k)] = jw_u[k];
            j[(2 * i + 1, 3 + k)] = jw_v[k];
        }
    }
    Some((r, j))
}

/// Normalized DLT homography from four correspondences (planar model x,y →
/// pixel u,v).
fn homography_dlt(model_xy: &[Vector2<f64>; 4], image_pts: &[Vector2<f64>; 4]) -> Result<Matrix3<f64>, PoseError> {
    let normalize = |pts: &[Vector2<f64>; 4]| -> (Matrix3<f64>, [Vector2<f64>; 4]) {
        let mean = pts.iter().fold(Vector2::zeros(), |s, p| s + p) / 4.0;
        let scale = {
            let d: f64 = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / 4.0;
            if d > 1e-12 {
                std::f64::consts::SQRT_2 / d
            } else {
                1.0
            }
        };
        let t = Matrix3::new(scale, 0.0, -scale * mean.x, 0.0, scale, -scale * mean.y, 0.0, 0.0, 1.0);
        let mapped = [0, 1, 2, 3].map(|i| (pts[i] - mean) * scale);
        (t, mapped)
    };
    let (t_model, m) = normalize(model_xy);
    let (t_image, u) = normalize(image_pts);

    let mut a = SMatrix::<f64, 8, 9>::zeros();
    for i in 0..4 {
        let (x, y) = (m[i].x, m[i].y);
        let (up, vp) = (u[i].x, u[i].y);
        a.set_row(i * 2, &SMatrix::<f64, 1, 9>::from_row_slice(&[
            -x, -y, -1.0, 0.0, 0.0, 0.0, up * x, up * y, up,
        ]));
        a.set_row(i * 2 + 1, &SMatrix::<f64, 1, 9>::from_row_slice(&[
            0.0, 0.0, 0.0, -x, -y, -1.0, vp * x, vp * y, vp,
        ]));
    }
    // Null vector of A via the smallest eigenpair of AᵀA.
    let ata = a.transpose() * a;
    let eig = ata.symmetric_eigen();
    let mut min_idx = 0;
    for k in 1..9 {
        if eig.eigenvalues[k] < eig.eigenvalues[min_idx] {
            min_idx = k;
        }
    }
    let h = eig.eigenvectors.column(min_idx);
    if h.norm() < 1e-12 {
        return Err(PoseError::Degenerate("homography null vector collapse".into()));
    }
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // Undo normalization.
    let t_image_inv = t_image.try_inverse().ok_or_else(|| PoseError::Degenerate("singular normalization".into()))?;
    Ok(t_image_inv * hn * t_model)
}

/// Decompose a planar homography into a rigid pose given the intrinsics.
fn decompose_homography(h: &Matrix3<f64>, intr: &CameraIntrinsics) -> Result<Pose6D, PoseError> {
    let k_inv = Matrix3::new(
        1.0 / intr.fx, 0.0, -intr.cx / intr.fx,
        0.0, 1.0 / intr.fy, -intr.cy / intr.fy,
        0.0, 0.0, 1.0,
    );
    let m = k_inv * h;
    let m1 = m.column(0).into_owned();
    let m2 = m.column(1).into_owned();
    let m3 = m.column(2).into_owned();
    let n1 = m1.norm();
    let n2 = m2.norm();
    if n1 < 1e-12 || n2 < 1e-12 {
        return Err(PoseError::Degenerate("homography column collapse".into()));
    }
    let mut s = 1.0 / (n1 * n2).sqrt();
    // The platform must be in front of the camera.
    if (m3 * s).z < 0.0 {
        s = -s;
    }
    let t = m3 * s;
    let r1 = m1 * s;
    let r2 = m2 * s;
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    // Nearest rotation by polar decomposition.
    let svd = approx.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * vt;
    }
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    Ok(Pose6D::new(t, rot))
}

/// Mirror candidate for the planar two-fold ambiguity: reflect the plane
/// normal about the viewing direction.
fn ambiguous_partner(pose: &Pose6D) -> Option<Pose6D> {
    let n = pose.rotation * Vector3::z();
    let v = pose.translation.normalize();
    let axis = v.cross(&n);
    let sin = axis.norm();
    if sin < 1e-6 {
        return None; // fronto-parallel: no distinct partner
    }
    let angle = sin.atan2(v.dot(&n));
    let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), -2.0 * angle);
    Some(Pose6D::new(pose.translation, rot * pose.rotation))
}

fn lm_refine(
    model_pts: &[Vector3<f64>; 4],
    init: &Pose6D,
    image_pts: &[Vector2<f64>; 4],
    intr: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> (Pose6D, f64, usize, bool) {
    let mut pose = *init;
    let mut damping = cfg.lm_initial_damping;
    let mut converged = false;
    let mut iters = 0;

    let eval = |p: &Pose6D| reprojection_residuals_and_jacobian(model_pts, p, image_pts, intr);
    let Some((mut r, mut j)) = eval(&pose) else {
        return (pose, f64::INFINITY, 0, false);
    };
    let mut cost = r.norm_squared();

    for it in 0..cfg.lm_max_iters {
        iters = it + 1;
        let jtj = j.transpose() * j;
        let jtr = j.transpose() * r;
        let mut aug = jtj;
        for k in 0..6 {
            aug[(k, k)] += damping * jtj[(k, k)].max(1e-12);
        }
        let Some(step) = aug.lu().solve(&(-jtr)) else {
            damping *= cfg.lm_damping_scale;
            continue;
        };
        let candidate = Pose6D {
            translation: pose.translation + step.fixed_rows::<3>(0).into_owned(),
            rotation: UnitQuaternion::from_scaled_axis(step.fixed_rows::<3>(3).into_owned()) * pose.rotation,
        };
        match eval(&candidate) {
            Some((rc, jc)) if rc.norm_squared() < cost => {
                pose = candidate;
                cost = rc.norm_squared();
                r = rc;
                j = jc;
                damping = (damping / cfg.lm_damping_scale).max(1e-12);
                if step.norm() < cfg.lm_step_tol {
                    converged = true;
                    break;
                }
            }
            _ => {
                damping *= cfg.lm_damping_scale;
                if step.norm() < cfg.lm_step_tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    ((pose), (cost / 4.0).sqrt(), iters, converged)
}

/// Recover the platform pose from four white-marker centroids observed in an
/// undistorted frame. Point order must match the model's marker order.
pub fn solve_planar_pnp(
    model: &PlatformModel,
    image_pts: &[Vector2<f64>; 4],
    intr: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> Result<PnpSolution, PoseError> {
    model.validate()?;

    // Degeneracy: image points must span two dimensions.
    let mean = image_pts.iter().fold(Vector2::zeros(), |s, p| s + p) / 4.0;
    let mut cov = nalgebra::Matrix2::<f64>::zeros();
    for p in image_pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (emin, emax) = (eig[0].min(eig[1]), eig[0].max(eig[1]));
    if emax < 1e-12 || emin / emax < 1e-10 {
        return Err(PoseError::Degenerate("image points are collinear or coincident".into()));
    }

    // Planar model coordinates: drop z after verifying coplanarity (the
    // platform frame is constructed with markers in its z=0 plane).
    let model_xy = [0, 1, 2, 3].map(|i| Vector2::new(model.marker_points[i].x, model.marker_points[i].y));
    let h = homography_dlt(&model_xy, image_pts)?;
    let init = decompose_homography(&h, intr)?;

    let mut candidates = vec![init];
    if let Some(alt) = ambiguous_partner(&init) {
        candidates.push(alt);
    }

    let mut best: Option<(Pose6D, f64, usize, bool)> = None;
    for cand in candidates {
        let (pose, rms, iters, ok) = lm_refine(&model.marker_points, &cand, image_pts, intr, cfg);
        let better = match &best {
            None => true,
            Some((bp, brms, _, _)) => {
                if (rms - brms).abs() < 1e-9 {
                    // Tie-break: the platform physically stays near rest.
                    let d_new = (pose.translation - model.rest_pose.translation).norm()
                        + pose.rotation_distance(&model.rest_pose);
                    let d_old = (bp.translation - model.rest_pose.translation).norm()
                        + bp.rotation_distance(&model.rest_pose);
                    d_new < d_old
                } else {
                    rms < *brms
                }
            }
        };
        if better {
            best = Some((pose, rms, iters, ok));
        }
    }
    let (pose, rms, iterations, converged) = best.expect("at least one candidate");
    if !converged && rms > 1e-6 {
        return Err(PoseError::Convergence { iterations, rms, best: pose });
    }
    Ok(PnpSolution { pose, reprojection_rms_px: rms, iterations })
}

/// Order four detected centroids by angular position around the image
/// center, matching the simulator's marker ordering convention.
pub fn order_by_angle(pts: &[Vector2<f64>], center: Vector2<f64>) -> Vec<Vector2<f64>> {
    let mut v: Vec<Vector2<f64>> = pts.to_vec();
    v.sort_by(|a, b| {
        let aa = (a.y - center.y).atan2(a.x - center.x);
        let ab = (b.y - center.y).atan2(b.x - center.x);
        aa.total_cmp(&ab)
    });
    v
}
