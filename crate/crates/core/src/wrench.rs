//! Linear stiffness map between platform pose deflection and the applied
//! 6-axis wrench, with least-squares calibration and an analytic
//! plate-on-springs model.

use crate::pose::Pose6D;
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Measured maximum load force of the sensing structure, N.
pub const MAX_LOAD_FORCE_N: f64 = 17.0;

/// Rotation-vector magnitude above which the small-angle treatment of a
/// deflection is flagged.
pub const SMALL_ANGLE_LIMIT_RAD: f64 = 0.35;

#[derive(Debug, Error)]
pub enum WrenchError {
    #[error("rank-deficient calibration data: {0}")]
    RankDeficient(String),
    #[error("singular spring layout: {0}")]
    SingularLayout(String),
    #[error("invalid stiffness data: {0}")]
    Invalid(String),
}

/// Pose of the platform relative to the reference frame capture: translation
/// in mm and rotation-vector components in rad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDelta {
    pub translation: Vector3<f64>,
    pub rotation: Vector3<f64>,
    /// Set when the rotation magnitude exceeds the small-angle regime.
    pub large_rotation: bool,
}

impl PoseDelta {
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Self { translation, rotation, large_rotation: rotation.norm() >= SMALL_ANGLE_LIMIT_RAD }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn as_vector(&self) -> SVector<f64, 6> {
        SVector::<f64, 6>::from_column_slice(&[
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
        ])
    }

    pub fn from_vector(v: &SVector<f64, 6>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }
}

/// 6-axis force/torque. Forces in N, torques in N·mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    /// Set when |force| exceeds the measured maximum load. A flag, not a
    /// clamp: downstream consumers decide.
    #[serde(default)]
    pub saturated: bool,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque, saturated: force.norm() > MAX_LOAD_FORCE_N }
    }

    pub fn zero() -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros(), saturated: false }
    }

    pub fn as_vector(&self) -> SVector<f64, 6> {
        SVector::<f64, 6>::from_column_slice(&[
            self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z,
        ])
    }

    pub fn from_vector(v: &SVector<f64, 6>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }
}

/// 6×6 linear map from [`PoseDelta`] to [`Wrench`]. Units by block: N/mm,
/// N/rad, N·mm/mm, N·mm/rad.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessMatrix {
    pub matrix: SMatrix<f64, 6, 6>,
}

impl StiffnessMatrix {
    pub fn new(matrix: SMatrix<f64, 6, 6>) -> Result<Self, WrenchError> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(WrenchError::Invalid("non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn diagonal(k: [f64; 6]) -> Self {
        Self { matrix: SMatrix::from_diagonal(&SVector::<f64, 6>::from_column_slice(&k)) }
    }

    /// σ_max / σ_min of the matrix.
    pub fn condition_number(&self) -> f64 {
        let svd = self.matrix.svd(false, false);
        let max = svd.singular_values.max();
        let min = svd.singular_values.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn try_inverse(&self) -> Option<SMatrix<f64, 6, 6>> {
        self.matrix.try_inverse()
    }

    pub fn is_symmetric_positive_definite(&self) -> bool {
        let sym = (self.matrix - self.matrix.transpose()).norm() < 1e-9 * self.matrix.norm().max(1.0);
        sym && nalgebra::Cholesky::new(self.matrix).is_some()
    }
}

/// JSON form: row-major values plus a units block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessMatrixJson {
    pub row_major: Vec<f64>,
    pub units: StiffnessUnits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessUnits {
    pub force_translation: String,
    pub force_rotation: String,
    pub torque_translation: String,
    pub torque_rotation: String,
}

impl Default for StiffnessUnits {
    fn default() -> Self {
        Self {
            force_translation: "N/mm".into(),
            force_rotation: "N/rad".into(),
            torque_translation: "N.mm/mm".into(),
            torque_rotation: "N.mm/rad".into(),
        }
    }
}

impl From<&StiffnessMatrix> for StiffnessMatrixJson {
    fn from(s: &StiffnessMatrix) -> Self {
        let mut row_major = Vec::with_capacity(36);
        for r in 0..6 {
            for c in 0..6 {
                row_major.push(s.matrix[(r, c)]);
            }
        }
        Self { row_major, units: StiffnessUnits::default() }
    }
}

impl TryFrom<&StiffnessMatrixJson> for StiffnessMatrix {
    type Error = WrenchError;

    fn try_from(j: &StiffnessMatrixJson) -> Result<Self, WrenchError> {
        if j.row_major.len() != 36 {
            return Err(WrenchError::Invalid(format!("expected 36 values, got {}", j.row_major.len())));
        }
        StiffnessMatrix::new(SMatrix::<f64, 6, 6>::from_row_slice(&j.row_major))
    }
}

/// Relative rigid transform `reference⁻¹ ∘ current` with the rotation as a
/// rotation vector.
pub fn pose_delta(current: &Pose6D, reference: &Pose6D) -> PoseDelta {
    let rel = reference.inverse().compose(current);
    PoseDelta::new(rel.translation, rel.rotation.scaled_axis())
}

/// Apply the linear stiffness model: `w = S · d`.
pub fn wrench_from_pose(d: &PoseDelta, s: &StiffnessMatrix) -> Wrench {
    let w = s.matrix * d.as_vector();
    Wrench::from_vector(&w)
}

/// Calibration output: the fitted map plus residual diagnostics.
#[derive(Debug, Clone)]
pub struct StiffnessCalibration {
    pub stiffness: StiffnessMatrix,
    /// Per-wrench-axis RMS residual of the fit.
    pub per_axis_rms: [f64; 6],
    /// Condition number of the delta sample matrix.
    pub condition_number: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReportJson {
    pub stiffness: StiffnessMatrixJson,
    pub per_axis_rms: [f64; 6],
    pub condition_number: f64,
    pub samples: usize,
}

impl StiffnessCalibration {
    pub fn report(&self, samples: usize) -> CalibrationReportJson {
        CalibrationReportJson {
            stiffness: (&self.stiffness).into(),
            per_axis_rms: self.per_axis_rms,
            condition_number: self.condition_number,
            samples,
        }
    }
}

const AXIS_NAMES: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];

/// Row-wise linear least squares over (delta, wrench) samples.
pub fn calibrate_stiffness(samples: &[(PoseDelta, Wrench)]) -> Result<StiffnessCalibration, WrenchError> {
    let n = samples.len();
    if n < 6 {
        return Err(WrenchError::RankDeficient(format!("{n} samples, need at least 6")));
    }
    let mut d = DMatrix::<f64>::zeros(n, 6);
    let mut w = DMatrix::<f64>::zeros(n, 6);
    for (i, (delta, wrench)) in samples.iter().enumerate() {
        d.row_mut(i).copy_from(&delta.as_vector().transpose());
        w.row_mut(i).copy_from(&wrench.as_vector().transpose());
    }

    let svd = d.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax <= 0.0 || smin / smax < 1e-10 {
        // Name the deficient subspace from the right singular vectors that
        // pair with negligible singular values.
        let vt = svd.v_t.as_ref().expect("svd vectors requested");
        let mut deficient = Vec::new();
        for (k, &sv) in svd.singular_values.iter().enumerate() {
            if smax <= 0.0 || sv / smax < 1e-10 {
                let row = vt.row(k);
                let mut best = 0;
                for c in 1..6 {
                    if row[c].abs() > row[best].abs() {
                        best = c;
                    }
                }
                deficient.push(AXIS_NAMES[best]);
            }
        }
        deficient.dedup();
        return Err(WrenchError::RankDeficient(format!(
            "deltas do not span: unexcited axes {:?}",
            deficient
        )));
    }
    let cond = smax / smin;

    // Solve D · Sᵀ = W column-by-column via the SVD pseudo-inverse.
    let mut s = SMatrix::<f64, 6, 6>::zeros();
    let mut per_axis_rms = [0.0; 6];
    for axis in 0..6 {
        let rhs = DVector::from_column_slice(w.column(axis).as_slice());
        let sol = svd.solve(&rhs, 0.0).map_err(|e| WrenchError::Invalid(e.to_string()))?;
        for c in 0..6 {
            s[(axis, c)] = sol[c];
        }
        let residual = &d * &sol - rhs;
        per_axis_rms[axis] = (residual.norm_squared() / n as f64).sqrt();
    }

    Ok(StiffnessCalibration {
        stiffness: StiffnessMatrix::new(s)?,
        per_axis_rms,
        condition_number: cond,
    })
}

/// Small-deflection stiffness of a rigid plate on vertical compression
/// springs. Each spring contributes its axial rate along z and
/// `shear_fraction` of it laterally.
pub fn ideal_spring_stiffness(
    positions: &[Vector3<f64>],
    axial_rate_n_per_mm: f64,
    shear_fraction: f64,
) -> Result<StiffnessMatrix, WrenchError> {
    if positions.len() < 3 {
        return Err(WrenchError::SingularLayout(format!(
            "{} springs cannot constrain torsion; need at least 3 non-collinear",
            positions.len()
        )));
    }
    if !(axial_rate_n_per_mm > 0.0) || !(shear_fraction > 0.0) {
        return Err(WrenchError::Invalid("spring rates must be positive".into()));
    }
    // Collinearity: positions must span a 2-D plane.
    let mean = positions.iter().fold(Vector3::zeros(), |s, p| s + p) / positions.len() as f64;
    let mut cov = Matrix3::<f64>::zeros();
    for p in positions {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let mut evs: Vec<f64> = eig.iter().copied().collect();
    evs.sort_by(f64::total_cmp);
    if evs[1] / evs[2].max(1e-30) < 1e-10 {
        return Err(WrenchError::SingularLayout("spring positions are collinear".into()));
    }

    let k_local = Matrix3::from_diagonal(&Vector3::new(
        shear_fraction * axial_rate_n_per_mm,
        shear_fraction * axial_rate_n_per_mm,
        axial_rate_n_per_mm,
    ));
    let mut s = SMatrix::<f64, 6, 6>::zeros();
    for r in positions {
        let rx = Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0);
        // f_i = K (t - [r]× θ); F = Σ f_i; T = Σ [r]× f_i.
        let ff = k_local;
        let ft = -k_local * rx;
        let tf = rx * k_local;
        let tt = -rx * k_local * rx;
        for i in 0..3 {
            for j in 0..3 {
                s[(i, j)] += ff[(i, j)];
                s[(i, j + 3)] += ft[(i, j)];
                s[(i + 3, j)] += tf[(i, j)];
                s[(i + 3, j + 3)] += tt[(i, j)];
            }
        }
    }
    StiffnessMatrix::new(s)
}
