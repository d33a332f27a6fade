//! One config file for the whole stack: camera, sensor geometry, processing
//! parameters, simulator knobs, and the hardness experiment. Unknown keys
//! are rejected and every value is range-checked at load.

use crate::camera::{CameraIntrinsics, DistortionCoefficients, DomeGeometry};
use crate::flow::LkConfig;
use crate::imageproc::MarkerConfig;
use crate::pose::{PlatformModel, PnpConfig, Pose6D, Pose6DJson};
use crate::shape::{IntegrationConfig, LightConfig};
use crate::sim::{SensorBuild, SensorModel, SimError};
use crate::wrench::{ideal_spring_stiffness, StiffnessMatrix, StiffnessMatrixJson};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invalid at {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, message: message.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub intrinsics: CameraIntrinsics,
    pub distortion: DistortionCoefficients,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            distortion: DistortionCoefficients { k1: -0.18, k2: 0.025, p1: 0.0, p2: 0.0, k3: 0.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternSection {
    pub grid_step_px: f64,
    pub max_radius_px: f64,
    /// Keep-out radius around each white-marker sight line.
    pub exclusion_radius_px: f64,
    /// Dot radius used for the SVG export.
    pub svg_dot_radius_px: f64,
}

impl Default for PatternSection {
    fn default() -> Self {
        Self { grid_step_px: 24.0, max_radius_px: 210.0, exclusion_radius_px: 50.0, svg_dot_radius_px: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatformSection {
    pub markers_mm: [[f64; 3]; 4],
    pub rest_pose: Pose6DJson,
    pub marker_radius_mm: f64,
}

impl Default for PlatformSection {
    fn default() -> Self {
        let model = PlatformModel::default();
        Self {
            markers_mm: [0, 1, 2, 3].map(|i| {
                let p = model.marker_points[i];
                [p.x, p.y, p.z]
            }),
            rest_pose: (&model.rest_pose).into(),
            marker_radius_mm: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub blur_sigma: f64,
    pub sharpen_amount: f64,
    pub sharpen_sigma: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { blur_sigma: 1.0, sharpen_amount: 0.5, sharpen_sigma: 1.0 }
    }
}

/// Where the pipeline's stiffness matrix comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StiffnessSource {
    /// Explicit diagonal: [N/mm ×3, N·mm/rad ×3].
    Diagonal { values: [f64; 6] },
    /// Analytic plate-on-springs model.
    Springs { positions_mm: Vec<[f64; 3]>, axial_rate_n_per_mm: f64, shear_fraction: f64 },
    /// Full matrix, row-major with units block.
    Matrix(StiffnessMatrixJson),
    /// Load a calibration JSON produced by the calibrate command.
    File { path: String },
}

impl Default for StiffnessSource {
    fn default() -> Self {
        StiffnessSource::Diagonal { values: [10.0, 10.0, 10.0, 2000.0, 2000.0, 2000.0] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeSection {
    pub integration: IntegrationConfig,
    /// Indentation depth defining the contact-area count, mm.
    pub area_threshold_mm: f64,
    /// Margin inside the circular mask excluded from the shape domain, px.
    pub domain_margin_px: f64,
}

impl Default for ShapeSection {
    fn default() -> Self {
        Self { integration: IntegrationConfig::default(), area_threshold_mm: 0.05, domain_margin_px: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dot_radius_mm: f64,
    pub white_marker_radius_mm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub supersample: usize,
    pub advection_gain: f64,
    pub softness_rate_n_per_mm: f64,
    pub contact_sigma_factor: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        let b = SensorBuild::default();
        Self {
            dot_radius_mm: b.dot_radius_mm,
            white_marker_radius_mm: b.white_marker_radius_mm,
            noise_sigma: b.noise_sigma,
            seed: b.seed,
            supersample: b.supersample,
            advection_gain: b.advection_gain,
            softness_rate_n_per_mm: b.softness_rate_n_per_mm,
            contact_sigma_factor: b.contact_sigma_factor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlaySection {
    /// Multiplier on yellow flow arrows.
    pub flow_scale: f64,
    /// Multiplier on red pose arrows.
    pub pose_scale: f64,
}

impl Default for OverlaySection {
    fn default() -> Self {
        Self { flow_scale: 6.0, pose_scale: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    /// Pool over the last five selected frames.
    Last5,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardnessSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pooling: Pooling,
    /// Fraction of sequences used for training.
    pub train_fraction: f64,
}

impl Default for HardnessSection {
    fn default() -> Self {
        Self { learning_rate: 0.001, epochs: 3000, seed: 7, pooling: Pooling::Mean, train_fraction: 0.8 }
    }
}

/// Top-level configuration, JSON on disk.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    pub camera: CameraSection,
    pub dome: DomeGeometry,
    pub pattern: PatternSection,
    pub platform: PlatformSection,
    pub preprocess: PreprocessSection,
    pub black_markers: MarkerConfig,
    pub white_markers: MarkerConfig,
    pub flow: LkConfig,
    pub pnp: PnpConfig,
    pub stiffness: StiffnessSource,
    pub lights: LightConfig,
    pub shape: ShapeSection,
    pub sim: SimSection,
    pub overlay: OverlaySection,
    pub hardness: HardnessSection,
}

impl PipelineConfig {
    /// Defaults with the version tag set; `Default::default` would leave
    /// version 0 which `validate` rejects.
    pub fn standard() -> Self {
        Self {
            version: 1,
            // White platform markers are larger than the printed dots.
            white_markers: MarkerConfig { max_area: 900.0, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("config serializes"))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != 1 {
            return Err(invalid("version", format!("unsupported version {}", self.version)));
        }
        self.camera.intrinsics.validate().map_err(|e| invalid("camera.intrinsics", e.to_string()))?;
        self.camera.distortion.validate().map_err(|e| invalid("camera.distortion", e.to_string()))?;
        self.dome.validate().map_err(|e| invalid("dome", e.to_string()))?;
        if !(self.pattern.grid_step_px >= 2.0) {
            return Err(invalid("pattern.grid_step_px", "must be at least 2 px"));
        }
        if !(self.pattern.max_radius_px > 0.0) {
            return Err(invalid("pattern.max_radius_px", "must be positive"));
        }
        self.platform_model().map_err(|e| invalid("platform", e))?;
        if !(self.platform.marker_radius_mm > 0.0) {
            return Err(invalid("platform.marker_radius_mm", "must be positive"));
        }
        if !(self.preprocess.blur_sigma > 0.0) {
            return Err(invalid("preprocess.blur_sigma", "must be positive"));
        }
        if self.preprocess.sharpen_amount < 0.0 || !(self.preprocess.sharpen_sigma > 0.0) {
            return Err(invalid("preprocess.sharpen", "amount must be >= 0 and sigma positive"));
        }
        self.black_markers.validate().map_err(|e| invalid("black_markers", e.to_string()))?;
        self.white_markers.validate().map_err(|e| invalid("white_markers", e.to_string()))?;
        self.flow.validate().map_err(|e| invalid("flow", e.to_string()))?;
        if !(self.pnp.lm_initial_damping > 0.0) || self.pnp.lm_max_iters == 0 {
            return Err(invalid("pnp", "damping must be positive and lm_max_iters >= 1"));
        }
        self.lights.validate().map_err(|e| invalid("lights", e.to_string()))?;
        if !(self.shape.integration.omega > 0.0 && self.shape.integration.omega < 2.0) {
            return Err(invalid("shape.integration.omega", "must be in (0, 2)"));
        }
        if !(self.shape.integration.tolerance > 0.0) {
            return Err(invalid("shape.integration.tolerance", "must be positive"));
        }
        if !(self.shape.area_threshold_mm > 0.0) {
            return Err(invalid("shape.area_threshold_mm", "must be positive"));
        }
        if self.sim.supersample == 0 || self.sim.supersample > 16 {
            return Err(invalid("sim.supersample", "must be in 1..=16"));
        }
        if self.sim.noise_sigma < 0.0 {
            return Err(invalid("sim.noise_sigma", "must be non-negative"));
        }
        if !(self.sim.dot_radius_mm > 0.0 && self.sim.white_marker_radius_mm > 0.0) {
            return Err(invalid("sim", "marker radii must be positive"));
        }
        if !(self.hardness.learning_rate > 0.0) && self.hardness.learning_rate != 0.0 {
            return Err(invalid("hardness.learning_rate", "must be non-negative"));
        }
        if !(self.hardness.train_fraction > 0.0 && self.hardness.train_fraction < 1.0) {
            return Err(invalid("hardness.train_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn platform_model(&self) -> Result<PlatformModel, String> {
        let pts = self.platform.markers_mm.map(|p| Vector3::new(p[0], p[1], p[2]));
        let rest: Pose6D = (&self.platform.rest_pose).into();
        PlatformModel::new(pts, rest).map_err(|e| e.to_string())
    }

    /// Resolve the stiffness source; `base_dir` anchors relative file paths.
    pub fn stiffness_matrix(&self, base_dir: &Path) -> Result<StiffnessMatrix, ConfigError> {
        match &self.stiffness {
            StiffnessSource::Diagonal { values } => {
                if values.iter().any(|v| *v <= 0.0) {
                    return Err(invalid("stiffness.values", "diagonal entries must be positive"));
                }
                Ok(StiffnessMatrix::diagonal(*values))
            }
            StiffnessSource::Springs { positions_mm, axial_rate_n_per_mm, shear_fraction } => {
                let positions: Vec<Vector3<f64>> =
                    positions_mm.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
                ideal_spring_stiffness(&positions, *axial_rate_n_per_mm, *shear_fraction)
                    .map_err(|e| invalid("stiffness.springs", e.to_string()))
            }
            StiffnessSource::Matrix(json) => {
                StiffnessMatrix::try_from(json).map_err(|e| invalid("stiffness.matrix", e.to_string()))
            }
            StiffnessSource::File { path } => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full)?;
                let json: StiffnessMatrixJson = serde_json::from_str(&text)?;
                StiffnessMatrix::try_from(&json).map_err(|e| invalid("stiffness.file", e.to_string()))
            }
        }
    }

    /// Assemble the simulator model described by this config.
    pub fn sensor_model(&self, base_dir: &Path) -> Result<SensorModel, SimError> {
        let platform = self.platform_model().map_err(SimError::InvalidScenario)?;
        let stiffness = self
            .stiffness_matrix(base_dir)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        SensorModel::assemble(SensorBuild {
            intrinsics: self.camera.intrinsics,
            distortion: self.camera.distortion,
            dome: self.dome,
            platform,
            stiffness,
            lights: self.lights.clone(),
            pattern_grid_step_px: self.pattern.grid_step_px,
            pattern_max_radius_px: self.pattern.max_radius_px,
            pattern_exclusion_px: self.pattern.exclusion_radius_px,
            dot_radius_mm: self.sim.dot_radius_mm,
            white_marker_radius_mm: self.sim.white_marker_radius_mm,
            noise_sigma: self.sim.noise_sigma,
            seed: self.sim.seed,
            supersample: self.sim.supersample,
            advection_gain: self.sim.advection_gain,
            softness_rate_n_per_mm: self.sim.softness_rate_n_per_mm,
            contact_sigma_factor: self.sim.contact_sigma_factor,
        })
    }

    /// A scaled-down variant for bulk experiments: the same sensor watched
    /// through a proportionally smaller frame.
    pub fn scaled_frame(&self, factor: f64) -> Self {
        let mut cfg = self.clone();
        cfg.camera.intrinsics.fx *= factor;
        cfg.camera.intrinsics.fy *= factor;
        cfg.camera.intrinsics.cx *= factor;
        cfg.camera.intrinsics.cy *= factor;
        cfg.camera.intrinsics.width = (cfg.camera.intrinsics.width as f64 * factor).round() as usize;
        cfg.camera.intrinsics.height = (cfg.camera.intrinsics.height as f64 * factor).round() as usize;
        cfg.pattern.max_radius_px *= factor;
        cfg.pattern.exclusion_radius_px *= factor;
        // Keep the dot grid coarse enough that discs stay separated.
        cfg.pattern.grid_step_px = (cfg.pattern.grid_step_px * factor * 2.0).max(8.0);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_is_valid() {
        let cfg = PipelineConfig::standard();
        cfg.validate().unwrap();
        cfg.platform_model().unwrap();
        cfg.stiffness_matrix(Path::new(".")).unwrap();
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let cfg = PipelineConfig::standard();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let parsed: PipelineConfig = serde_json::from_str(&text).unwrap();
        parsed.validate().unwrap();
        assert_eq!(serde_json::to_string(&parsed).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::to_value(PipelineConfig::standard()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<PipelineConfig>(v).is_err());

        let mut v2: serde_json::Value = serde_json::to_value(PipelineConfig::standard()).unwrap();
        v2["camera"]["intrinsics"]["zoom"] = serde_json::json!(2.0);
        assert!(serde_json::from_value::<PipelineConfig>(v2).is_err());
    }

    #[test]
    fn range_checks_fire_with_key_paths() {
        let mut cfg = PipelineConfig::standard();
        cfg.preprocess.blur_sigma = -1.0;
        match cfg.validate() {
            Err(ConfigError::Invalid { key, .. }) => assert_eq!(key, "preprocess.blur_sigma"),
            other => panic!("expected invalid, got {other:?}"),
        }

        let mut cfg2 = PipelineConfig::standard();
        cfg2.black_markers.t_low = 250;
        assert!(cfg2.validate().is_err());

        let mut cfg3 = PipelineConfig::standard();
        cfg3.version = 2;
        assert!(cfg3.validate().is_err());
    }

    #[test]
    fn stiffness_sources_resolve() {
        let mut cfg = PipelineConfig::standard();
        cfg.stiffness = StiffnessSource::Springs {
            positions_mm: vec![[7.0, 7.0, 0.0], [-7.0, 7.0, 0.0], [-7.0, -7.0, 0.0], [7.0, -7.0, 0.0]],
            axial_rate_n_per_mm: 2.5,
            shear_fraction: 0.3,
        };
        let s = cfg.stiffness_matrix(Path::new(".")).unwrap();
        assert!((s.matrix[(2, 2)] - 10.0).abs() < 1e-12);

        let dir = std::env::temp_dir();
        let path = dir.join("dometac_stiffness_cfg_test.json");
        let json: StiffnessMatrixJson = (&s).into();
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        cfg.stiffness = StiffnessSource::File { path: path.to_string_lossy().into_owned() };
        let s2 = cfg.stiffness_matrix(Path::new("/")).unwrap();
        assert_eq!(s.matrix, s2.matrix);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn sensor_model_assembles_from_config() {
        let cfg = PipelineConfig::standard();
        let model = cfg.sensor_model(Path::new(".")).unwrap();
        assert!(model.pattern.dots.len() > 100);
        assert!((model.pitch_mm() - 2.0 / 160.0).abs() < 1e-12);
    }
}
