//! Per-frame orchestration of the full perception chain.
//!
//! Frame 0 is the reference capture: black-dot centroids seed the flow
//! tracks and the white-marker pose becomes the reference coordinate for
//! every later deflection. Each subsequent frame runs
//! undistort → blur → mask → sharpen → gray, then black flow against the
//! previous frame, white PnP against the reference, the stiffness map, and
//! optionally photometric shape recovery. Marker-count anomalies are
//! reported per frame as flags and processing continues.

use crate::camera::{undistort_frame, undistort_map, CameraIntrinsics, UndistortMap};
use crate::config::PipelineConfig;
use crate::flow::{lk_track_prepared, prepare_pyramid, FlowField, LkConfig, PreparedPyramid, TrackStatus};
use crate::imageproc::{
    circle_coverage, circular_mask, extract_markers, gaussian_blur, sharpen, to_gray, Frame,
    MarkerConfig, MarkerKind,
};
use crate::pose::{order_by_angle, solve_planar_pnp, PlatformModel, PnpConfig, PnpSolution, Pose6D};
use crate::shape::{
    fill_invalid_normals_within, integrate_normals, normals_from_rgb, HeightMap, IntegrationConfig,
    LightConfig,
};
use crate::sim::SensorModel;
use crate::wrench::{pose_delta, wrench_from_pose, PoseDelta, StiffnessMatrix, Wrench};
use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
    #[error(transparent)]
    ImageProc(#[from] crate::imageproc::ImageProcError),
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
    #[error(transparent)]
    Shape(#[from] crate::shape::ShapeError),
    #[error("reference frame could not be initialized: {0}")]
    ReferenceInit(String),
}

/// Everything the processor needs, decoupled from where it came from.
#[derive(Debug, Clone)]
pub struct ProcessorParts {
    pub intrinsics: CameraIntrinsics,
    pub map: UndistortMap,
    pub platform: PlatformModel,
    pub stiffness: StiffnessMatrix,
    pub lights: LightConfig,
    pub blur_sigma: f64,
    pub sharpen_amount: f64,
    pub sharpen_sigma: f64,
    pub black_markers: MarkerConfig,
    pub white_markers: MarkerConfig,
    pub flow: LkConfig,
    pub pnp: PnpConfig,
    pub integration: IntegrationConfig,
    pub shape_domain_margin_px: f64,
    pub pitch_mm: f64,
}

impl ProcessorParts {
    pub fn from_config(cfg: &PipelineConfig, base_dir: &std::path::Path) -> Result<Self, String> {
        cfg.validate().map_err(|e| e.to_string())?;
        let platform = cfg.platform_model()?;
        let stiffness = cfg.stiffness_matrix(base_dir).map_err(|e| e.to_string())?;
        let map = undistort_map(&cfg.camera.intrinsics, &cfg.camera.distortion);
        let apex_z = cfg.dome.apex().z;
        Ok(Self {
            intrinsics: cfg.camera.intrinsics,
            map,
            platform,
            stiffness,
            lights: cfg.lights.clone(),
            blur_sigma: cfg.preprocess.blur_sigma,
            sharpen_amount: cfg.preprocess.sharpen_amount,
            sharpen_sigma: cfg.preprocess.sharpen_sigma,
            black_markers: cfg.black_markers.clone(),
            white_markers: cfg.white_markers.clone(),
            flow: cfg.flow.clone(),
            pnp: cfg.pnp,
            integration: cfg.shape.integration,
            shape_domain_margin_px: cfg.shape.domain_margin_px,
            pitch_mm: apex_z / cfg.camera.intrinsics.fx,
        })
    }

    /// Processor matched to a simulator model: identical camera, platform,
    /// stiffness and lights; processing knobs from the config.
    pub fn matching_model(model: &SensorModel, cfg: &PipelineConfig) -> Self {
        let map = undistort_map(&model.intrinsics, &model.distortion);
        Self {
            intrinsics: model.intrinsics,
            map,
            platform: model.platform.clone(),
            stiffness: model.stiffness.clone(),
            lights: model.lights.clone(),
            blur_sigma: cfg.preprocess.blur_sigma,
            sharpen_amount: cfg.preprocess.sharpen_amount,
            sharpen_sigma: cfg.preprocess.sharpen_sigma,
            black_markers: cfg.black_markers.clone(),
            white_markers: cfg.white_markers.clone(),
            flow: cfg.flow.clone(),
            pnp: cfg.pnp,
            integration: cfg.shape.integration,
            shape_domain_margin_px: cfg.shape.domain_margin_px,
            pitch_mm: model.pitch_mm(),
        }
    }
}

/// Per-frame processing switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcessOptions {
    /// Run photometric shape recovery on this frame.
    pub shape: bool,
    /// Gaussian jitter (sigma px, seed) injected into the white centroids
    /// before PnP; robustness-testing knob.
    pub centroid_jitter: Option<(f64, u64)>,
}

/// One black-dot track carried through the sequence.
#[derive(Debug, Clone)]
struct Track {
    origin: Vector2<f64>,
    position: Vector2<f64>,
    alive: bool,
}

/// Outputs for one processed frame.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub index: usize,
    pub black_count: usize,
    /// Angular-ordered white centroids, when exactly four were found.
    pub white_centroids: Option<[Vector2<f64>; 4]>,
    pub pose: Option<PnpSolution>,
    pub delta: Option<PoseDelta>,
    pub wrench: Option<Wrench>,
    /// Frame-to-frame flow of the live tracks.
    pub flow: Option<FlowField>,
    /// Mean cumulative displacement of live tracks since the reference.
    pub mean_cumulative_displacement_px: f64,
    pub live_tracks: usize,
    pub height: Option<HeightMap>,
    pub flags: Vec<String>,
    /// Undistorted, masked color frame (pre-sharpen) for overlays/shape.
    pub processed: Frame,
}

/// Reference-frame state.
struct Reference {
    white: [Vector2<f64>; 4],
    pose: Pose6D,
}

/// Stateful sequence processor; feed frames in order, frame 0 first.
pub struct FrameProcessor {
    parts: ProcessorParts,
    reference: Option<Reference>,
    prev_pyramid: Option<PreparedPyramid>,
    tracks: Vec<Track>,
    frames_seen: usize,
}

impl FrameProcessor {
    pub fn new(parts: ProcessorParts) -> Self {
        Self { parts, reference: None, prev_pyramid: None, tracks: Vec::new(), frames_seen: 0 }
    }

    pub fn parts(&self) -> &ProcessorParts {
        &self.parts
    }

    /// Reference white centroids (available after frame 0).
    pub fn reference_white(&self) -> Option<[Vector2<f64>; 4]> {
        self.reference.as_ref().map(|r| r.white)
    }

    pub fn reference_pose(&self) -> Option<Pose6D> {
        self.reference.as_ref().map(|r| r.pose)
    }

    /// Current positions of live tracks (origin, position).
    pub fn live_track_positions(&self) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        self.tracks.iter().filter(|t| t.alive).map(|t| (t.origin, t.position)).collect()
    }

    pub fn process(&mut self, frame: &Frame, opts: &ProcessOptions) -> Result<FrameOutput, PipelineError> {
        let p = &self.parts;
        let mut flags = Vec::new();

        // The §-chain: undistort, blur, mask, sharpen, gray.
        let undist = undistort_frame(frame, &p.map)?;
        let blurred = gaussian_blur(&undist, p.blur_sigma);
        let masked = circular_mask(&blurred);
        let sharpened = sharpen(&masked, p.sharpen_amount, p.sharpen_sigma);
        let gray = to_gray(&sharpened);

        // White markers from the current frame.
        let white_set = extract_markers(&gray, MarkerKind::White, &p.white_markers)?;
        let center = Vector2::new(p.intrinsics.cx, p.intrinsics.cy);
        let mut white_centroids: Option<[Vector2<f64>; 4]> = None;
        if white_set.len() == 4 {
            let ordered = order_by_angle(&white_set.centroids, center);
            let mut arr = [Vector2::zeros(); 4];
            arr.copy_from_slice(&ordered);
            // Optional robustness jitter.
            if let Some((sigma, seed)) = opts.centroid_jitter {
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ self.frames_seen as u64);
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                for c in arr.iter_mut() {
                    c.x += normal.sample(&mut rng);
                    c.y += normal.sample(&mut rng);
                }
            }
            white_centroids = Some(arr);
        } else {
            flags.push(format!("white marker count {} != 4", white_set.len()));
        }

        let index = self.frames_seen;
        let is_reference = self.reference.is_none();

        // Black dots: detected on the reference frame only, then tracked.
        let pyramid = prepare_pyramid(&gray, p.flow.levels)?;
        let mut flow = None;
        let mut black_count = 0;
        if is_reference {
            let black = extract_markers(&gray, MarkerKind::Black, &p.black_markers)?;
            black_count = black.len();
            if black.is_empty() {
                flags.push("no black markers detected on reference frame".into());
            }
            self.tracks = black
                .centroids
                .iter()
                .map(|c| Track { origin: *c, position: *c, alive: true })
                .collect();
        } else if let Some(prev) = &self.prev_pyramid {
            let live_positions: Vec<Vector2<f64>> =
                self.tracks.iter().filter(|t| t.alive).map(|t| t.position).collect();
            if !live_positions.is_empty() {
                let field = lk_track_prepared(prev, &pyramid, &live_positions, &p.flow)?;
                // Update live tracks; lost points are dropped for the rest
                // of the sequence.
                let mut k = 0;
                for t in self.tracks.iter_mut().filter(|t| t.alive) {
                    match field.status[k] {
                        TrackStatus::Tracked => t.position += field.displacements[k],
                        TrackStatus::Lost => t.alive = false,
                    }
                    k += 1;
                }
                flow = Some(field);
            }
            black_count = self.tracks.iter().filter(|t| t.alive).count();
        }

        // Pose, deflection, wrench.
        let mut pose = None;
        let mut delta = None;
        let mut wrench = None;
        if let Some(obs) = &white_centroids {
            match solve_planar_pnp(&p.platform, obs, &p.intrinsics, &p.pnp) {
                Ok(sol) => {
                    if is_reference {
                        self.reference = Some(Reference { white: *obs, pose: sol.pose });
                    }
                    let reference_pose = self.reference.as_ref().expect("reference set").pose;
                    let d = pose_delta(&sol.pose, &reference_pose);
                    let w = wrench_from_pose(&d, &p.stiffness);
                    pose = Some(sol);
                    delta = Some(d);
                    wrench = Some(w);
                }
                Err(e) => flags.push(format!("pnp failed: {e}")),
            }
        }
        if is_reference && self.reference.is_none() {
            return Err(PipelineError::ReferenceInit(format!(
                "frame 0 must yield a white-marker pose; flags: {flags:?}"
            )));
        }

        // Photometric shape from the masked, pre-sharpen frame.
        let mut height = None;
        if opts.shape {
            let mut normals = normals_from_rgb(&masked, &p.lights)?;
            let domain = shape_domain(masked.width, masked.height, p.shape_domain_margin_px);
            for (v, inside) in normals.valid.iter_mut().zip(&domain) {
                *v &= *inside;
            }
            fill_invalid_normals_within(&mut normals, p.integration.fill_radius, &domain);
            let hm = integrate_normals(&normals, p.pitch_mm, &p.integration)?;
            height = Some(hm);
        }

        let live: Vec<&Track> = self.tracks.iter().filter(|t| t.alive).collect();
        let mean_cum = if live.is_empty() {
            0.0
        } else {
            live.iter().map(|t| (t.position - t.origin).norm()).sum::<f64>() / live.len() as f64
        };

        self.prev_pyramid = Some(pyramid);
        self.frames_seen += 1;

        Ok(FrameOutput {
            index,
            black_count,
            white_centroids,
            pose,
            delta,
            wrench,
            flow,
            mean_cumulative_displacement_px: mean_cum,
            live_tracks: live.len(),
            height,
            flags,
            processed: masked,
        })
    }
}

/// Circle-of-height domain shrunk by a margin, as a flat mask.
fn shape_domain(width: usize, height: usize, margin_px: f64) -> Vec<bool> {
    let base = circle_coverage(width, height);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let r = height as f64 / 2.0 - margin_px;
    let r2 = r * r;
    let mut out = base.bits;
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy > r2 {
                out[y * width + x] = false;
            }
        }
    }
    out
}

/// Draw a line with an arrowhead; used for the Fig-7-style overlays.
fn draw_arrow(frame: &mut Frame, from: Vector2<f64>, to: Vector2<f64>, color: [u8; 3]) {
    let delta = to - from;
    let len = delta.norm();
    if len < 0.5 {
        return;
    }
    let steps = (len.ceil() as usize).max(1);
    for k in 0..=steps {
        let p = from + delta * (k as f64 / steps as f64);
        put_px(frame, p.x.round() as i64, p.y.round() as i64, color);
    }
    // Arrowhead: two short back-swept strokes.
    let dir = delta / len;
    let ortho = Vector2::new(-dir.y, dir.x);
    let head = 3.0_f64.min(len * 0.4);
    for side in [-1.0, 1.0] {
        let base = to - dir * head + ortho * (head * 0.6 * side);
        let steps = head.ceil() as usize;
        for k in 0..=steps {
            let p = to + (base - to) * (k as f64 / steps as f64);
            put_px(frame, p.x.round() as i64, p.y.round() as i64, color);
        }
    }
}

fn put_px(frame: &mut Frame, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < frame.width && (y as usize) < frame.height {
        frame.set(x as usize, y as usize, color);
    }
}

const YELLOW: [u8; 3] = [255, 220, 0];
const RED: [u8; 3] = [255, 40, 40];

/// Overlay yellow flow arrows (adjacent-frame dot motion) and red pose
/// arrows (white-marker motion against the reference frame).
pub fn render_overlay(
    out: &FrameOutput,
    reference_white: Option<[Vector2<f64>; 4]>,
    flow_scale: f64,
    pose_scale: f64,
) -> Frame {
    let mut img = out.processed.clone();
    if let Some(field) = &out.flow {
        for i in 0..field.origins.len() {
            if field.status[i] == TrackStatus::Tracked {
                let from = field.origins[i];
                let to = from + field.displacements[i] * flow_scale;
                draw_arrow(&mut img, from, to, YELLOW);
            }
        }
    }
    if let (Some(reference), Some(current)) = (reference_white, &out.white_centroids) {
        for (r, c) in reference.iter().zip(current.iter()) {
            let to = r + (c - r) * pose_scale;
            draw_arrow(&mut img, *r, to, RED);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{render_sequence, ContactScenario, HardnessClass, IndenterShape, SensorBuild, SensorModel};
    use crate::wrench::Wrench;
    use nalgebra::Vector3;

    fn model() -> SensorModel {
        SensorModel::assemble(SensorBuild::default()).unwrap()
    }

    fn scenario(frames: usize, fz: f64, depth: f64) -> ContactScenario {
        ContactScenario::ramp(
            frames,
            Wrench::new(Vector3::new(0.0, 0.0, fz), Vector3::zeros()),
            depth,
            IndenterShape::Sphere { radius_mm: 5.0 },
            Vector3::new(0.0, 0.0, -1.0),
            HardnessClass::Hard,
            0.05,
        )
    }

    #[test]
    fn reference_frame_against_itself_is_identity() {
        let m = model();
        let sc = scenario(2, 0.0, 0.0);
        let (frames, _) = render_sequence(&m, &sc).unwrap();
        let parts = ProcessorParts::matching_model(&m, &PipelineConfig::standard());
        let mut proc = FrameProcessor::new(parts);

        let r0 = proc.process(&frames[0], &ProcessOptions::default()).unwrap();
        assert!(r0.pose.is_some());
        assert!(r0.black_count > 50, "black markers on reference: {}", r0.black_count);
        let d0 = r0.delta.unwrap();
        assert!(d0.translation.norm() < 1e-9 && d0.rotation.norm() < 1e-9);

        // Identical second frame: zero flow, identity delta, zero wrench.
        let r1 = proc.process(&frames[1], &ProcessOptions::default()).unwrap();
        let flow = r1.flow.as_ref().unwrap();
        assert_eq!(flow.tracked_count(), flow.origins.len());
        for d in &flow.displacements {
            assert!(d.norm() < 0.05, "flow on identical frame {d:?}");
        }
        let d1 = r1.delta.unwrap();
        assert!(d1.translation.norm() < 1e-3);
        let w1 = r1.wrench.unwrap();
        assert!(w1.force.norm() < 0.02, "wrench {:?}", w1.force);
    }

    #[test]
    fn detects_all_rendered_dots() {
        let m = model();
        let sc = scenario(2, 0.0, 0.0);
        let (frames, truth) = render_sequence(&m, &sc).unwrap();
        let parts = ProcessorParts::matching_model(&m, &PipelineConfig::standard());
        let mut proc = FrameProcessor::new(parts);
        let r0 = proc.process(&frames[0], &ProcessOptions::default()).unwrap();

        // Exactly the rendered dot count, each centroid within 0.3 px of
        // the rendered center (ideal-frame positions).
        assert_eq!(r0.black_count, m.pattern.dots.len());
        let expected = &truth.frames[0].dot_pixels;
        for (_, position) in proc.live_track_positions() {
            let best = expected
                .iter()
                .map(|e| (e - position).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 0.3, "centroid {position:?} off by {best}");
        }
    }

    #[test]
    fn white_markers_match_truth_after_undistortion() {
        let m = model();
        let sc = scenario(2, 0.0, 0.0);
        let (frames, truth) = render_sequence(&m, &sc).unwrap();
        let parts = ProcessorParts::matching_model(&m, &PipelineConfig::standard());
        let mut proc = FrameProcessor::new(parts);
        let r0 = proc.process(&frames[0], &ProcessOptions::default()).unwrap();
        let obs = r0.white_centroids.unwrap();
        // Truth is stored in model order == angular order.
        for (o, t) in obs.iter().zip(&truth.frames[0].white_pixels) {
            assert!((o - t).norm() <= 0.3, "white centroid {o:?} vs truth {t:?}");
        }
    }

    #[test]
    fn undistortion_aligns_with_zero_distortion_render() {
        // Simulator oracle for undistort_frame: white centroids from the
        // distorted-then-undistorted frame match a zero-distortion render.
        let sc = scenario(2, 0.0, 0.0);
        let m_dist = model();
        let m_ideal = SensorModel::assemble(SensorBuild {
            distortion: crate::camera::DistortionCoefficients::default(),
            ..SensorBuild::default()
        })
        .unwrap();
        let (frames_dist, _) = render_sequence(&m_dist, &sc).unwrap();
        let (frames_ideal, _) = render_sequence(&m_ideal, &sc).unwrap();

        let cfg = PipelineConfig::standard();
        let mut proc_d = FrameProcessor::new(ProcessorParts::matching_model(&m_dist, &cfg));
        let mut proc_i = FrameProcessor::new(ProcessorParts::matching_model(&m_ideal, &cfg));
        let rd = proc_d.process(&frames_dist[0], &ProcessOptions::default()).unwrap();
        let ri = proc_i.process(&frames_ideal[0], &ProcessOptions::default()).unwrap();
        let (wd, wi) = (rd.white_centroids.unwrap(), ri.white_centroids.unwrap());
        for (a, b) in wd.iter().zip(wi.iter()) {
            assert!((a - b).norm() <= 0.3, "undistorted {a:?} vs ideal render {b:?}");
        }
    }

    #[test]
    fn overlay_draws_without_panic_and_deterministic() {
        let m = model();
        let sc = scenario(3, 4.0, 0.8);
        let (frames, _) = render_sequence(&m, &sc).unwrap();
        let cfg = PipelineConfig::standard();
        let mut proc = FrameProcessor::new(ProcessorParts::matching_model(&m, &cfg));
        proc.process(&frames[0], &ProcessOptions::default()).unwrap();
        proc.process(&frames[1], &ProcessOptions::default()).unwrap();
        let out = proc.process(&frames[2], &ProcessOptions::default()).unwrap();
        let overlay1 = render_overlay(&out, proc.reference_white(), 6.0, 3.0);
        let overlay2 = render_overlay(&out, proc.reference_white(), 6.0, 3.0);
        assert_eq!(overlay1.pixels, overlay2.pixels);
        // Yellow pixels must appear where dots moved.
        let yellow = overlay1.pixels.chunks_exact(3).filter(|p| p == &[255u8, 220, 0]).count();
        assert!(yellow > 0, "no flow arrows drawn");
    }
}
