//! dometac-core — perception stack for a dome-shaped camera-based
//! multi-modal tactile sensor.
//!
//! The sensor observes two mechanical subsystems through one camera: a
//! marker-printed elastomer dome (local force distribution and contact
//! geometry) and a spring-suspended platform carrying four white markers
//! (net force/torque). The pipeline stages are:
//!
//! 1. **camera** — pinhole + Brown–Conrady distortion model, frame
//!    undistortion, and generation of the dome dot pattern that appears
//!    uniform in the camera frame.
//! 2. **imageproc** — blur / circular mask / sharpen / grayscale chain and
//!    dual-threshold marker segmentation with subpixel centroids.
//! 3. **flow** — sparse pyramidal Lucas–Kanade tracking of the black dots.
//! 4. **pose** — planar PnP on the four white markers (homography init +
//!    Levenberg–Marquardt refinement).
//! 5. **wrench** — linear stiffness map between platform pose deflection
//!    and the applied 6-axis wrench, plus least-squares calibration.
//! 6. **shape** — Lambertian three-light normal recovery and Poisson
//!    integration to a contact height map.
//! 7. **sim** — synthetic sensor renderer producing frames with exact
//!    ground truth for every stage.
//! 8. **pipeline** — per-frame orchestration of stages 1–6 with overlays.
//! 9. **hardness** — soft/hard contact classification from sequence
//!    features with a logistic model trained by gradient descent.

pub mod camera;
pub mod config;
pub mod flow;
pub mod hardness;
pub mod imageproc;
pub mod pipeline;
pub mod pose;
pub mod shape;
pub mod sim;
pub mod wrench;
