//! Pinhole camera with Brown–Conrady distortion, frame undistortion, and
//! dome dot-pattern generation.
//!
//! The dot pattern is built by casting ideal (undistorted) pixel-grid rays
//! onto the dome sphere, so the printed dots appear as a uniform grid in the
//! corrected camera frame. Pattern pixel positions therefore live in the
//! undistorted frame; re-projecting a dot with zero distortion lands back on
//! its grid node exactly.

use crate::imageproc::Frame;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("remap grid is {map_width}x{map_height} but frame is {frame_width}x{frame_height}")]
    DimensionMismatch { map_width: usize, map_height: usize, frame_width: usize, frame_height: usize },
}

/// Pinhole intrinsic matrix plus image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidParams(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CameraError::InvalidParams(format!("principal point ({}, {}) outside the {}x{} frame", self.cx, self.cy, self.width, self.height)));
        }
        Ok(())
    }
}

impl Default for CameraIntrinsics {
    /// Synthetic default: a 480x480 frame watching the 20 mm dome from
    /// 12 mm away through a wide-angle lens.
    fn default() -> Self {
        Self { fx: 160.0, fy: 160.0, cx: 240.0, cy: 240.0, width: 480, height: 480 }
    }
}

/// Brown–Conrady coefficients: radial k1, k2, k3 and tangential p1, p2.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionCoefficients {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl DistortionCoefficients {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0 && self.k3 == 0.0
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        for (name, v) in [("k1", self.k1), ("k2", self.k2), ("p1", self.p1), ("p2", self.p2), ("k3", self.k3)] {
            if !v.is_finite() {
                return Err(CameraError::InvalidParams(format!("distortion coefficient {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Forward distortion of normalized coordinates.
    #[inline]
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r4 + self.k3 * r6;
        let xy = x * y;
        let xd = x * radial + 2.0 * self.p1 * xy + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * xy;
        (xd, yd)
    }

    /// Inverse distortion by Newton iteration on the forward model.
    pub fn undistort_normalized(&self, xd: f64, yd: f64) -> (f64, f64) {
        let mut x = xd;
        let mut y = yd;
        for _ in 0..50 {
            let r2 = x * x + y * y;
            let r4 = r2 * r2;
            let radial = 1.0 + self.k1 * r2 + self.k2 * r4 + self.k3 * r4 * r2;
            let d_radial = self.k1 + 2.0 * self.k2 * r2 + 3.0 * self.k3 * r4;
            let (fx_val, fy_val) = self.distort(x, y);
            let rx = fx_val - xd;
            let ry = fy_val - yd;
            if rx.abs() < 1e-14 && ry.abs() < 1e-14 {
                break;
            }
            let j00 = radial + 2.0 * x * x * d_radial + 2.0 * self.p1 * y + 6.0 * self.p2 * x;
            let j01 = 2.0 * x * y * d_radial + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
            let j10 = 2.0 * x * y * d_radial + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
            let j11 = radial + 2.0 * y * y * d_radial + 6.0 * self.p1 * y + 2.0 * self.p2 * x;
            let det = j00 * j11 - j01 * j10;
            if det.abs() < 1e-18 {
                break;
            }
            x -= (j11 * rx - j01 * ry) / det;
            y -= (-j10 * rx + j00 * ry) / det;
        }
        (x, y)
    }
}

/// The sensing dome: a sphere cap seen from inside the sensor body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomeGeometry {
    /// Sphere radius in mm.
    pub radius_mm: f64,
    /// Sphere center in camera coordinates, mm.
    pub center_mm: [f64; 3],
    /// Lens field of view in degrees; used for validation only.
    pub fov_deg: f64,
}

impl Default for DomeGeometry {
    fn default() -> Self {
        Self { radius_mm: 10.0, center_mm: [0.0, 0.0, 12.0], fov_deg: 160.0 }
    }
}

impl DomeGeometry {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.center_mm[0], self.center_mm[1], self.center_mm[2])
    }

    /// Apex: the sphere point nearest the camera along the center direction.
    pub fn apex(&self) -> Vector3<f64> {
        let c = self.center();
        c - c.normalize() * self.radius_mm
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.radius_mm > 0.0) {
            return Err(CameraError::InvalidParams("dome radius must be positive".into()));
        }
        if self.apex().z <= 0.0 {
            return Err(CameraError::InvalidParams("dome apex must lie in front of the camera".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(CameraError::InvalidParams("fov must be in (0, 180) degrees".into()));
        }
        Ok(())
    }

    /// Near intersection of a camera ray with the sphere, if any.
    pub fn intersect_ray(&self, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
        let d = dir.normalize();
        let c = self.center();
        let proj = d.dot(&c);
        let disc = proj * proj - (c.norm_squared() - self.radius_mm * self.radius_mm);
        if disc < 0.0 {
            return None;
        }
        let t = proj - disc.sqrt();
        if t <= 0.0 {
            return None;
        }
        Some(d * t)
    }

    /// Geodesic arc length between two on-sphere points.
    pub fn geodesic(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let c = self.center();
        let ua = (a - c) / self.radius_mm;
        let ub = (b - c) / self.radius_mm;
        self.radius_mm * ua.dot(&ub).clamp(-1.0, 1.0).acos()
    }
}

/// Project a camera-space point to pixel coordinates.
pub fn project(
    p: &Vector3<f64>,
    intr: &CameraIntrinsics,
    dist: &DistortionCoefficients,
) -> Result<Vector2<f64>, CameraError> {
    if p.z <= 0.0 {
        return Err(CameraError::NonPositiveDepth(p.z));
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    let (xd, yd) = dist.distort(x, y);
    Ok(Vector2::new(intr.fx * xd + intr.cx, intr.fy * yd + intr.cy))
}

/// Zero-distortion projection; the working frame after undistortion.
pub fn project_ideal(p: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<Vector2<f64>, CameraError> {
    if p.z <= 0.0 {
        return Err(CameraError::NonPositiveDepth(p.z));
    }
    Ok(Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
}

/// Unit ray through an ideal (undistorted) pixel.
pub fn ideal_ray(pixel: &Vector2<f64>, intr: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((pixel.x - intr.cx) / intr.fx, (pixel.y - intr.cy) / intr.fy, 1.0).normalize()
}

/// Destination-indexed remap grid: for every undistorted output pixel, the
/// distorted source position obtained from the forward distortion model.
/// Bilinear bases and weights are precomputed once; the map is immutable
/// and shareable across threads.
#[derive(Debug, Clone)]
pub struct UndistortMap {
    pub width: usize,
    pub height: usize,
    src: Vec<[f32; 2]>,
    /// Per destination pixel: source base index (top-left tap) or usize::MAX
    /// when out of bounds.
    base: Vec<usize>,
    /// Bilinear weights (w00, w10, w01, w11) per destination pixel.
    weights: Vec<[f32; 4]>,
}

impl UndistortMap {
    /// Source position for a destination pixel; may be out of bounds.
    #[inline]
    pub fn source(&self, x: usize, y: usize) -> [f32; 2] {
        self.src[y * self.width + x]
    }

    /// True when the destination pixel samples outside the source frame.
    pub fn is_out_of_bounds(&self, x: usize, y: usize) -> bool {
        self.base[y * self.width + x] == usize::MAX
    }
}

/// Build the undistortion remap grid for the given camera.
pub fn undistort_map(intr: &CameraIntrinsics, dist: &DistortionCoefficients) -> UndistortMap {
    let (w, h) = (intr.width, intr.height);
    let mut src = Vec::with_capacity(w * h);
    let mut base = Vec::with_capacity(w * h);
    let mut weights = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let xn = (x as f64 - intr.cx) / intr.fx;
            let yn = (y as f64 - intr.cy) / intr.fy;
            let (xd, yd) = dist.distort(xn, yn);
            let sx = (intr.fx * xd + intr.cx) as f32;
            let sy = (intr.fy * yd + intr.cy) as f32;
            src.push([sx, sy]);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                base.push(usize::MAX);
                weights.push([0.0; 4]);
            } else {
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let ax = sx - x0 as f32;
                let ay = sy - y0 as f32;
                // Encode the four taps via base + neighbor strides; the
                // clamped edge collapses x1/y1 onto x0/y0.
                base.push((y0 * w + x0) * 3);
                let dx = (x1 - x0) * 3;
                let dy = (y1 - y0) * w * 3;
                // Pack tap offsets into the weights' positions implicitly:
                // (0, dx, dy, dx + dy) is reconstructed in the resampler via
                // the stored strides, so store them alongside.
                weights.push([(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay]);
                // dx/dy are recomputed cheaply in the resampler from the
                // stored source position; no extra storage needed.
                let _ = (dx, dy);
            }
        }
    }
    UndistortMap { width: w, height: h, src, base, weights }
}

/// Resample a frame through the remap grid with bilinear interpolation.
/// Out-of-bounds sources produce black pixels.
pub fn undistort_frame(frame: &Frame, map: &UndistortMap) -> Result<Frame, CameraError> {
    if frame.width != map.width || frame.height != map.height {
        return Err(CameraError::DimensionMismatch {
            map_width: map.width,
            map_height: map.height,
            frame_width: frame.width,
            frame_height: frame.height,
        });
    }
    let w = frame.width;
    let mut out = Frame::new(w, frame.height);
    out.index = frame.index;
    {
        use rayon::prelude::*;
        out.pixels.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let i = y * w + x;
                let b = map.base[i];
                if b == usize::MAX {
                    continue; // stays black
                }
                let [sx, sy] = map.src[i];
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let dx = if x0 + 1 < w { 3 } else { 0 };
                let dyo = if y0 + 1 < frame.height { w * 3 } else { 0 };
                let [w00, w10, w01, w11] = map.weights[i];
                for c in 0..3 {
                    let v = w00 * frame.pixels[b + c] as f32
                        + w10 * frame.pixels[b + dx + c] as f32
                        + w01 * frame.pixels[b + dyo + c] as f32
                        + w11 * frame.pixels[b + dyo + dx + c] as f32;
                    row[x * 3 + c] = (v + 0.5).clamp(0.0, 255.0) as u8;
                }
            }
        });
    }
    Ok(out)
}

/// One printed dot: its grid node, 3D position on the dome, and pixel
/// position in the undistorted frame.
#[derive(Debug, Clone, Copy)]
pub struct PatternDot {
    pub grid: (i32, i32),
    pub point_mm: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

/// Geodesic arc length between two grid-adjacent dots.
#[derive(Debug, Clone, Copy)]
pub struct NeighborArc {
    pub a: usize,
    pub b: usize,
    pub arc_mm: f64,
}

/// The dome dot pattern with grid-neighbor geodesic arc lengths.
#[derive(Debug, Clone)]
pub struct DotPattern {
    pub dots: Vec<PatternDot>,
    pub neighbor_arcs: Vec<NeighborArc>,
}

/// Extra constraints applied when generating a pattern for the assembled
/// sensor: keep dots inside a radius and away from the white-marker
/// sight lines so the two marker families never overlap in the image.
#[derive(Debug, Clone, Default)]
pub struct PatternOptions {
    /// Maximum pixel distance of a grid node from the principal point.
    pub max_radius_px: Option<f64>,
    /// Circular keep-out zones (center px, radius px) in the ideal frame.
    pub exclusions: Vec<(Vector2<f64>, f64)>,
}

/// Generate the dome dot pattern over the full projected silhouette.
pub fn generate_dome_pattern(
    intr: &CameraIntrinsics,
    dome: &DomeGeometry,
    grid_step_px: f64,
) -> Result<DotPattern, CameraError> {
    generate_dome_pattern_with(intr, dome, grid_step_px, &PatternOptions::default())
}

/// Generate the dome dot pattern with placement constraints.
pub fn generate_dome_pattern_with(
    intr: &CameraIntrinsics,
    dome: &DomeGeometry,
    grid_step_px: f64,
    opts: &PatternOptions,
) -> Result<DotPattern, CameraError> {
    if grid_step_px < 2.0 {
        return Err(CameraError::InvalidParams(format!("grid step {grid_step_px} px is below the 2 px minimum")));
    }
    intr.validate()?;
    dome.validate()?;

    // Grid nodes anchored at the principal point.
    let max_i = (intr.width as f64 / grid_step_px).ceil() as i32 + 1;
    let max_j = (intr.height as f64 / grid_step_px).ceil() as i32 + 1;

    let mut dots = Vec::new();
    let mut index_of = std::collections::HashMap::new();
    for j in -max_j..=max_j {
        for i in -max_i..=max_i {
            let u = intr.cx + i as f64 * grid_step_px;
            let v = intr.cy + j as f64 * grid_step_px;
            if u < 0.0 || v < 0.0 || u > (intr.width - 1) as f64 || v > (intr.height - 1) as f64 {
                continue;
            }
            let du = u - intr.cx;
            let dv = v - intr.cy;
            if let Some(rmax) = opts.max_radius_px {
                if (du * du + dv * dv).sqrt() > rmax {
                    continue;
                }
            }
            if opts.exclusions.iter().any(|(c, r)| (Vector2::new(u, v) - c).norm() <= *r) {
                continue;
            }
            let pixel = Vector2::new(u, v);
            let Some(point) = dome.intersect_ray(&ideal_ray(&pixel, intr)) else {
                continue; // ray misses the sphere: node skipped
            };
            index_of.insert((i, j), dots.len());
            dots.push(PatternDot { grid: (i, j), point_mm: point, pixel });
        }
    }

    let mut neighbor_arcs = Vec::new();
    for (idx, dot) in dots.iter().enumerate() {
        let (i, j) = dot.grid;
        for (ni, nj) in [(i + 1, j), (i, j + 1)] {
            if let Some(&nidx) = index_of.get(&(ni, nj)) {
                let arc = dome.geodesic(&dot.point_mm, &dots[nidx].point_mm);
                neighbor_arcs.push(NeighborArc { a: idx, b: nidx, arc_mm: arc });
            }
        }
    }

    Ok(DotPattern { dots, neighbor_arcs })
}

impl DotPattern {
    /// CSV with columns `i, j, X_mm, Y_mm, Z_mm, u_px, v_px`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,X_mm,Y_mm,Z_mm,u_px,v_px\n");
        for d in &self.dots {
            out.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9},{:.6},{:.6}\n",
                d.grid.0, d.grid.1, d.point_mm.x, d.point_mm.y, d.point_mm.z, d.pixel.x, d.pixel.y
            ));
        }
        out
    }

    /// SVG dot chart for pad-printing reference, one circle per dot at its
    /// pixel position.
    pub fn to_svg(&self, width: usize, height: usize, dot_radius_px: f64) -> String {
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
             <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
        );
        for d in &self.dots {
            out.push_str(&format!(
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"{:.3}\" fill=\"black\"/>\n",
                d.pixel.x, d.pixel.y, dot_radius_px
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::{extract_markers, to_gray, GrayFrame, MarkerConfig, MarkerKind};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn default_cam() -> (CameraIntrinsics, DistortionCoefficients) {
        (CameraIntrinsics::default(), DistortionCoefficients::default())
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let (intr, dist) = default_cam();
        let px = project(&Vector3::new(0.0, 0.0, 5.0), &intr, &dist).unwrap();
        assert_relative_eq!(px.x, intr.cx, epsilon = 1e-12);
        assert_relative_eq!(px.y, intr.cy, epsilon = 1e-12);
    }

    #[test]
    fn project_simple_offset() {
        let intr = CameraIntrinsics { fx: 300.0, fy: 300.0, cx: 320.0, cy: 320.0, width: 640, height: 640 };
        let px = project(&Vector3::new(1.0, 0.0, 10.0), &intr, &DistortionCoefficients::default()).unwrap();
        assert_relative_eq!(px.x, 350.0, epsilon = 1e-12);
        assert_relative_eq!(px.y, 320.0, epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_non_positive_depth() {
        let (intr, dist) = default_cam();
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, 0.0), &intr, &dist),
            Err(CameraError::NonPositiveDepth(_))
        ));
        assert!(project(&Vector3::new(1.0, 1.0, -3.0), &intr, &dist).is_err());
    }

    #[test]
    fn distortion_polynomial_matches_brute_force() {
        // Independent brute-force evaluation of the distortion polynomial,
        // written against the formula rather than the implementation.
        let dist = DistortionCoefficients { k1: -0.3, k2: 0.06, p1: 0.001, p2: -0.002, k3: 0.01 };
        let intr = CameraIntrinsics::default();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(4.0..20.0));
            let px = project(&p, &intr, &dist).unwrap();

            let x = p.x / p.z;
            let y = p.y / p.z;
            let r2 = x * x + y * y;
            let radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2 + dist.k3 * r2 * r2 * r2;
            let xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x);
            let yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y;
            assert_relative_eq!(px.x, intr.fx * xd + intr.cx, epsilon = 1e-12);
            assert_relative_eq!(px.y, intr.fy * yd + intr.cy, epsilon = 1e-12);
        }
    }

    #[test]
    fn undistort_map_identity_for_zero_distortion() {
        let (intr, dist) = default_cam();
        let map = undistort_map(&intr, &dist);
        for y in (0..intr.height).step_by(37) {
            for x in (0..intr.width).step_by(41) {
                let [sx, sy] = map.source(x, y);
                assert_eq!(sx, x as f32);
                assert_eq!(sy, y as f32);
            }
        }
    }

    #[test]
    fn undistort_round_trip_points() {
        // Composition oracle: for random interior points, the bilinear lookup
        // of the map at the ideal projection reproduces the distorted
        // projection within 0.1 px.
        let intr = CameraIntrinsics::default();
        let dist = DistortionCoefficients { k1: -0.2, k2: 0.03, p1: 0.0005, p2: -0.0008, k3: 0.002 };
        let map = undistort_map(&intr, &dist);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let p = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(8.0..16.0));
            let ideal = project_ideal(&p, &intr).unwrap();
            if ideal.x < 2.0 || ideal.y < 2.0 || ideal.x > 477.0 || ideal.y > 477.0 {
                continue;
            }
            let distorted = project(&p, &intr, &dist).unwrap();

            let x0 = ideal.x.floor() as usize;
            let y0 = ideal.y.floor() as usize;
            let ax = ideal.x - x0 as f64;
            let ay = ideal.y - y0 as f64;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for (dx, dy, w) in [
                (0, 0, (1.0 - ax) * (1.0 - ay)),
                (1, 0, ax * (1.0 - ay)),
                (0, 1, (1.0 - ax) * ay),
                (1, 1, ax * ay),
            ] {
                let [mx, my] = map.source(x0 + dx, y0 + dy);
                sx += w * mx as f64;
                sy += w * my as f64;
            }
            assert!((sx - distorted.x).abs() <= 0.1, "x err {}", (sx - distorted.x).abs());
            assert!((sy - distorted.y).abs() <= 0.1, "y err {}", (sy - distorted.y).abs());
            checked += 1;
        }
    }

    #[test]
    fn undistorted_line_is_straight() {
        // Line-straightness oracle: a straight 3D line rendered under
        // distortion becomes collinear after remapping.
        let intr = CameraIntrinsics::default();
        let dist = DistortionCoefficients { k1: -0.25, k2: 0.04, ..Default::default() };
        let map = undistort_map(&intr, &dist);

        let mut frame = Frame::filled(480, 480, [15, 15, 15]);
        let a = Vector3::new(-4.5, -2.0, 12.0);
        let b = Vector3::new(4.5, 3.0, 12.0);
        let mut splats = Vec::new();
        for k in 0..12 {
            let t = k as f64 / 11.0;
            let p = a + (b - a) * t;
            let px = project(&p, &intr, &dist).unwrap();
            splats.push(px);
        }
        // Splat small bright discs at the distorted positions.
        let mut gray_src = GrayFrame::filled(480, 480, 15);
        for s in &splats {
            crate::imageproc::draw_disc(&mut gray_src, s.x, s.y, 3.0, 255, true);
        }
        for y in 0..480 {
            for x in 0..480 {
                let v = gray_src.get(x, y);
                frame.set(x, y, [v, v, v]);
            }
        }

        let und = undistort_frame(&frame, &map).unwrap();
        let centroids = extract_markers(&to_gray(&und), MarkerKind::White, &MarkerConfig::default())
            .unwrap()
            .centroids;
        assert_eq!(centroids.len(), 12);

        // Total-least-squares line fit, then RMS point-to-line distance.
        let n = centroids.len() as f64;
        let mean = centroids.iter().fold(Vector2::zeros(), |s, c| s + c) / n;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for c in &centroids {
            let d = c - mean;
            sxx += d.x * d.x;
            sxy += d.x * d.y;
            syy += d.y * d.y;
        }
        let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let dir = Vector2::new(theta.cos(), theta.sin());
        let mut se = 0.0;
        for c in &centroids {
            let d = c - mean;
            let perp = d - dir * d.dot(&dir);
            se += perp.norm_squared();
        }
        let rms = (se / n).sqrt();
        assert!(rms <= 0.5, "line straightness RMS {rms}");
    }

    #[test]
    fn undistort_frame_constant_and_identity() {
        let (intr, dist) = default_cam();
        let map = undistort_map(&intr, &dist);
        let f = Frame::filled(480, 480, [88, 99, 111]);
        let u = undistort_frame(&f, &map).unwrap();
        assert_eq!(u.pixels, f.pixels);

        let mut textured = Frame::new(480, 480);
        for (i, p) in textured.pixels.iter_mut().enumerate() {
            *p = ((i * 31) % 256) as u8;
        }
        let u2 = undistort_frame(&textured, &map).unwrap();
        assert_eq!(u2.pixels, textured.pixels, "identity map must be bit-identical");
    }

    #[test]
    fn undistort_frame_dimension_mismatch() {
        let (intr, dist) = default_cam();
        let map = undistort_map(&intr, &dist);
        let f = Frame::new(100, 100);
        assert!(matches!(undistort_frame(&f, &map), Err(CameraError::DimensionMismatch { .. })));
    }

    #[test]
    fn pattern_center_node_is_apex() {
        let intr = CameraIntrinsics::default();
        let dome = DomeGeometry::default();
        let pat = generate_dome_pattern(&intr, &dome, 24.0).unwrap();
        let center = pat.dots.iter().find(|d| d.grid == (0, 0)).expect("center node present");
        let apex = dome.apex();
        assert_relative_eq!(center.point_mm.x, apex.x, epsilon = 1e-9);
        assert_relative_eq!(center.point_mm.y, apex.y, epsilon = 1e-9);
        assert_relative_eq!(center.point_mm.z, apex.z, epsilon = 1e-9);
    }

    #[test]
    fn pattern_dots_on_sphere_and_reproject_to_grid() {
        let intr = CameraIntrinsics::default();
        let dome = DomeGeometry::default();
        let dist = DistortionCoefficients::default();
        let pat = generate_dome_pattern(&intr, &dome, 24.0).unwrap();
        assert!(pat.dots.len() > 100, "expected a populated pattern, got {}", pat.dots.len());
        let c = dome.center();
        for d in &pat.dots {
            assert!(((d.point_mm - c).norm() - dome.radius_mm).abs() <= 1e-9, "sphere membership");
            let px = project(&d.point_mm, &intr, &dist).unwrap();
            assert!((px - d.pixel).norm() <= 1e-9, "reprojection {px:?} vs node {:?}", d.pixel);
        }
    }

    #[test]
    fn pattern_arcs_match_marching_oracle() {
        // Dense marching oracle: walk the great circle between dot pairs in
        // 1e4 chord steps and compare accumulated length.
        let intr = CameraIntrinsics::default();
        let dome = DomeGeometry::default();
        let pat = generate_dome_pattern(&intr, &dome, 48.0).unwrap();
        let c = dome.center();
        for arc in &pat.neighbor_arcs {
            let pa = pat.dots[arc.a].point_mm;
            let pb = pat.dots[arc.b].point_mm;
            let ua = (pa - c) / dome.radius_mm;
            let ub = (pb - c) / dome.radius_mm;
            let theta = ua.dot(&ub).clamp(-1.0, 1.0).acos();
            let steps = 10_000;
            let mut length = 0.0;
            let mut prev = pa;
            for k in 1..=steps {
                let t = k as f64 / steps as f64;
                // Spherical interpolation between the two unit vectors.
                let s = if theta.abs() < 1e-12 {
                    ua
                } else {
                    (ua * ((1.0 - t) * theta).sin() + ub * (t * theta).sin()) / theta.sin()
                };
                let p = c + s * dome.radius_mm;
                length += (p - prev).norm();
                prev = p;
            }
            assert!(
                (length - arc.arc_mm).abs() <= 1e-6,
                "arc {} vs marched {length}",
                arc.arc_mm
            );
        }
    }

    #[test]
    fn pattern_arcs_grow_away_from_apex() {
        // Perspective foreshortening: fixed pixel steps subtend longer arcs
        // farther from the apex on an axis-centered dome.
        let intr = CameraIntrinsics::default();
        let dome = DomeGeometry::default();
        let pat = generate_dome_pattern(&intr, &dome, 24.0).unwrap();
        let mut row: Vec<(i32, f64)> = Vec::new();
        let index_of: std::collections::HashMap<(i32, i32), usize> =
            pat.dots.iter().enumerate().map(|(k, d)| (d.grid, k)).collect();
        let mut i = 0;
        while let (Some(&a), Some(&b)) = (index_of.get(&(i, 0)), index_of.get(&(i + 1, 0))) {
            let arc = dome.geodesic(&pat.dots[a].point_mm, &pat.dots[b].point_mm);
            row.push((i, arc));
            i += 1;
        }
        assert!(row.len() >= 4);
        for w in row.windows(2) {
            assert!(w[1].1 > w[0].1, "arcs must increase away from apex: {row:?}");
        }
    }

    #[test]
    fn pattern_rejects_small_grid_step() {
        let intr = CameraIntrinsics::default();
        let dome = DomeGeometry::default();
        assert!(generate_dome_pattern(&intr, &dome, 1.0).is_err());
    }

    #[test]
    fn pattern_exclusions_and_radius_limit() {
        let intr = CameraIntrinsics::default();
        let dome = DomeGeometry::default();
        let opts = PatternOptions {
            max_radius_px: Some(120.0),
            exclusions: vec![(Vector2::new(240.0, 240.0), 30.0)],
        };
        let pat = generate_dome_pattern_with(&intr, &dome, 24.0, &opts).unwrap();
        for d in &pat.dots {
            let r = (d.pixel - Vector2::new(240.0, 240.0)).norm();
            assert!(r <= 120.0 + 1e-9);
            assert!(r > 30.0);
        }
    }

    #[test]
    fn inverse_distortion_round_trip() {
        let dist = DistortionCoefficients { k1: -0.2, k2: 0.03, p1: 0.001, p2: -0.001, k3: 0.004 };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = rng.random_range(-1.2..1.2);
            let y = rng.random_range(-1.2..1.2);
            let (xd, yd) = dist.distort(x, y);
            let (xu, yu) = dist.undistort_normalized(xd, yd);
            assert!((xu - x).abs() < 1e-10 && (yu - y).abs() < 1e-10);
        }
    }
}
