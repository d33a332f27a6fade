//! Sparse pyramidal Lucas–Kanade tracking of black-marker centroids.
//!
//! Tracking is frame-to-frame: centroids detected on the reference frame are
//! carried forward through each adjacent pair, and points whose structure
//! tensor degenerates or that leave the image are marked lost.

use crate::imageproc::{gaussian_blur_gray, GrayFrame};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("image {width}x{height} too small for {levels} pyramid levels (needs {min} px per side)")]
    ImageTooSmall { width: usize, height: usize, levels: usize, min: usize },
    #[error("frame sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tracked,
    Lost,
}

/// Tracked origins and their inter-frame displacement vectors.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub origins: Vec<Vector2<f64>>,
    pub displacements: Vec<Vector2<f64>>,
    pub status: Vec<TrackStatus>,
}

impl FlowField {
    pub fn tracked_count(&self) -> usize {
        self.status.iter().filter(|&&s| s == TrackStatus::Tracked).count()
    }

    /// Mean displacement magnitude over tracked points; lost points are
    /// excluded from aggregates.
    pub fn mean_displacement(&self) -> f64 {
        let mut n = 0usize;
        let mut sum = 0.0;
        for (d, s) in self.displacements.iter().zip(&self.status) {
            if *s == TrackStatus::Tracked {
                sum += d.norm();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x0,y0,dx,dy,status\n");
        for i in 0..self.origins.len() {
            let s = match self.status[i] {
                TrackStatus::Tracked => "tracked",
                TrackStatus::Lost => "lost",
            };
            out.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{}\n",
                self.origins[i].x, self.origins[i].y, self.displacements[i].x, self.displacements[i].y, s
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LkConfig {
    /// Square integration window side, odd.
    pub window: usize,
    /// Pyramid levels including the base.
    pub levels: usize,
    pub max_iters: usize,
    /// Convergence threshold on the per-iteration update, px.
    pub eps: f64,
    /// Minimum normalized eigenvalue of the structure tensor.
    pub min_eig: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self { window: 21, levels: 3, max_iters: 30, eps: 0.01, min_eig: 1e-4 }
    }
}

impl LkConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(FlowError::InvalidConfig(format!("window {} must be odd and >= 3", self.window)));
        }
        if self.levels == 0 {
            return Err(FlowError::InvalidConfig("levels must be >= 1".into()));
        }
        if !(self.eps > 0.0) || self.max_iters == 0 {
            return Err(FlowError::InvalidConfig("eps must be positive and max_iters >= 1".into()));
        }
        Ok(())
    }
}

/// Blur-then-decimate image pyramid; level 0 is the input.
pub fn build_pyramid(g: &GrayFrame, levels: usize) -> Result<Vec<GrayFrame>, FlowError> {
    let min = (1usize << (levels.saturating_sub(1))) * 8;
    if g.width < min || g.height < min {
        return Err(FlowError::ImageTooSmall { width: g.width, height: g.height, levels, min });
    }
    let mut pyr = Vec::with_capacity(levels);
    pyr.push(g.clone());
    for l in 1..levels {
        let prev = gaussian_blur_gray(&pyr[l - 1], 1.0);
        let w = prev.width.div_ceil(2);
        let h = prev.height.div_ceil(2);
        let mut down = GrayFrame::new(w, h);
        for y in 0..h {
            for x in 0..w {
                down.set(x, y, prev.get((x * 2).min(prev.width - 1), (y * 2).min(prev.height - 1)));
            }
        }
        pyr.push(down);
    }
    Ok(pyr)
}

struct LevelImage {
    width: usize,
    height: usize,
    v: Vec<f32>,
    gx: Vec<f32>,
    gy: Vec<f32>,
}

impl LevelImage {
    fn from_gray(g: &GrayFrame) -> Self {
        let w = g.width;
        let h = g.height;
        let v: Vec<f32> = g.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let mut gx = vec![0.0f32; w * h];
        let mut gy = vec![0.0f32; w * h];
        for y in 0..h {
            let row = y * w;
            let ym = row - if y > 0 { w } else { 0 };
            let yp = row + if y + 1 < h { w } else { 0 };
            gx[row] = (v[row + 1.min(w - 1)] - v[row]) * 0.5;
            for x in 1..w - 1 {
                gx[row + x] = (v[row + x + 1] - v[row + x - 1]) * 0.5;
            }
            gx[row + w - 1] = (v[row + w - 1] - v[row + w - 2]) * 0.5;
            for x in 0..w {
                gy[row + x] = (v[yp + x] - v[ym + x]) * 0.5;
            }
        }
        Self { width: w, height: h, v, gx, gy }
    }

    #[inline]
    fn sample(&self, data: &[f32], x: f32, y: f32) -> f32 {
        let xf = x.clamp(0.0, (self.width - 1) as f32);
        let yf = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = xf - x0 as f32;
        let ay = yf - y0 as f32;
        data[y0 * self.width + x0] * (1.0 - ax) * (1.0 - ay)
            + data[y0 * self.width + x1] * ax * (1.0 - ay)
            + data[y1 * self.width + x0] * (1.0 - ax) * ay
            + data[y1 * self.width + x1] * ax * ay
    }
}

/// Constant bilinear weights for a window around a fractional center; the
/// fractional part is shared by every tap.
struct WindowBase {
    x0: i64,
    y0: i64,
    w00: f32,
    w10: f32,
    w01: f32,
    w11: f32,
    interior: bool,
}

impl WindowBase {
    fn at(width: usize, height: usize, xc: f32, yc: f32, half: i64) -> Self {
        let xf = xc.floor();
        let yf = yc.floor();
        let ax = xc - xf;
        let ay = yc - yf;
        let x0 = xf as i64;
        let y0 = yf as i64;
        let interior = x0 - half >= 0
            && y0 - half >= 0
            && x0 + half + 1 < width as i64
            && y0 + half + 1 < height as i64;
        Self {
            x0,
            y0,
            w00: (1.0 - ax) * (1.0 - ay),
            w10: ax * (1.0 - ay),
            w01: (1.0 - ax) * ay,
            w11: ax * ay,
            interior,
        }
    }
}

fn track_point(
    prev: &[LevelImage],
    next: &[LevelImage],
    pt: Vector2<f64>,
    cfg: &LkConfig,
) -> (Vector2<f64>, TrackStatus) {
    let half = (cfg.window / 2) as i64;
    let npix = (cfg.window * cfg.window) as f32;
    let levels = prev.len();
    let mut dx = 0.0f32;
    let mut dy = 0.0f32;

    let mut patch = vec![0.0f32; cfg.window * cfg.window];
    let mut gxp = vec![0.0f32; patch.len()];
    let mut gyp = vec![0.0f32; patch.len()];

    for lvl in (0..levels).rev() {
        let scale = 1.0 / (1 << lvl) as f64;
        let xc = (pt.x * scale) as f32;
        let yc = (pt.y * scale) as f32;
        if lvl < levels - 1 {
            dx *= 2.0;
            dy *= 2.0;
        }
        let p = &prev[lvl];
        let n = &next[lvl];
        if xc < 0.0 || yc < 0.0 || xc > (p.width - 1) as f32 || yc > (p.height - 1) as f32 {
            return (Vector2::zeros(), TrackStatus::Lost);
        }

        // Gather the template patch and structure tensor once per level.
        let (mut a, mut b, mut c) = (0.0f32, 0.0f32, 0.0f32);
        let win = WindowBase::at(p.width, p.height, xc, yc, half);
        if win.interior {
            let w = p.width;
            let mut idx = 0;
            for wy in -half..=half {
                let r0 = (win.y0 + wy) as usize * w;
                let r1 = r0 + w;
                let base = (win.x0 - half) as usize;
                for k in 0..cfg.window {
                    let i = base + k;
                    let i0 = win.w00 * p.v[r0 + i] + win.w10 * p.v[r0 + i + 1] + win.w01 * p.v[r1 + i] + win.w11 * p.v[r1 + i + 1];
                    let ix = win.w00 * p.gx[r0 + i] + win.w10 * p.gx[r0 + i + 1] + win.w01 * p.gx[r1 + i] + win.w11 * p.gx[r1 + i + 1];
                    let iy = win.w00 * p.gy[r0 + i] + win.w10 * p.gy[r0 + i + 1] + win.w01 * p.gy[r1 + i] + win.w11 * p.gy[r1 + i + 1];
                    patch[idx] = i0;
                    gxp[idx] = ix;
                    gyp[idx] = iy;
                    a += ix * ix;
                    b += ix * iy;
                    c += iy * iy;
                    idx += 1;
                }
            }
        } else {
            let mut idx = 0;
            for wy in -half..=half {
                for wx in -half..=half {
                    let sx = xc + wx as f32;
                    let sy = yc + wy as f32;
                    let i0 = p.sample(&p.v, sx, sy);
                    let ix = p.sample(&p.gx, sx, sy);
                    let iy = p.sample(&p.gy, sx, sy);
                    patch[idx] = i0;
                    gxp[idx] = ix;
                    gyp[idx] = iy;
                    a += ix * ix;
                    b += ix * iy;
                    c += iy * iy;
                    idx += 1;
                }
            }
        }
        let det = a * c - b * b;
        let trace = a + c;
        let lambda_min = 0.5 * (trace - ((a - c) * (a - c) + 4.0 * b * b).sqrt());
        if det.abs() < 1e-12 || (lambda_min / npix) < cfg.min_eig as f32 {
            return (Vector2::zeros(), TrackStatus::Lost);
        }
        let inv_det = 1.0 / det;

        for _ in 0..cfg.max_iters {
            let xn = xc + dx;
            let yn = yc + dy;
            if xn < -(half as f32) || yn < -(half as f32)
                || xn > (n.width - 1) as f32 + half as f32
                || yn > (n.height - 1) as f32 + half as f32
            {
                return (Vector2::zeros(), TrackStatus::Lost);
            }
            let mut bx = 0.0f32;
            let mut by = 0.0f32;
            let nwin = WindowBase::at(n.width, n.height, xn, yn, half);
            if nwin.interior {
                let w = n.width;
                let mut idx = 0;
                for wy in -half..=half {
                    let r0 = (nwin.y0 + wy) as usize * w;
                    let r1 = r0 + w;
                    let base = (nwin.x0 - half) as usize;
                    for k in 0..cfg.window {
                        let i = base + k;
                        let i1 = nwin.w00 * n.v[r0 + i]
                            + nwin.w10 * n.v[r0 + i + 1]
                            + nwin.w01 * n.v[r1 + i]
                            + nwin.w11 * n.v[r1 + i + 1];
                        let it = i1 - patch[idx];
                        bx -= gxp[idx] * it;
                        by -= gyp[idx] * it;
                        idx += 1;
                    }
                }
            } else {
                let mut idx = 0;
                for wy in -half..=half {
                    for wx in -half..=half {
                        let i1 = n.sample(&n.v, xn + wx as f32, yn + wy as f32);
                        let it = i1 - patch[idx];
                        bx -= gxp[idx] * it;
                        by -= gyp[idx] * it;
                        idx += 1;
                    }
                }
            }
            let ux = inv_det * (c * bx - b * by);
            let uy = inv_det * (-b * bx + a * by);
            dx += ux;
            dy += uy;
            if ((ux * ux + uy * uy) as f64).sqrt() < cfg.eps {
                break;
            }
        }
    }

    let tracked = Vector2::new(pt.x + dx as f64, pt.y + dy as f64);
    let base = &next[0];
    if tracked.x < 0.0 || tracked.y < 0.0 || tracked.x > (base.width - 1) as f64 || tracked.y > (base.height - 1) as f64 {
        return (Vector2::zeros(), TrackStatus::Lost);
    }
    (tracked - pt, TrackStatus::Tracked)
}

/// Image pyramid with per-level gradients, reusable across frame pairs: a
/// frame's pyramid serves as `next` for one pair and `prev` for the
/// following one.
pub struct PreparedPyramid {
    width: usize,
    height: usize,
    levels: Vec<LevelImage>,
}

impl PreparedPyramid {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }
}

/// Build the pyramid and gradient stack LK needs for one frame.
pub fn prepare_pyramid(g: &GrayFrame, levels: usize) -> Result<PreparedPyramid, FlowError> {
    let levels = build_pyramid(g, levels)?.iter().map(LevelImage::from_gray).collect();
    Ok(PreparedPyramid { width: g.width, height: g.height, levels })
}

/// Coarse-to-fine iterative LK over a point set. Per-point failures are
/// reported in the status vector, never as errors.
pub fn lk_track(
    prev: &GrayFrame,
    next: &GrayFrame,
    points: &[Vector2<f64>],
    cfg: &LkConfig,
) -> Result<FlowField, FlowError> {
    cfg.validate()?;
    if prev.width != next.width || prev.height != next.height {
        return Err(FlowError::SizeMismatch(prev.width, prev.height, next.width, next.height));
    }
    let prev_pyr = prepare_pyramid(prev, cfg.levels)?;
    let next_pyr = prepare_pyramid(next, cfg.levels)?;
    lk_track_prepared(&prev_pyr, &next_pyr, points, cfg)
}

/// [`lk_track`] over pre-built pyramids.
pub fn lk_track_prepared(
    prev: &PreparedPyramid,
    next: &PreparedPyramid,
    points: &[Vector2<f64>],
    cfg: &LkConfig,
) -> Result<FlowField, FlowError> {
    cfg.validate()?;
    if prev.width != next.width || prev.height != next.height {
        return Err(FlowError::SizeMismatch(prev.width, prev.height, next.width, next.height));
    }
    if prev.levels.len() != cfg.levels || next.levels.len() != cfg.levels {
        return Err(FlowError::InvalidConfig(format!(
            "prepared pyramids have {}/{} levels, config wants {}",
            prev.levels.len(),
            next.levels.len(),
            cfg.levels
        )));
    }
    let mut displacements = vec![Vector2::zeros(); points.len()];
    let mut status = vec![TrackStatus::Lost; points.len()];
    {
        use rayon::prelude::*;
        displacements
            .par_iter_mut()
            .zip(status.par_iter_mut())
            .zip(points.par_iter())
            .for_each(|((d, s), &pt)| {
                let (disp, st) = track_point(&prev.levels, &next.levels, pt, cfg);
                *d = disp;
                *s = st;
            });
    }
    Ok(FlowField { origins: points.to_vec(), displacements, status })
}
