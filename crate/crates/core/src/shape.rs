//! Contact geometry from frame colors: three-light Lambertian normal
//! recovery followed by Poisson integration to a height map.
//!
//! The forward shading model is `I_c = gain_c · max(0, n·l_c) + ambient_c`
//! per RGB channel; inversion treats the clamp as inactive and flags pixels
//! where it was not. Integration solves the discrete Poisson equation over
//! the valid region with homogeneous Neumann boundaries by red-black
//! successive over-relaxation.

use crate::imageproc::Frame;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("light configuration error: {0}")]
    Config(String),
    #[error("integration did not converge: residual {residual:.3e} after {sweeps} sweeps")]
    Convergence { residual: f64, sweeps: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-channel illumination: unit directions toward the light, channel
/// gains, and ambient offsets in gray levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightConfig {
    pub directions: [[f64; 3]; 3],
    pub gains: [f64; 3],
    pub ambient: [f64; 3],
}

impl Default for LightConfig {
    /// Three LEDs at 120° azimuthal spacing. The LEDs sit on a ring around
    /// the dome base tilted 85° toward it; combined with the ring offset the
    /// effective incident direction at the sensing cap is ~55° elevation.
    fn default() -> Self {
        let elevation = 55.0f64.to_radians();
        let mut directions = [[0.0; 3]; 3];
        for (i, az_deg) in [90.0, 210.0, 330.0].iter().enumerate() {
            let az = az_deg * std::f64::consts::PI / 180.0;
            directions[i] = [elevation.cos() * az.cos(), elevation.cos() * az.sin(), elevation.sin()];
        }
        Self { directions, gains: [170.0; 3], ambient: [10.0; 3] }
    }
}

impl LightConfig {
    pub fn direction(&self, c: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.directions[c])
    }

    /// Rows are the light directions.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[
            self.direction(0).transpose(),
            self.direction(1).transpose(),
            self.direction(2).transpose(),
        ])
    }

    pub fn condition_number(&self) -> f64 {
        let svd = self.matrix().svd(false, false);
        let max = svd.singular_values.max();
        let min = svd.singular_values.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        for c in 0..3 {
            let n = self.direction(c).norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(ShapeError::Config(format!("light {c} direction norm {n} is not unit")));
            }
            if !(self.gains[c] > 0.0) {
                return Err(ShapeError::Config(format!("light {c} gain must be positive")));
            }
            if self.ambient[c] < 0.0 {
                return Err(ShapeError::Config(format!("light {c} ambient must be non-negative")));
            }
        }
        let cond = self.condition_number();
        if self.matrix().try_inverse().is_none() || !cond.is_finite() || cond > 1e8 {
            return Err(ShapeError::Config(format!(
                "light direction matrix is singular or ill-conditioned (cond {cond:.2e})"
            )));
        }
        Ok(())
    }

    /// Forward shading of a unit normal, gray levels before quantization.
    pub fn shade(&self, n: &Vector3<f64>) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.gains[c] * n.dot(&self.direction(c)).max(0.0) + self.ambient[c];
        }
        out
    }
}

/// Per-pixel unit normals with validity flags.
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel height in mm over the reference surface, zero-mean over the
/// valid domain.
#[derive(Debug, Clone)]
pub struct HeightMap {
    pub width: usize,
    pub height: usize,
    /// Grid pitch in mm per pixel.
    pub pitch_mm: f64,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl HeightMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Count of valid pixels whose indentation depth exceeds `threshold_mm`.
    pub fn contact_area_px2(&self, threshold_mm: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(v, ok)| **ok && **v <= -threshold_mm)
            .count() as f64
    }

    /// Deepest indentation (most negative value), mm.
    pub fn peak_indentation_mm(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .fold(0.0, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,height_mm\n");
        for y in 0..self.height {
            for x in 0..self.width {
                if self.valid[y * self.width + x] {
                    out.push_str(&format!("{x},{y},{:.6}\n", self.get(x, y)));
                }
            }
        }
        out
    }

    /// Export as 16-bit PGM plus a JSON sidecar with scale/offset.
    pub fn write_pgm16(&self, path: &Path) -> Result<(), ShapeError> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (v, ok) in self.values.iter().zip(&self.valid) {
            if *ok {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if !lo.is_finite() || hi <= lo {
            lo = 0.0;
            hi = 1.0;
        }
        let scale = (hi - lo) / 65535.0;
        let vals: Vec<u16> = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(v, ok)| if *ok { (((v - lo) / scale).round()).clamp(0.0, 65535.0) as u16 } else { 0 })
            .collect();
        crate::imageproc::write_pgm16(path, self.width, self.height, &vals)
            .map_err(|e| ShapeError::Io(std::io::Error::other(e.to_string())))?;

        let sidecar = serde_json::json!({
            "offset_mm": lo,
            "scale_mm_per_level": scale,
            "pitch_mm_per_px": self.pitch_mm,
            "width": self.width,
            "height": self.height,
        });
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar).unwrap())?;
        Ok(())
    }
}

/// Solver parameters for [`integrate_normals`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    /// Over-relaxation factor used when `omega_auto` is off.
    pub omega: f64,
    /// Pick ω from the grid size (`2 / (1 + sin(π/N))`); a fixed factor
    /// needs tens of thousands of sweeps on large grids.
    pub omega_auto: bool,
    /// Relative residual target.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Neighborhood radius for filling invalid pixels, px per pass.
    pub fill_radius: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { omega: 1.9, omega_auto: true, tolerance: 1e-8, max_sweeps: 30_000, fill_radius: 3 }
    }
}

impl IntegrationConfig {
    fn effective_omega(&self, width: usize, height: usize) -> f64 {
        if self.omega_auto {
            let n = width.max(height).max(3) as f64;
            (2.0 / (1.0 + (std::f64::consts::PI / n).sin())).clamp(1.0, 1.995)
        } else {
            self.omega
        }
    }
}

/// Invert the Lambertian three-light model per pixel.
pub fn normals_from_rgb(f: &Frame, lights: &LightConfig) -> Result<NormalMap, ShapeError> {
    lights.validate()?;
    let l_inv = lights.matrix().try_inverse().expect("validated invertible");
    let n_px = f.width * f.height;
    let mut normals = vec![Vector3::new(0.0, 0.0, 1.0); n_px];
    let mut valid = vec![false; n_px];

    {
        use rayon::prelude::*;
        normals
            .par_iter_mut()
            .zip(valid.par_iter_mut())
            .enumerate()
            .for_each(|(i, (n_out, ok))| {
                let px = &f.pixels[i * 3..i * 3 + 3];
                let mut rhs = Vector3::zeros();
                let mut clamped = false;
                for c in 0..3 {
                    let v = px[c] as f64;
                    // At the dark clamp or at saturation the channel carries
                    // no shading information.
                    if v <= lights.ambient[c] + 0.5 || v >= 254.5 {
                        clamped = true;
                    }
                    rhs[c] = (v - lights.ambient[c]) / lights.gains[c];
                }
                if clamped {
                    return;
                }
                let n_raw = l_inv * rhs;
                let norm = n_raw.norm();
                if norm < 0.1 {
                    return;
                }
                *n_out = n_raw / norm;
                *ok = true;
            });
    }
    Ok(NormalMap { width: f.width, height: f.height, normals, valid })
}

/// Fill invalid pixels by inverse-distance weighting of valid neighbors
/// within `radius`, repeating passes until no fillable pixels remain.
/// Gradients (p, q) are interpolated rather than unit normals.
pub fn fill_invalid_normals(map: &mut NormalMap, radius: usize) {
    let domain = vec![true; map.width * map.height];
    fill_invalid_normals_within(map, radius, &domain);
}

/// [`fill_invalid_normals`] restricted to a domain mask; pixels outside the
/// domain are never filled and never used as sources.
pub fn fill_invalid_normals_within(map: &mut NormalMap, radius: usize, domain: &[bool]) {
    let w = map.width;
    let h = map.height;
    loop {
        let mut updates: Vec<(usize, Vector3<f64>)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if map.valid[idx] || !domain[idx] {
                    continue;
                }
                let mut sw = 0.0;
                let mut sp = 0.0;
                let mut sq = 0.0;
                for dy in -(radius as i64)..=radius as i64 {
                    for dx in -(radius as i64)..=radius as i64 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let nidx = ny as usize * w + nx as usize;
                        if !map.valid[nidx] || !domain[nidx] {
                            continue;
                        }
                        let d2 = (dx * dx + dy * dy) as f64;
                        if d2 > (radius * radius) as f64 {
                            continue;
                        }
                        let n = &map.normals[nidx];
                        let weight = 1.0 / d2;
                        sw += weight;
                        sp += weight * (-n.x / n.z);
                        sq += weight * (-n.y / n.z);
                    }
                }
                if sw > 0.0 {
                    let p = sp / sw;
                    let q = sq / sw;
                    let n = Vector3::new(-p, -q, 1.0).normalize();
                    updates.push((idx, n));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (idx, n) in updates {
            map.normals[idx] = n;
            map.valid[idx] = true;
        }
    }
}

/// Integrate a normal map to a height field by solving
/// `∇²z = ∂p/∂x + ∂q/∂y` with homogeneous Neumann boundaries over the valid
/// region. The result is mean-centered (gauge fixed).
pub fn integrate_normals(
    map: &NormalMap,
    pitch_mm: f64,
    cfg: &IntegrationConfig,
) -> Result<HeightMap, ShapeError> {
    let w = map.width;
    let h = map.height;
    let n_px = w * h;

    // Gradients in mm of height per mm of surface.
    let mut p = vec![0.0f64; n_px];
    let mut q = vec![0.0f64; n_px];
    for i in 0..n_px {
        if map.valid[i] {
            let n = &map.normals[i];
            p[i] = -n.x / n.z;
            q[i] = -n.y / n.z;
        }
    }

    // Divergence via half-sample fluxes; a missing neighbor contributes zero
    // flux, which makes the Neumann system exactly compatible.
    let at = |x: i64, y: i64| -> Option<usize> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return None;
        }
        let idx = y as usize * w + x as usize;
        if map.valid[idx] {
            Some(idx)
        } else {
            None
        }
    };
    let mut rhs = vec![0.0f64; n_px];
    let mut rhs_norm2 = 0.0;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let Some(idx) = at(x, y) else { continue };
            let mut div = 0.0;
            if let Some(e) = at(x + 1, y) {
                div += 0.5 * (p[idx] + p[e]);
            }
            if let Some(wn) = at(x - 1, y) {
                div -= 0.5 * (p[idx] + p[wn]);
            }
            if let Some(s) = at(x, y + 1) {
                div += 0.5 * (q[idx] + q[s]);
            }
            if let Some(n) = at(x, y - 1) {
                div -= 0.5 * (q[idx] + q[n]);
            }
            rhs[idx] = div * pitch_mm; // grid-unit Laplacian equals pitch·div
            rhs_norm2 += rhs[idx] * rhs[idx];
        }
    }
    let valid_px: Vec<usize> = (0..n_px).filter(|&i| map.valid[i]).collect();
    if valid_px.is_empty() {
        return Ok(HeightMap { width: w, height: h, pitch_mm, values: vec![0.0; n_px], valid: map.valid.clone() });
    }
    let rhs_rms = (rhs_norm2 / valid_px.len() as f64).sqrt();

    // Compact cell list per red-black color: neighbor slots that fall
    // outside the domain point back at the cell itself and are compensated
    // by the `missing` count, keeping the update branch-free.
    struct Cell {
        idx: u32,
        nbs: [u32; 4],
        inv_count: f64,
        missing: f64,
        rhs: f64,
    }
    let mut cells: [Vec<Cell>; 2] = [Vec::new(), Vec::new()];
    for &idx in &valid_px {
        let x = (idx % w) as i64;
        let y = (idx / w) as i64;
        let mut nbs = [idx as u32; 4];
        let mut count = 0.0;
        for (slot, (nx, ny)) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)].into_iter().enumerate() {
            if let Some(nidx) = at(nx, ny) {
                nbs[slot] = nidx as u32;
                count += 1.0;
            }
        }
        if count == 0.0 {
            continue;
        }
        cells[((x + y) & 1) as usize].push(Cell {
            idx: idx as u32,
            nbs,
            inv_count: 1.0 / count,
            missing: 4.0 - count,
            rhs: rhs[idx],
        });
    }

    let mut z = vec![0.0f64; n_px];
    let mut sweeps = 0usize;
    // Trivial right-hand side: flat solution, no iteration needed.
    if rhs_rms >= 1e-300 {
        use rayon::prelude::*;
        let omega = cfg.effective_omega(w, h);
        let mut residual = f64::INFINITY;
        while sweeps < cfg.max_sweeps {
            for color in &cells {
                // Cells of one color only read the other color: updates are
                // independent and the sweep order is immaterial, so the
                // parallel result is deterministic.
                let z_ptr = SendPtr(z.as_mut_ptr());
                color.par_iter().for_each(|cell| {
                    let z_ref = unsafe { std::slice::from_raw_parts(z_ptr.0, n_px) };
                    let zi = z_ref[cell.idx as usize];
                    let sum = z_ref[cell.nbs[0] as usize]
                        + z_ref[cell.nbs[1] as usize]
                        + z_ref[cell.nbs[2] as usize]
                        + z_ref[cell.nbs[3] as usize]
                        - cell.missing * zi;
                    let gs = (sum - cell.rhs) * cell.inv_count;
                    unsafe { *z_ptr.0.add(cell.idx as usize) = zi + omega * (gs - zi) };
                });
            }
            sweeps += 1;
            if sweeps % 16 == 0 || sweeps == cfg.max_sweeps {
                let se: f64 = cells
                    .iter()
                    .flatten()
                    .map(|cell| {
                        let zi = z[cell.idx as usize];
                        let sum = z[cell.nbs[0] as usize]
                            + z[cell.nbs[1] as usize]
                            + z[cell.nbs[2] as usize]
                            + z[cell.nbs[3] as usize]
                            - cell.missing * zi;
                        let n = 1.0 / cell.inv_count;
                        let r = sum - n * zi - cell.rhs;
                        r * r
                    })
                    .sum();
                residual = (se / valid_px.len() as f64).sqrt() / rhs_rms;
                if residual < cfg.tolerance {
                    break;
                }
            }
        }
        if residual >= cfg.tolerance {
            return Err(ShapeError::Convergence { residual, sweeps });
        }
    }

    // Gauge: zero mean over the valid domain.
    let mean: f64 = valid_px.iter().map(|&i| z[i]).sum::<f64>() / valid_px.len() as f64;
    for &i in &valid_px {
        z[i] -= mean;
    }
    for i in 0..n_px {
        if !map.valid[i] {
            z[i] = 0.0;
        }
    }
    Ok(HeightMap { width: w, height: h, pitch_mm, values: z, valid: map.valid.clone() })
}

/// Raw pointer wrapper for the red-black sweep: each color's cells write
/// disjoint indices and read only the opposite color.
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}
