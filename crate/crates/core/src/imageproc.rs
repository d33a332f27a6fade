//! Frame preprocessing and marker segmentation.
//!
//! Implements the per-frame chain applied to every capture — Gaussian blur,
//! circular mask, unsharp sharpening, grayscale conversion — and the
//! dual-threshold extraction of black dots and white platform markers via
//! morphology, connected components and intensity-weighted centroids.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageProcError {
    #[error("invalid marker config: {0}")]
    InvalidConfig(String),
    #[error("over-segmentation: {found} components exceed the limit of {limit}")]
    OverSegmentation { found: usize, limit: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad image file: {0}")]
    BadFormat(String),
}

/// 8-bit RGB frame, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` bytes, R,G,B per pixel.
    pub pixels: Vec<u8>,
    /// Sequence number within a capture.
    pub index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height * 3], index: 0 }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels, index: 0 }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// 8-bit luminance frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height] }
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self { width, height, pixels: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

/// One bit per pixel, dimensions matching the source frame.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerKind {
    Black,
    White,
}

/// Detected marker centroids of one kind, with component areas in px².
#[derive(Debug, Clone)]
pub struct MarkerSet {
    pub kind: MarkerKind,
    pub centroids: Vec<Vector2<f64>>,
    pub areas: Vec<f64>,
}

impl MarkerSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let kind = match self.kind {
            MarkerKind::Black => "black",
            MarkerKind::White => "white",
        };
        let mut out = String::from("kind,x_px,y_px,area\n");
        for (c, a) in self.centroids.iter().zip(&self.areas) {
            out.push_str(&format!("{kind},{:.6},{:.6},{:.3}\n", c.x, c.y, a));
        }
        out
    }
}

/// Thresholds and component filters for [`extract_markers`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarkerConfig {
    /// Luma below this is "black marker" material.
    pub t_low: u8,
    /// Luma above this is "white marker" material.
    pub t_high: u8,
    /// Component area bounds in px².
    pub min_area: f64,
    pub max_area: f64,
    /// Disc radius of the morphological structuring element.
    pub morph_radius: usize,
    /// Component count above this is treated as over-segmentation.
    pub max_markers: usize,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        Self { t_low: 70, t_high: 200, min_area: 4.0, max_area: 400.0, morph_radius: 1, max_markers: 2000 }
    }
}

impl MarkerConfig {
    pub fn validate(&self) -> Result<(), ImageProcError> {
        if self.t_low >= self.t_high {
            return Err(ImageProcError::InvalidConfig(format!(
                "t_low ({}) must be below t_high ({})",
                self.t_low, self.t_high
            )));
        }
        if !(self.min_area >= 0.0 && self.max_area >= self.min_area) {
            return Err(ImageProcError::InvalidConfig("area bounds must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Convolution chain
// ---------------------------------------------------------------------------

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    assert!(sigma > 0.0, "blur sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Separable Gaussian blur of interleaved planes, clamp-to-edge borders.
/// Border taps are clamped explicitly; the interior runs a straight
/// multiply-accumulate that vectorizes.
fn blur_planes(src: &[f32], width: usize, height: usize, channels: usize, sigma: f64) -> Vec<f32> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let stride = width * channels;

    let mut tmp = vec![0.0f32; src.len()];
    // Horizontal pass: clamped taps at the borders, one flat
    // multiply-accumulate sweep over the interior.
    {
        use rayon::prelude::*;
        tmp.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
            let src_row = &src[y * stride..(y + 1) * stride];
            let interior_end = width.saturating_sub(radius);
            for x in 0..width.min(radius) {
                clamped_h_tap(row, src_row, x, width, channels, &kernel, radius);
            }
            if interior_end > radius {
                let lo = radius * channels;
                let hi = interior_end * channels;
                let rc = radius * channels;
                match (kernel.len(), channels) {
                    (7, 1) => conv_flat::<7, 1>(&mut row[lo..hi], &src_row[lo - rc..], &kernel),
                    (7, 3) => conv_flat::<7, 3>(&mut row[lo..hi], &src_row[lo - rc..], &kernel),
                    _ => conv_flat_dyn(&mut row[lo..hi], &src_row[lo - rc..], channels, &kernel),
                }
            }
            for x in interior_end.max(radius.min(width))..width {
                clamped_h_tap(row, src_row, x, width, channels, &kernel, radius);
            }
        });
    }
    let mut out = vec![0.0f32; src.len()];
    // Vertical pass: per output row, one sweep over clamped source rows.
    {
        use rayon::prelude::*;
        out.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
            let src_rows: Vec<&[f32]> = (0..kernel.len())
                .map(|ki| {
                    let yy = (y as i64 + ki as i64 - radius as i64).clamp(0, height as i64 - 1) as usize;
                    &tmp[yy * stride..(yy + 1) * stride]
                })
                .collect();
            match kernel.len() {
                7 => vconv_flat::<7>(row, &src_rows, &kernel),
                _ => {
                    for (i, d) in row.iter_mut().enumerate() {
                        let mut acc = 0.0f32;
                        for (ki, &w) in kernel.iter().enumerate() {
                            acc += w * src_rows[ki][i];
                        }
                        *d = acc;
                    }
                }
            }
        });
    }
    out
}

/// Flat interior convolution with compile-time taps and channel stride:
/// `dst[i] = Σ k[j] · src[i + j·CH]`, `src` starting `radius` taps early.
fn conv_flat<const TAPS: usize, const CH: usize>(dst: &mut [f32], src: &[f32], kernel: &[f32]) {
    let mut k = [0.0f32; TAPS];
    k.copy_from_slice(kernel);
    for (i, d) in dst.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for j in 0..TAPS {
            acc += k[j] * src[i + j * CH];
        }
        *d = acc;
    }
}

fn conv_flat_dyn(dst: &mut [f32], src: &[f32], channels: usize, kernel: &[f32]) {
    for (i, d) in dst.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (j, &w) in kernel.iter().enumerate() {
            acc += w * src[i + j * channels];
        }
        *d = acc;
    }
}

/// Vertical flat convolution with a compile-time tap count.
fn vconv_flat<const TAPS: usize>(dst: &mut [f32], src_rows: &[&[f32]], kernel: &[f32]) {
    let mut k = [0.0f32; TAPS];
    k.copy_from_slice(kernel);
    let rows: [&[f32]; TAPS] = std::array::from_fn(|i| src_rows[i]);
    for (i, d) in dst.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for j in 0..TAPS {
            acc += k[j] * rows[j][i];
        }
        *d = acc;
    }
}

#[inline]
fn clamped_h_tap(
    row: &mut [f32],
    src_row: &[f32],
    x: usize,
    width: usize,
    channels: usize,
    kernel: &[f32],
    radius: usize,
) {
    for c in 0..channels {
        let mut acc = 0.0f32;
        for (ki, &w) in kernel.iter().enumerate() {
            let xx = (x as i64 + ki as i64 - radius as i64).clamp(0, width as i64 - 1) as usize;
            acc += w * src_row[xx * channels + c];
        }
        row[x * channels + c] = acc;
    }
}

fn to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32).collect()
}

fn to_u8(vals: &[f32]) -> Vec<u8> {
    // (v + 0.5) truncation == round() for the non-negative domain and
    // vectorizes on baseline targets.
    vals.iter().map(|&v| (v + 0.5).clamp(0.0, 255.0) as u8).collect()
}

/// Gaussian blur with kernel radius `ceil(3σ)`, borders clamped.
pub fn gaussian_blur(f: &Frame, sigma: f64) -> Frame {
    let out = blur_planes(&to_f32(&f.pixels), f.width, f.height, 3, sigma);
    Frame { width: f.width, height: f.height, pixels: to_u8(&out), index: f.index }
}

/// Grayscale variant of [`gaussian_blur`].
pub fn gaussian_blur_gray(g: &GrayFrame, sigma: f64) -> GrayFrame {
    let out = blur_planes(&to_f32(&g.pixels), g.width, g.height, 1, sigma);
    GrayFrame { width: g.width, height: g.height, pixels: to_u8(&out) }
}

/// Zero pixels outside the centered circle whose diameter equals the frame
/// height. Row spans come from the circle equation, verified pixel-exact at
/// the boundaries.
pub fn circular_mask(f: &Frame) -> Frame {
    let mut out = f.clone();
    let cx = (f.width as f64 - 1.0) / 2.0;
    let cy = (f.height as f64 - 1.0) / 2.0;
    let r2 = (f.height as f64 / 2.0).powi(2);
    let w = f.width;
    for y in 0..f.height {
        let dy = y as f64 - cy;
        let span2 = r2 - dy * dy;
        let row = &mut out.pixels[y * w * 3..(y + 1) * w * 3];
        if span2 < 0.0 {
            row.fill(0);
            continue;
        }
        let inside = |x: i64| -> bool {
            let dx = x as f64 - cx;
            dx * dx + dy * dy <= r2
        };
        let s = span2.sqrt();
        let mut xa = (cx - s).ceil() as i64;
        while xa > 0 && inside(xa - 1) {
            xa -= 1;
        }
        while xa < w as i64 && !inside(xa) {
            xa += 1;
        }
        let mut xb = (cx + s).floor() as i64;
        while xb + 1 < w as i64 && inside(xb + 1) {
            xb += 1;
        }
        while xb >= 0 && !inside(xb) {
            xb -= 1;
        }
        let xa = xa.clamp(0, w as i64) as usize;
        let xb = (xb + 1).clamp(0, w as i64) as usize;
        row[..xa * 3].fill(0);
        row[xb * 3..].fill(0);
    }
    out
}

/// True where the centered height-diameter circle covers the pixel.
pub fn circle_coverage(width: usize, height: usize) -> BinaryMask {
    let mut m = BinaryMask::new(width, height);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let r2 = (height as f64 / 2.0).powi(2);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            m.set(x, y, dx * dx + dy * dy <= r2);
        }
    }
    m
}

fn unsharp(src: &[f32], width: usize, height: usize, channels: usize, amount: f64, sigma: f64) -> Vec<f32> {
    let blurred = blur_planes(src, width, height, channels, sigma);
    src.iter()
        .zip(&blurred)
        .map(|(&v, &b)| v + amount as f32 * (v - b))
        .collect()
}

/// Unsharp mask: `out = clamp(in + amount * (in - blur(in, sigma)))`.
pub fn sharpen(f: &Frame, amount: f64, sigma: f64) -> Frame {
    assert!(amount >= 0.0, "sharpen amount must be non-negative");
    if amount == 0.0 {
        return f.clone();
    }
    let out = unsharp(&to_f32(&f.pixels), f.width, f.height, 3, amount, sigma);
    Frame { width: f.width, height: f.height, pixels: to_u8(&out), index: f.index }
}

/// Grayscale variant of [`sharpen`].
pub fn sharpen_gray(g: &GrayFrame, amount: f64, sigma: f64) -> GrayFrame {
    assert!(amount >= 0.0, "sharpen amount must be non-negative");
    if amount == 0.0 {
        return g.clone();
    }
    let out = unsharp(&to_f32(&g.pixels), g.width, g.height, 1, amount, sigma);
    GrayFrame { width: g.width, height: g.height, pixels: to_u8(&out) }
}

/// ITU-R BT.601 luma: `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_gray(f: &Frame) -> GrayFrame {
    let mut g = GrayFrame::new(f.width, f.height);
    for (i, px) in f.pixels.chunks_exact(3).enumerate() {
        let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        g.pixels[i] = (luma + 0.5).clamp(0.0, 255.0) as u8;
    }
    g
}

// ---------------------------------------------------------------------------
// Morphology and connected components
// ---------------------------------------------------------------------------

fn disc_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offs.push((dx, dy));
            }
        }
    }
    offs
}

pub fn erode(m: &BinaryMask, radius: usize) -> BinaryMask {
    let offs = disc_offsets(radius);
    let mut out = BinaryMask::new(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            let mut keep = true;
            for &(dx, dy) in &offs {
                let xx = x as i64 + dx;
                let yy = y as i64 + dy;
                if xx < 0 || yy < 0 || xx >= m.width as i64 || yy >= m.height as i64 {
                    keep = false;
                    break;
                }
                if !m.get(xx as usize, yy as usize) {
                    keep = false;
                    break;
                }
            }
            out.set(x, y, keep);
        }
    }
    out
}

pub fn dilate(m: &BinaryMask, radius: usize) -> BinaryMask {
    let offs = disc_offsets(radius);
    let mut out = BinaryMask::new(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.get(x, y) {
                continue;
            }
            for &(dx, dy) in &offs {
                let xx = x as i64 + dx;
                let yy = y as i64 + dy;
                if xx >= 0 && yy >= 0 && xx < m.width as i64 && yy < m.height as i64 {
                    out.set(xx as usize, yy as usize, true);
                }
            }
        }
    }
    out
}

/// Erosion followed by dilation.
pub fn morph_open(m: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(m, radius), radius)
}

/// Dilation followed by erosion.
pub fn morph_close(m: &BinaryMask, radius: usize) -> BinaryMask {
    erode(&dilate(m, radius), radius)
}

/// 8-connected component labeling; returns per-component pixel lists.
pub fn connected_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; m.width * m.height];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            let idx = y * m.width + x;
            if !m.bits[idx] || seen[idx] {
                continue;
            }
            let mut comp = Vec::new();
            seen[idx] = true;
            stack.push((x, y));
            while let Some((px, py)) = stack.pop() {
                comp.push((px, py));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = px as i64 + dx;
                        let ny = py as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= m.width as i64 || ny >= m.height as i64 {
                            continue;
                        }
                        let nidx = ny as usize * m.width + nx as usize;
                        if m.bits[nidx] && !seen[nidx] {
                            seen[nidx] = true;
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
            components.push(comp);
        }
    }
    components
}

/// Binarize one marker kind, clean it up morphologically, and return
/// area-filtered components with intensity-weighted subpixel centroids.
pub fn extract_markers(
    g: &GrayFrame,
    kind: MarkerKind,
    cfg: &MarkerConfig,
) -> Result<MarkerSet, ImageProcError> {
    cfg.validate()?;

    let mut mask = BinaryMask::new(g.width, g.height);
    for (i, &v) in g.pixels.iter().enumerate() {
        let on = match kind {
            MarkerKind::Black => v < cfg.t_low,
            MarkerKind::White => v > cfg.t_high,
        };
        mask.bits[i] = on;
    }
    let mask = morph_close(&morph_open(&mask, cfg.morph_radius), cfg.morph_radius);

    let components = connected_components(&mask);
    if components.len() > cfg.max_markers {
        return Err(ImageProcError::OverSegmentation { found: components.len(), limit: cfg.max_markers });
    }

    let mut centroids = Vec::new();
    let mut areas = Vec::new();
    for comp in components {
        let area = comp.len() as f64;
        if area < cfg.min_area || area > cfg.max_area {
            continue;
        }
        // Weight by intensity excess over the threshold so anti-aliased edge
        // pixels contribute proportionally; include a one-pixel border ring to
        // catch edge pixels the binarization clipped.
        let mut ring: Vec<u32> = Vec::with_capacity(comp.len() * 9);
        for &(x, y) in &comp {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx >= 0 && ny >= 0 && nx < g.width as i64 && ny < g.height as i64 {
                        ring.push(ny as u32 * g.width as u32 + nx as u32);
                    }
                }
            }
        }
        ring.sort_unstable();
        ring.dedup();
        let mut sw = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for idx in ring {
            let x = (idx % g.width as u32) as usize;
            let y = (idx / g.width as u32) as usize;
            let v = g.pixels[idx as usize] as f64;
            let w = match kind {
                MarkerKind::Black => (cfg.t_low as f64 - v).max(0.0),
                MarkerKind::White => (v - cfg.t_high as f64).max(0.0),
            };
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
        if sw <= 0.0 {
            continue;
        }
        centroids.push(Vector2::new(sx / sw, sy / sw));
        areas.push(area);
    }
    Ok(MarkerSet { kind, centroids, areas })
}

// ---------------------------------------------------------------------------
// PPM / PGM I/O
// ---------------------------------------------------------------------------

fn read_token(r: &mut impl BufRead) -> Result<String, ImageProcError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    // Skip whitespace and comments.
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(ImageProcError::BadFormat("unexpected end of header".into()));
        }
        match byte[0] {
            b'#' => {
                let mut skip = String::new();
                r.read_line(&mut skip)?;
            }
            b if b.is_ascii_whitespace() => {}
            b => {
                tok.push(b as char);
                break;
            }
        }
    }
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            break;
        }
        tok.push(byte[0] as char);
    }
    Ok(tok)
}

fn parse_header(r: &mut impl BufRead, magic: &str) -> Result<(usize, usize, u32), ImageProcError> {
    let m = read_token(r)?;
    if m != magic {
        return Err(ImageProcError::BadFormat(format!("expected {magic}, found {m}")));
    }
    let w: usize = read_token(r)?.parse().map_err(|_| ImageProcError::BadFormat("bad width".into()))?;
    let h: usize = read_token(r)?.parse().map_err(|_| ImageProcError::BadFormat("bad height".into()))?;
    let maxval: u32 = read_token(r)?.parse().map_err(|_| ImageProcError::BadFormat("bad maxval".into()))?;
    Ok((w, h, maxval))
}

pub fn write_ppm(path: &Path, f: &Frame) -> Result<(), ImageProcError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{} {}\n255\n", f.width, f.height)?;
    file.write_all(&f.pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Frame, ImageProcError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (w, h, maxval) = parse_header(&mut r, "P6")?;
    if maxval != 255 {
        return Err(ImageProcError::BadFormat(format!("unsupported maxval {maxval}")));
    }
    let mut pixels = vec![0u8; w * h * 3];
    r.read_exact(&mut pixels)?;
    Ok(Frame { width: w, height: h, pixels, index: 0 })
}

pub fn write_pgm(path: &Path, g: &GrayFrame) -> Result<(), ImageProcError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", g.width, g.height)?;
    file.write_all(&g.pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayFrame, ImageProcError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (w, h, maxval) = parse_header(&mut r, "P5")?;
    if maxval != 255 {
        return Err(ImageProcError::BadFormat(format!("unsupported maxval {maxval}")));
    }
    let mut pixels = vec![0u8; w * h];
    r.read_exact(&mut pixels)?;
    Ok(GrayFrame { width: w, height: h, pixels })
}

/// 16-bit big-endian PGM, used for height map export.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<(), ImageProcError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{width} {height}\n65535\n")?;
    for &v in values {
        file.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Splat an anti-aliased disc (16x supersampled coverage) onto a gray frame.
/// Test helper shared across module test suites.
#[cfg(test)]
pub(crate) fn draw_disc(g: &mut GrayFrame, cx: f64, cy: f64, r: f64, fg: u8, bg_blend: bool) {
    let x0 = (cx - r - 2.0).floor().max(0.0) as usize;
    let x1 = (cx + r + 2.0).ceil().min(g.width as f64 - 1.0) as usize;
    let y0 = (cy - r - 2.0).floor().max(0.0) as usize;
    let y1 = (cy + r + 2.0).ceil().min(g.height as f64 - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut cover = 0u32;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                    let dx = px - cx;
                    let dy = py - cy;
                    if dx * dx + dy * dy <= r * r {
                        cover += 1;
                    }
                }
            }
            if cover > 0 {
                let alpha = cover as f64 / 16.0;
                let old = g.get(x, y) as f64;
                let v = if bg_blend { old * (1.0 - alpha) + fg as f64 * alpha } else { fg as f64 };
                g.set(x, y, v.round() as u8);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blur_preserves_constant_image() {
        let f = Frame::filled(32, 32, [90, 120, 200]);
        let b = gaussian_blur(&f, 1.5);
        assert_eq!(b.pixels, f.pixels);
    }

    #[test]
    fn blur_impulse_center_weight() {
        // Direct 2D kernel evaluation oracle for the center weight at σ=1:
        // radius 3, w0 = 1/sum(exp(-i²/2)), center 2D weight = w0².
        let mut g = GrayFrame::new(33, 33);
        g.set(16, 16, 255);
        let b = blur_planes(&to_f32(&g.pixels), 33, 33, 1, 1.0);
        let center = b[16 * 33 + 16] / 255.0;

        let w1d: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let sum: f64 = w1d.iter().sum();
        let expected = (w1d[3] / sum).powi(2);
        assert!((center as f64 - expected).abs() < 1e-3, "center {center} vs oracle {expected}");
        assert!((expected - 0.1592).abs() < 1e-3);
    }

    #[test]
    fn blur_semigroup() {
        // Gaussian semigroup oracle: blur(σ) twice ≈ blur(σ√2) once.
        let mut g = GrayFrame::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let v = 120.0 + 90.0 * ((x as f64 * 0.35).sin() * (y as f64 * 0.22).cos());
                g.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        let twice = gaussian_blur_gray(&gaussian_blur_gray(&g, 1.2), 1.2);
        let once = gaussian_blur_gray(&g, 1.2 * std::f64::consts::SQRT_2);
        let mut se = 0.0;
        for (a, b) in twice.pixels.iter().zip(&once.pixels) {
            se += (*a as f64 - *b as f64).powi(2);
        }
        let rms = (se / twice.pixels.len() as f64).sqrt();
        assert!(rms <= 1.0, "semigroup RMS {rms}");
    }

    #[test]
    fn mask_white_frame() {
        let f = Frame::filled(480, 480, [255, 255, 255]);
        let m = circular_mask(&f);
        assert_eq!(m.get(240, 240), [255, 255, 255]);
        assert_eq!(m.get(0, 0), [0, 0, 0]);
        assert_eq!(m.get(479, 479), [0, 0, 0]);

        // Per-pixel scan oracle for the masked pixel count.
        let mut expect = 0usize;
        let cx = 479.0 / 2.0;
        let r2 = 240.0f64 * 240.0;
        for y in 0..480 {
            for x in 0..480 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cx;
                if dx * dx + dy * dy <= r2 {
                    expect += 1;
                }
            }
        }
        let kept = m.pixels.chunks_exact(3).filter(|p| p[0] == 255).count();
        assert_eq!(kept, expect);
    }

    #[test]
    fn mask_is_idempotent() {
        let mut f = Frame::filled(64, 48, [10, 10, 10]);
        for (i, p) in f.pixels.iter_mut().enumerate() {
            *p = (i % 251) as u8;
        }
        let once = circular_mask(&f);
        let twice = circular_mask(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn sharpen_identity_cases() {
        let mut f = Frame::filled(32, 32, [0, 0, 0]);
        for (i, p) in f.pixels.iter_mut().enumerate() {
            *p = ((i * 7) % 256) as u8;
        }
        assert_eq!(sharpen(&f, 0.0, 1.0), f);
        let c = Frame::filled(32, 32, [77, 140, 33]);
        assert_eq!(sharpen(&c, 1.5, 2.0), c);
    }

    #[test]
    fn sharpen_step_edge_overshoot() {
        // 1-D unsharp oracle on a step edge.
        let mut g = GrayFrame::new(64, 9);
        for y in 0..9 {
            for x in 0..64 {
                g.set(x, y, if x < 32 { 50 } else { 150 });
            }
        }
        let amount = 1.0;
        let sigma = 1.0;
        let s = sharpen_gray(&g, amount, sigma);

        // Direct evaluation: blur the 1-D profile with the same kernel and
        // apply the unsharp formula at every column.
        let kernel = gaussian_kernel(sigma);
        let radius = kernel.len() as i64 / 2;
        let profile: Vec<f64> = (0..64).map(|x| if x < 32 { 50.0 } else { 150.0 }).collect();
        for x in 0..64usize {
            let mut b = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let xx = (x as i64 + ki as i64 - radius).clamp(0, 63) as usize;
                b += w as f64 * profile[xx];
            }
            let expect = (profile[x] + amount * (profile[x] - b)).round().clamp(0.0, 255.0);
            assert_eq!(s.get(x, 4) as f64, expect, "column {x}");
        }
        // Overshoot exists on both sides of the edge.
        assert!(s.get(31, 4) < 50);
        assert!(s.get(32, 4) > 150);
    }

    #[test]
    fn gray_conversion_values() {
        let mut f = Frame::new(3, 1);
        f.set(0, 0, [255, 255, 255]);
        f.set(1, 0, [0, 255, 0]);
        f.set(2, 0, [97, 97, 97]);
        let g = to_gray(&f);
        assert_eq!(g.get(0, 0), 255);
        assert_eq!(g.get(1, 0), 150); // 0.587 * 255 rounded
        assert_eq!(g.get(2, 0), 97);
    }

    #[test]
    fn extract_empty_on_midgray() {
        let g = GrayFrame::filled(64, 64, 128);
        let cfg = MarkerConfig::default();
        assert!(extract_markers(&g, MarkerKind::Black, &cfg).unwrap().is_empty());
        assert!(extract_markers(&g, MarkerKind::White, &cfg).unwrap().is_empty());
    }

    #[test]
    fn extract_subpixel_disc_centroid() {
        let mut g = GrayFrame::filled(256, 256, 20);
        draw_disc(&mut g, 100.5, 200.5, 4.0, 255, true);
        let cfg = MarkerConfig::default();
        let set = extract_markers(&g, MarkerKind::White, &cfg).unwrap();
        assert_eq!(set.len(), 1);
        let c = set.centroids[0];
        assert!((c.x - 100.5).abs() < 0.1 && (c.y - 200.5).abs() < 0.1, "centroid {c:?}");
    }

    #[test]
    fn extract_rejects_area_out_of_bounds() {
        let mut g = GrayFrame::filled(128, 128, 128);
        draw_disc(&mut g, 64.0, 64.0, 30.0, 255, true); // area ~2827 px², above max
        let cfg = MarkerConfig::default();
        let set = extract_markers(&g, MarkerKind::White, &cfg).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn extract_over_segmentation_error() {
        let mut g = GrayFrame::filled(128, 128, 128);
        for y in 0..16 {
            for x in 0..16 {
                draw_disc(&mut g, 4.0 + 8.0 * x as f64, 4.0 + 8.0 * y as f64, 1.6, 255, true);
            }
        }
        let cfg = MarkerConfig { max_markers: 100, ..Default::default() };
        match extract_markers(&g, MarkerKind::White, &cfg) {
            Err(ImageProcError::OverSegmentation { found, limit }) => {
                assert!(found > limit);
            }
            other => panic!("expected over-segmentation, got {other:?}"),
        }
    }

    #[test]
    fn centroid_translation_equivariance() {
        let mut g0 = GrayFrame::filled(200, 200, 30);
        draw_disc(&mut g0, 80.25, 90.75, 5.0, 255, true);
        draw_disc(&mut g0, 130.5, 60.0, 4.0, 255, true);
        let (dx, dy) = (17i64, -9i64);
        let mut g1 = GrayFrame::filled(200, 200, 30);
        for y in 0..200i64 {
            for x in 0..200i64 {
                let sx = x - dx;
                let sy = y - dy;
                if sx >= 0 && sy >= 0 && sx < 200 && sy < 200 {
                    g1.set(x as usize, y as usize, g0.get(sx as usize, sy as usize));
                }
            }
        }
        let cfg = MarkerConfig::default();
        let mut a = extract_markers(&g0, MarkerKind::White, &cfg).unwrap().centroids;
        let mut b = extract_markers(&g1, MarkerKind::White, &cfg).unwrap().centroids;
        a.sort_by(|p, q| p.x.total_cmp(&q.x));
        b.sort_by(|p, q| p.x.total_cmp(&q.x));
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        for (p, q) in a.iter().zip(&b) {
            assert!((q.x - p.x - dx as f64).abs() < 1e-9);
            assert!((q.y - p.y - dy as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn morphology_idempotent_on_own_output() {
        let mut m = BinaryMask::new(64, 64);
        for y in 20..40 {
            for x in 10..50 {
                if (x * 31 + y * 17) % 5 != 0 {
                    m.set(x, y, true);
                }
            }
        }
        let opened = morph_open(&m, 1);
        let opened2 = morph_open(&opened, 1);
        assert_eq!(opened.bits, opened2.bits);
        let closed = morph_close(&m, 1);
        let closed2 = morph_close(&closed, 1);
        assert_eq!(closed.bits, closed2.bits);
    }

    #[test]
    fn black_and_white_extraction_disjoint() {
        let mut g = GrayFrame::filled(128, 128, 128);
        draw_disc(&mut g, 40.0, 40.0, 4.0, 0, true);
        draw_disc(&mut g, 90.0, 90.0, 4.0, 255, true);
        let cfg = MarkerConfig::default();
        let black = extract_markers(&g, MarkerKind::Black, &cfg).unwrap();
        let white = extract_markers(&g, MarkerKind::White, &cfg).unwrap();
        assert_eq!(black.len(), 1);
        assert_eq!(white.len(), 1);
        // Component pixel sets are disjoint: centroids far apart by construction.
        assert!((black.centroids[0] - white.centroids[0]).norm() > 50.0);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = std::env::temp_dir();
        let path = dir.join("dometac_test_rt.ppm");
        let mut f = Frame::new(17, 9);
        for (i, p) in f.pixels.iter_mut().enumerate() {
            *p = ((i * 13) % 256) as u8;
        }
        write_ppm(&path, &f).unwrap();
        let g = read_ppm(&path).unwrap();
        assert_eq!(f.pixels, g.pixels);
        std::fs::remove_file(&path).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gray_of_gray_is_identity(v in 0u8..=255) {
            let f = Frame::filled(4, 4, [v, v, v]);
            let g = to_gray(&f);
            prop_assert!(g.pixels.iter().all(|&p| p == v));
        }

        #[test]
        fn mask_idempotent_prop(seed in 0u64..1000) {
            let mut f = Frame::new(48, 40);
            let mut s = seed;
            for p in f.pixels.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *p = (s >> 33) as u8;
            }
            let once = circular_mask(&f);
            prop_assert_eq!(circular_mask(&once), once);
        }
    }
}
