//! Dense optical flow.
//!
//! Coarse-to-fine Horn–Schunck with iterative warping. At every pyramid
//! level the next frame is warped towards the previous one with the current
//! flow estimate, the brightness constancy constraint is linearized around
//! that estimate, and the resulting quadratic energy
//!
//! ```text
//! E(U, V) = Σ_p (Ix·(U−u0) + Iy·(V−v0) + It)²  +  α² Σ_{p~q} (U_p−U_q)² + (V_p−V_q)²
//! ```
//!
//! is minimized by block Gauss–Seidel with over-relaxation, one 2×2 solve
//! per pixel. Each block update is an exact (relaxed) minimization of a
//! convex quadratic, so the energy never increases within a warp.
//!
//! Intensities enter the data term on the 8-bit scale (`[0,1] × 255`) so the
//! smoothness weight keeps its conventional magnitude.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_plane, GrayImage, Image};

/// Data-term intensity scale applied to `[0,1]` images.
const INTENSITY_SCALE: f64 = 255.0;

/// `.flo` magic: the float 202021.25 stored little-endian, i.e. "PIEH".
pub const FLO_MAGIC: f32 = 202021.25;

/// Dense per-pixel displacement field, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::Dimension(format!(
                "flow {width}x{height} needs {} values per component, got u={} v={}",
                width * height,
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite flow value".into()));
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self {
            width,
            height,
            u,
            v,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
        }
    }

    /// Bilinear resize of both components, rescaling displacements to the
    /// new pixel grid.
    fn upscale_to(&self, width: usize, height: usize) -> FlowField {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let up = resample_f64(&self.u, self.width, self.height, width, height);
        let vp = resample_f64(&self.v, self.width, self.height, width, height);
        FlowField {
            width,
            height,
            u: up.into_iter().map(|x| x * sx).collect(),
            v: vp.into_iter().map(|x| x * sy).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Horn–Schunck smoothness weight α.
    pub smoothness_weight: f64,
    pub pyramid_factor: f64,
    pub min_level_size: usize,
    pub warp_iterations: usize,
    pub solver_iterations: usize,
    pub convergence_tol: f64,
    /// SOR relaxation factor, in (0, 2).
    pub relaxation: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            smoothness_weight: 6.0,
            pyramid_factor: 0.5,
            min_level_size: 16,
            warp_iterations: 3,
            solver_iterations: 50,
            convergence_tol: 1e-4,
            relaxation: 1.8,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.smoothness_weight > 0.0
            && self.pyramid_factor > 0.0
            && self.pyramid_factor < 1.0
            && self.min_level_size > 0
            && self.warp_iterations > 0
            && self.solver_iterations > 0
            && self.convergence_tol > 0.0
            && self.relaxation > 0.0
            && self.relaxation < 2.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid flow parameters {self:?}")))
        }
    }
}

/// Gaussian image pyramid, finest level first.
///
/// Levels are produced until the next one would have a side shorter than
/// `min_level_size`; an input already below that size yields one level.
pub fn build_pyramid(img: &GrayImage, params: &FlowParams) -> Vec<GrayImage> {
    let mut levels = vec![img.clone()];
    let sigma = 1.0 / (2.0 * params.pyramid_factor).sqrt();
    loop {
        let last = levels.last().expect("non-empty");
        let w = (last.width() as f64 * params.pyramid_factor).round() as usize;
        let h = (last.height() as f64 * params.pyramid_factor).round() as usize;
        if w.min(h) < params.min_level_size || w == 0 || h == 0 {
            break;
        }
        let blurred = gaussian_blur(last.data(), last.width(), last.height(), sigma);
        let data = resample(&blurred, last.width(), last.height(), w, h);
        levels.push(GrayImage::new(w, h, data).expect("resampled dims"));
    }
    levels
}

/// `out(p) = img(p + flow(p))`, bilinear, clamped to the border.
pub fn warp_image(img: &GrayImage, flow: &FlowField) -> Result<GrayImage> {
    if img.width() != flow.width() || img.height() != flow.height() {
        return Err(Error::Dimension(format!(
            "image {}x{} vs flow {}x{}",
            img.width(),
            img.height(),
            flow.width(),
            flow.height()
        )));
    }
    let warped = warp_plane(img.data(), img.width(), img.height(), flow);
    GrayImage::new(
        img.width(),
        img.height(),
        warped.into_iter().map(|x| x as f32).collect(),
    )
}

/// Energy values recorded by one solver run (one pyramid level, one warp).
/// `energies[0]` is the energy before the first sweep.
#[derive(Debug, Clone)]
pub struct SolverTrace {
    pub level: usize,
    pub warp: usize,
    pub energies: Vec<f64>,
}

pub fn compute_flow(prev: &GrayImage, next: &GrayImage, params: &FlowParams) -> Result<FlowField> {
    solve(prev, next, params, false).map(|(f, _)| f)
}

/// Same as [`compute_flow`] but also records the discrete energy after
/// every solver sweep.
pub fn compute_flow_traced(
    prev: &GrayImage,
    next: &GrayImage,
    params: &FlowParams,
) -> Result<(FlowField, Vec<SolverTrace>)> {
    solve(prev, next, params, true)
}

fn solve(
    prev: &GrayImage,
    next: &GrayImage,
    params: &FlowParams,
    trace: bool,
) -> Result<(FlowField, Vec<SolverTrace>)> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::Dimension(format!(
            "frames {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    params.validate()?;
    if prev.width() == 0 || prev.height() == 0 {
        return Ok((FlowField::zeros(prev.width(), prev.height()), Vec::new()));
    }
    let pyr0 = build_pyramid(prev, params);
    let pyr1 = build_pyramid(next, params);
    let mut traces = Vec::new();
    let coarsest = pyr0.len() - 1;
    let mut flow = FlowField::zeros(pyr0[coarsest].width(), pyr0[coarsest].height());
    for level in (0..=coarsest).rev() {
        let (i0, i1) = (&pyr0[level], &pyr1[level]);
        if flow.width() != i0.width() || flow.height() != i0.height() {
            flow = flow.upscale_to(i0.width(), i0.height());
        }
        for warp in 0..params.warp_iterations {
            let energies = refine(i0, i1, &mut flow, params, trace);
            if trace {
                traces.push(SolverTrace {
                    level,
                    warp,
                    energies,
                });
            }
        }
    }
    Ok((flow, traces))
}

/// Linearized system at one warp: per-pixel gradients and the data-term
/// constant, all on the scaled intensity range.
struct Linearization {
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
    u0: Vec<f64>,
    v0: Vec<f64>,
}

impl Linearization {
    fn new(i0: &GrayImage, i1: &GrayImage, flow: &FlowField) -> Self {
        let (w, h) = (i0.width(), i0.height());
        let warped = warp_plane(i1.data(), w, h, flow);
        let base: Vec<f64> = i0.data().iter().map(|&x| f64::from(x)).collect();
        let (gx0, gy0) = central_gradients(&base, w, h);
        let (gx1, gy1) = central_gradients(&warped, w, h);
        let s = INTENSITY_SCALE;
        let ix = gx0.iter().zip(&gx1).map(|(a, b)| 0.5 * (a + b) * s).collect();
        let iy = gy0.iter().zip(&gy1).map(|(a, b)| 0.5 * (a + b) * s).collect();
        let it = warped.iter().zip(&base).map(|(a, b)| (a - b) * s).collect();
        Self {
            ix,
            iy,
            it,
            u0: flow.u.clone(),
            v0: flow.v.clone(),
        }
    }

    fn energy(&self, flow: &FlowField, alpha2: f64) -> f64 {
        let (w, h) = (flow.width, flow.height);
        let mut e = 0.0;
        for i in 0..w * h {
            let r = self.ix[i] * (flow.u[i] - self.u0[i]) + self.iy[i] * (flow.v[i] - self.v0[i]) + self.it[i];
            e += r * r;
        }
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    s += sq(flow.u[i] - flow.u[i + 1]) + sq(flow.v[i] - flow.v[i + 1]);
                }
                if y + 1 < h {
                    s += sq(flow.u[i] - flow.u[i + w]) + sq(flow.v[i] - flow.v[i + w]);
                }
            }
        }
        e + alpha2 * s
    }
}

#[inline]
fn sq(x: f64) -> f64 {
    x * x
}

/// One warp: relinearize around `flow` and run SOR sweeps until the largest
/// update falls below tolerance.
fn refine(i0: &GrayImage, i1: &GrayImage, flow: &mut FlowField, params: &FlowParams, trace: bool) -> Vec<f64> {
    let lin = Linearization::new(i0, i1, flow);
    let (w, h) = (flow.width, flow.height);
    let a = params.smoothness_weight * params.smoothness_weight;
    let omega = params.relaxation;
    let mut energies = Vec::new();
    if trace {
        energies.push(lin.energy(flow, a));
    }
    for _ in 0..params.solver_iterations {
        let mut max_change = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (mut n, mut su, mut sv) = (0.0, 0.0, 0.0);
                if x > 0 {
                    n += 1.0;
                    su += flow.u[i - 1];
                    sv += flow.v[i - 1];
                }
                if x + 1 < w {
                    n += 1.0;
                    su += flow.u[i + 1];
                    sv += flow.v[i + 1];
                }
                if y > 0 {
                    n += 1.0;
                    su += flow.u[i - w];
                    sv += flow.v[i - w];
                }
                if y + 1 < h {
                    n += 1.0;
                    su += flow.u[i + w];
                    sv += flow.v[i + w];
                }
                if n == 0.0 {
                    continue;
                }
                let (gx, gy) = (lin.ix[i], lin.iy[i]);
                let c = lin.it[i] - gx * lin.u0[i] - gy * lin.v0[i];
                let a11 = gx * gx + a * n;
                let a22 = gy * gy + a * n;
                let a12 = gx * gy;
                let b1 = a * su - gx * c;
                let b2 = a * sv - gy * c;
                let det = a11 * a22 - a12 * a12;
                let ustar = (a22 * b1 - a12 * b2) / det;
                let vstar = (a11 * b2 - a12 * b1) / det;
                let du = omega * (ustar - flow.u[i]);
                let dv = omega * (vstar - flow.v[i]);
                flow.u[i] += du;
                flow.v[i] += dv;
                max_change = max_change.max(du.abs()).max(dv.abs());
            }
        }
        if trace {
            energies.push(lin.energy(flow, a));
        }
        if max_change < params.convergence_tol {
            break;
        }
    }
    energies
}

fn warp_plane(data: &[f32], w: usize, h: usize, flow: &FlowField) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.push(sample_plane(
                data,
                w,
                h,
                x as f64 + flow.u[i],
                y as f64 + flow.v[i],
            ));
        }
    }
    out
}

fn central_gradients(data: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            gx[y * w + x] = 0.5 * (data[y * w + xp] - data[y * w + xm]);
            gy[y * w + x] = 0.5 * (data[yp * w + x] - data[ym * w + x]);
        }
    }
    (gx, gy)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= sum);
    k
}

fn gaussian_blur(data: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = clampi(x as isize + j as isize - r, w);
                acc += kv * f64::from(data[y * w + xx]);
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = clampi(y as isize + j as isize - r, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Half-pixel-centered bilinear resampling of an `f32` plane.
fn resample(data: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    let (sx, sy) = (w as f64 / ow as f64, h as f64 / oh as f64);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..ow {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out.push(sample_plane(data, w, h, fx, fy) as f32);
        }
    }
    out
}

fn resample_f64(data: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let (sx, sy) = (w as f64 / ow as f64, h as f64 / oh as f64);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = data[y0 * w + x0] * (1.0 - tx) + data[y0 * w + x1] * tx;
            let bot = data[y1 * w + x0] * (1.0 - tx) + data[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Color coding

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
pub const WHEEL_BINS: usize = RY + YG + GC + CB + BM + MR;

/// The 55-entry Middlebury color wheel, RGB in `0..=255`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_BINS);
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor();
    for i in 0..RY {
        wheel.push([255.0, ramp(i, RY), 0.0]);
    }
    for i in 0..YG {
        wheel.push([255.0 - ramp(i, YG), 255.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 255.0, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0.0, 255.0 - ramp(i, CB), 255.0]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0.0, 255.0]);
    }
    for i in 0..MR {
        wheel.push([255.0, 0.0, 255.0 - ramp(i, MR)]);
    }
    wheel
}

/// 8-bit RGB rendering of a flow field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl ColorImage {
    /// Planar float copy with values `byte / 255`.
    pub fn to_image(&self) -> Image {
        let n = self.width * self.height;
        let mut data = vec![0.0f32; 3 * n];
        for (i, px) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = f32::from(px[c]) / 255.0;
            }
        }
        Image::new(3, self.width, self.height, data).expect("dims")
    }
}

/// Middlebury color coding. Hue follows `atan2(-v, -u)`, saturation grows
/// with `|flow| / max_norm`; vectors beyond `max_norm` are darkened. When
/// `max_norm` is `None` the field's own maximum magnitude is used.
pub fn flow_to_color(flow: &FlowField, max_norm: Option<f64>) -> ColorImage {
    let wheel = color_wheel();
    let norm = max_norm
        .unwrap_or_else(|| flow.max_magnitude())
        .max(f64::EPSILON);
    let pixels = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| wheel_color(&wheel, u / norm, v / norm))
        .collect();
    ColorImage {
        width: flow.width,
        height: flow.height,
        pixels,
    }
}

fn wheel_color(wheel: &[[f64; 3]], u: f64, v: f64) -> [u8; 3] {
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (WHEEL_BINS - 1) as f64;
    let k0 = fk.floor() as usize;
    let k1 = if k0 + 1 == WHEEL_BINS { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for (b, o) in out.iter_mut().enumerate() {
        let c0 = wheel[k0][b] / 255.0;
        let c1 = wheel[k1][b] / 255.0;
        let mut col = (1.0 - f) * c0 + f * c1;
        if rad <= 1.0 {
            col = 1.0 - rad * (1.0 - col);
        } else {
            col *= 0.75;
        }
        *o = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

// ---------------------------------------------------------------------------
// .flo I/O

/// Encode as `.flo`. Components are stored as `f32`, so values not exactly
/// representable in single precision are rounded.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let n = flow.width * flow.height;
    let mut out = Vec::with_capacity(12 + 8 * n);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..n {
        out.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        out.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("truncated .flo header ({} bytes)", bytes.len())));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {:?}", &bytes[..4])));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w < 0 || h < 0 {
        return Err(Error::Format(format!("negative .flo size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("oversized .flo".into()))?;
    let expected = 12 + 8 * n;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{w}x{h} .flo payload needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let o = 12 + 8 * i;
        u.push(f64::from(f32::from_le_bytes(word(o))));
        v.push(f64::from(f32::from_le_bytes(word(o + 4))));
    }
    FlowField::new(w, h, u, v)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}
