//! PSNR, SSIM, flow-warped temporal consistency and distance-map difference.

use serde::{Deserialize, Serialize};

use crate::data::extract_sketch;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Float, Tensor};

/// Denominator guard for the normalized errors in [`tc`].
pub const TC_EPS: f64 = 1e-8;

fn dims<T: Float>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err!("expected [C, H, W], got {s:?}")),
    }
}

/// Bilinear gather at `p + flow(p)`; samples outside the image clamp to the border.
pub fn warp<T: Float>(frame: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims(frame)?;
    if flow.shape() != [2, h, w] {
        return Err(shape_err!("flow {:?} does not match frame {:?}", flow.shape(), frame.shape()));
    }
    let hw = h * w;
    let (fd, src) = (flow.data(), frame.data());
    let mut out = vec![T::zero(); c * hw];
    for p in 0..hw {
        let x = ((p % w) as f64 + fd[p].as_f64()).clamp(0.0, (w - 1) as f64);
        let y = ((p / w) as f64 + fd[hw + p].as_f64()).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (T::lit(x - x0 as f64), T::lit(y - y0 as f64));
        let (bx, by) = (T::one() - ax, T::one() - ay);
        for ch in 0..c {
            let v = |yy: usize, xx: usize| src[ch * hw + yy * w + xx];
            out[ch * hw + p] = by * (bx * v(y0, x0) + ax * v(y0, x1)) + ay * (bx * v(y1, x0) + ax * v(y1, x1));
        }
    }
    Tensor::new([c, h, w], out)
}

/// Bilinear resize with half-pixel centres.
pub fn resize<T: Float>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("cannot resize to {out_h}x{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, out_w, w)).collect();
    let ys: Vec<_> = (0..out_h).map(|y| coord(y, out_h, h)).collect();
    Ok(Tensor::from_fn([c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let (y, x) = ((i / out_w) % out_h, i % out_w);
        let ((y0, y1, ay), (x0, x1, ax)) = (ys[y], xs[x]);
        let v = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx].as_f64();
        T::lit((1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1)) + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1)))
    }))
}

/// Resizes a flow field and rescales its displacements to the new grid.
pub fn resize_flow<T: Float>(flow: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (_, h, w) = dims(flow)?;
    let mut r = resize(flow, out_h, out_w)?;
    let n = out_h * out_w;
    let (sx, sy) = (T::lit(out_w as f64 / w as f64), T::lit(out_h as f64 / h as f64));
    let d = r.data_mut();
    for v in &mut d[..n] {
        *v = *v * sx;
    }
    for v in &mut d[n..] {
        *v = *v * sy;
    }
    Ok(r)
}

fn norm<T: Float>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

fn diff_norm<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluation resolution (square); `0` keeps the native size.
    pub resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { resolution: 256 }
    }
}

impl EvalConfig {
    fn size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.resolution == 0 {
            (h, w)
        } else {
            (self.resolution, self.resolution)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcReport {
    pub value: f64,
    pub pairs: usize,
    /// Pairs where a denominator fell to the guard (black frame or a
    /// perfectly warped original).
    pub guarded: usize,
}

/// Mean over frame pairs of the ratio between the generated and the original
/// video's normalized warp errors `‖warp(I^t) - I^{t+1}‖ / ‖I^{t+1}‖`.
pub fn tc<T: Float>(generated: &[Tensor<T>], original: &[Tensor<T>], flows: &[Tensor<T>], cfg: &EvalConfig) -> Result<TcReport> {
    if generated.len() < 2 || generated.len() != original.len() {
        return Err(invalid!(
            "TC needs two equally long sequences of at least 2 frames ({} vs {})",
            generated.len(),
            original.len()
        ));
    }
    if flows.len() != generated.len() - 1 {
        return Err(invalid!("{} flows for {} frames", flows.len(), generated.len()));
    }
    let (_, h, w) = dims(&original[0])?;
    let (rh, rw) = cfg.size(h, w);
    let prep = |f: &Tensor<T>| resize(f, rh, rw);
    let mut guarded = 0;
    let mut sum = 0.0;
    let normalized_err = |seq: &[Tensor<T>], t: usize, flow: &Tensor<T>| -> Result<(f64, bool)> {
        let (a, b) = (prep(&seq[t])?, prep(&seq[t + 1])?);
        let err = diff_norm(&warp(&a, flow)?, &b);
        let den = norm(&b);
        Ok((err / den.max(TC_EPS), den < TC_EPS))
    };
    for (t, flow) in flows.iter().enumerate() {
        let flow = resize_flow(flow, rh, rw)?;
        let (eg, g_guard) = normalized_err(generated, t, &flow)?;
        let (eo, o_guard) = normalized_err(original, t, &flow)?;
        let ratio = if eg < TC_EPS && eo < TC_EPS {
            1.0
        } else {
            eg / eo.max(TC_EPS)
        };
        if g_guard || o_guard || eo < TC_EPS {
            guarded += 1;
        }
        sum += ratio;
    }
    Ok(TcReport {
        value: sum / flows.len() as f64,
        pairs: flows.len(),
        guarded,
    })
}

/// Squared distance transform of one line with sample spacing `s`
/// (lower envelope of parabolas); `None` marks positions without a source.
fn edt_1d(f: &[Option<f64>], s: f64, out: &mut [Option<f64>]) {
    let n = f.len();
    let s2 = s * s;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        let Some(fq) = f[q] else { continue };
        let qf = q as f64;
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let lf = last as f64;
            let fl = f[last].expect("envelope holds sources only");
            let cross = ((fq + s2 * qf * qf) - (fl + s2 * lf * lf)) / (2.0 * s2 * (qf - lf));
            if cross <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(cross);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = Some(s2 * d * d + f[v[k]].expect("source"));
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel,
/// with pixel spacings `sx` (columns) and `sy` (rows).
pub fn edt_spaced(mask: &[bool], h: usize, w: usize, sx: f64, sy: f64) -> Result<Vec<f64>> {
    if mask.len() != h * w {
        return Err(shape_err!("mask of {} pixels for {h}x{w}", mask.len()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(invalid!("distance transform of an empty mask"));
    }
    let mut cols = vec![None; h * w];
    let (mut f, mut out) = (vec![None; h], vec![None; h]);
    for x in 0..w {
        for y in 0..h {
            f[y] = mask[y * w + x].then_some(0.0);
        }
        edt_1d(&f, sy, &mut out);
        for y in 0..h {
            cols[y * w + x] = out[y];
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut row_out = vec![None; w];
    for y in 0..h {
        edt_1d(&cols[y * w..(y + 1) * w], sx, &mut row_out);
        for x in 0..w {
            dist[y * w + x] = row_out[x].expect("every row sees some column source").sqrt();
        }
    }
    Ok(dist)
}

pub fn edt(mask: &[bool], h: usize, w: usize) -> Result<Vec<f64>> {
    edt_spaced(mask, h, w, 1.0, 1.0)
}

fn sketch_mask<T: Float>(sketch: &Tensor<T>) -> Vec<bool> {
    sketch.data().iter().map(|v| v.as_f64() > 0.5).collect()
}

/// RMSE between the distance maps of two line masks.
pub fn edmap_rmse(a: &[bool], b: &[bool], h: usize, w: usize, sx: f64, sy: f64) -> Result<f64> {
    let (da, db) = (edt_spaced(a, h, w, sx, sy)?, edt_spaced(b, h, w, sx, sy)?);
    let sq: f64 = da.iter().zip(&db).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sq / (h * w) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdmdReport {
    /// Mean over scored frames; NaN when every frame was skipped.
    pub value: f64,
    pub frames: usize,
    /// Frames skipped because a sketch had no line pixels.
    pub skipped: usize,
}

/// Re-extracts sketches from the generated frames and compares distance maps
/// with the input sketches. Distances are measured in pixels of the
/// evaluation resolution.
pub fn edmd<T: Float>(generated: &[Tensor<T>], sketches: &[Tensor<T>], cfg: &EvalConfig) -> Result<EdmdReport> {
    if generated.len() != sketches.len() || generated.is_empty() {
        return Err(invalid!("EDMD needs one sketch per frame ({} vs {})", generated.len(), sketches.len()));
    }
    let mut sum = 0.0;
    let mut scored = 0;
    for (frame, input) in generated.iter().zip(sketches) {
        let (_, h, w) = dims(frame)?;
        if input.shape() != [1, h, w] {
            return Err(shape_err!("sketch {:?} for frame {:?}", input.shape(), frame.shape()));
        }
        let (rh, rw) = cfg.size(h, w);
        let (a, b) = (sketch_mask(&extract_sketch(frame)), sketch_mask(input));
        if !a.iter().any(|&m| m) || !b.iter().any(|&m| m) {
            continue;
        }
        sum += edmap_rmse(&a, &b, h, w, rw as f64 / w as f64, rh as f64 / h as f64)?;
        scored += 1;
    }
    Ok(EdmdReport {
        value: if scored == 0 { f64::NAN } else { sum / scored as f64 },
        frames: generated.len(),
        skipped: generated.len() - scored,
    })
}

/// Peak 1; `+inf` for identical inputs.
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr of {:?} and {:?}", a.shape(), b.shape()));
    }
    let mse = diff_norm(a, b).powi(2) / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of one plane.
fn blur(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and window positions (11x11 Gaussian, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, data range 1).
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("ssim of {:?} and {:?}", a.shape(), b.shape()));
    }
    let (c, h, w) = dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window();
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (ma, mb) = (blur(&pa, h, w, &g), blur(&pb, h, w, &g));
        let (saa, sbb, sab) = (
            blur(&prod(&pa, &pa), h, w, &g),
            blur(&prod(&pb, &pb), h, w, &g),
            blur(&prod(&pa, &pb), h, w, &g),
        );
        for i in 0..ma.len() {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let va = saa[i] - mu_a * mu_a;
            let vb = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-clip scores as written by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipScores {
    pub psnr: f64,
    pub ssim: f64,
    pub tc: TcReport,
    pub edmd: EdmdReport,
}

/// PSNR and SSIM averaged over frames (infinite PSNR frames are excluded from
/// the mean unless all frames are identical), plus TC and EDMD.
pub fn score_clip<T: Float>(
    generated: &[Tensor<T>],
    original: &[Tensor<T>],
    flows: &[Tensor<T>],
    sketches: &[Tensor<T>],
    cfg: &EvalConfig,
) -> Result<ClipScores> {
    if generated.len() != original.len() {
        return Err(invalid!("{} generated frames for {} originals", generated.len(), original.len()));
    }
    let mut finite = Vec::new();
    let mut ssim_sum = 0.0;
    for (g, o) in generated.iter().zip(original) {
        let p = psnr(g, o)?;
        if p.is_finite() {
            finite.push(p);
        }
        ssim_sum += ssim(g, o)?;
    }
    let psnr_mean = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(ClipScores {
        psnr: psnr_mean,
        ssim: ssim_sum / generated.len() as f64,
        tc: tc(generated, original, flows, cfg)?,
        edmd: edmd(generated, sketches, cfg)?,
    })
}
