// Raw forward/backward kernels on slices. Shapes are validated by the graph
// layer before these run.

use super::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col<T: Float>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, input_grad: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = W * im2col(x[b]) + bias`.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    out_ch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_sz = g.c * g.h * g.w;
    let out_sz = out_ch * g.col_cols();
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(g.col_cols()).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(out_ch, g.col_rows(), g.col_cols(), weight, false, rhs, false, beta, ob);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    batch: usize,
    weight: &[T],
    out_ch: usize,
    g: &ConvGeom,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let in_sz = g.c * g.h * g.w;
    let npos = g.col_cols();
    let out_sz = out_ch * npos;
    let krows = g.col_rows();
    let mut gi = need_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut gb = need_bias.then(|| vec![T::zero(); out_ch]);
    let mut cols = vec![T::zero(); krows * npos];
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let gob = &grad_out[b * out_sz..(b + 1) * out_sz];
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in gob.chunks(npos).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            // dW += dY * cols^T
            if g.is_pointwise() {
                T::gemm(out_ch, npos, krows, gob, false, xb, true, T::one(), gw);
            } else {
                im2col(xb, g, &mut cols);
                T::gemm(out_ch, npos, krows, gob, false, &cols, true, T::one(), gw);
            }
        }
        if let Some(gi) = gi.as_mut() {
            let gib = &mut gi[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(krows, out_ch, npos, weight, true, gob, false, T::one(), gib);
            } else {
                T::gemm(krows, out_ch, npos, weight, true, gob, false, T::zero(), &mut cols);
                col2im(&cols, g, gib);
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Batched scaled-dot-product attention. Returns (output, probabilities).
///
/// `bias`, when present, has `batch * tk` entries (one logit offset per key).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    batch: usize,
    tq: usize,
    tk: usize,
    d: usize,
    scale: T,
) -> Result<(Vec<T>, Vec<T>), String> {
    let mut probs = vec![T::zero(); batch * tq * tk];
    let mut out = vec![T::zero(); batch * tq * d];
    for b in 0..batch {
        let qb = &q[b * tq * d..(b + 1) * tq * d];
        let kb = &k[b * tk * d..(b + 1) * tk * d];
        let vb = &v[b * tk * d..(b + 1) * tk * d];
        let pb = &mut probs[b * tq * tk..(b + 1) * tq * tk];
        T::gemm(tq, d, tk, qb, false, kb, true, T::zero(), pb);
        for row in pb.chunks_mut(tk) {
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if let Some(bias) = bias {
                    *s += bias[b * tk + j];
                }
                if !s.is_finite() {
                    return Err("non-finite attention logit".into());
                }
                if *s > max {
                    max = *s;
                }
            }
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let inv = T::one() / total;
            for s in row.iter_mut() {
                *s *= inv;
            }
        }
        let ob = &mut out[b * tq * d..(b + 1) * tq * d];
        T::gemm(tq, tk, d, pb, false, vb, false, T::zero(), ob);
    }
    Ok((out, probs))
}

pub(crate) struct AttnGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    batch: usize,
    tq: usize,
    tk: usize,
    d: usize,
    scale: T,
) -> AttnGrads<T> {
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); tq * tk];
    for b in 0..batch {
        let qs = b * tq * d..(b + 1) * tq * d;
        let ks = b * tk * d..(b + 1) * tk * d;
        let pb = &probs[b * tq * tk..(b + 1) * tq * tk];
        let gob = &grad_out[qs.clone()];
        // dV = P^T dO
        T::gemm(tk, tq, d, pb, true, gob, false, T::zero(), &mut gv[ks.clone()]);
        // dP = dO V^T
        T::gemm(tq, d, tk, gob, false, &v[ks.clone()], true, T::zero(), &mut dp);
        // dS = P * (dP - rowsum(dP * P)), folded with the logit scale
        for (prow, dprow) in pb.chunks(tk).zip(dp.chunks_mut(tk)) {
            let dot: T = prow.iter().zip(dprow.iter()).map(|(&p, &g)| p * g).sum();
            for (g, &p) in dprow.iter_mut().zip(prow) {
                *g = p * (*g - dot) * scale;
            }
        }
        T::gemm(tq, tk, d, &dp, false, &k[ks.clone()], false, T::zero(), &mut gq[qs.clone()]);
        T::gemm(tk, tq, d, &dp, true, &q[qs], false, T::zero(), &mut gk[ks]);
    }
    AttnGrads {
        q: gq,
        k: gk,
        v: gv,
    }
}

/// Group normalization over `[batch, channels, spatial]`. Returns
/// `(output, mean, rstd)` with one mean/rstd per (batch, group).
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<T: Float>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = channels / groups;
    let gsize = cpg * spatial;
    let count = T::lit(gsize as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(batch * groups);
    let mut rstds = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for grp in 0..groups {
            let start = (b * channels + grp * cpg) * spatial;
            let xs = &x[start..start + gsize];
            let mean = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for ci in 0..cpg {
                let c = grp * cpg + ci;
                let off = ci * spatial;
                for s in 0..spatial {
                    let xhat = (xs[off + s] - mean) * rstd;
                    out[start + off + s] = xhat * gamma[c] + beta[c];
                }
            }
        }
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Float>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    grad_out: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = channels / groups;
    let gsize = cpg * spatial;
    let count = T::lit(gsize as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for grp in 0..groups {
            let idx = b * groups + grp;
            let (mean, rstd) = (means[idx], rstds[idx]);
            let start = (b * channels + grp * cpg) * spatial;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let c = grp * cpg + ci;
                for s in 0..spatial {
                    let i = start + ci * spatial + s;
                    let xhat = (x[i] - mean) * rstd;
                    let dy = grad_out[i];
                    ggamma[c] += dy * xhat;
                    gbeta[c] += dy;
                    let dxhat = dy * gamma[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            for ci in 0..cpg {
                let c = grp * cpg + ci;
                for s in 0..spatial {
                    let i = start + ci * spatial + s;
                    let xhat = (x[i] - mean) * rstd;
                    gx[i] = rstd * (grad_out[i] * gamma[c] - m1 - xhat * m2);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-major strides for `shape`.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Materializes `x` (with `shape`) permuted by `axes`.
pub(crate) fn permute<T: Float>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // Stride into the input for each output axis.
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(x[offset]);
        // Increment the multi-index, innermost axis first.
        let mut axis = rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
