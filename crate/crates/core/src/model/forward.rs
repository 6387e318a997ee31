use super::{amplify_bias, validate_modes, AmplifyMode, AttentionMode, DenoiserConfig};
use crate::edm;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{BoundParams, Float, Graph, ParamStore, Tensor, Var};

/// One batched call of the network `U`.
#[derive(Debug, Clone)]
pub struct ForwardInput {
    /// `[E, 2 * latent, h, w]`: conditioning latent then the `c_in`-scaled
    /// noised latent, per entry.
    pub x: Var,
    /// `[E, sketch_channels, 4h, 4w]`.
    pub sketches: Var,
    pub c_noise: f64,
    /// Size of the reference bundle at the front of the batch.
    pub refs: usize,
    /// One directive per video frame.
    pub modes: Vec<AttentionMode>,
    pub use_controlnet: bool,
}

/// Key/value sources for one video frame's spatial attention, as entry
/// indices. `boost` marks the second source as amplified.
#[derive(Debug, Clone, Copy)]
enum Keys {
    Own,
    Pair { a: usize, b: usize, boost: Option<f64> },
}

struct Net<'a, T: Float> {
    g: &'a mut Graph<T>,
    p: &'a BoundParams,
    cfg: &'a DenoiserConfig,
    refs: usize,
    entries: usize,
    keys: Vec<Keys>,
}

fn key_plan(cfg: &DenoiserConfig, refs: usize, modes: &[AttentionMode]) -> Vec<Keys> {
    modes
        .iter()
        .enumerate()
        .map(|(idx, mode)| {
            let own = refs + idx;
            if !cfg.reference_attention {
                return Keys::Own;
            }
            match *mode {
                AttentionMode::Standard => Keys::Pair { a: own, b: 0, boost: None },
                AttentionMode::OverlapAmplified { alpha } => Keys::Pair {
                    a: own,
                    b: idx + 1,
                    boost: Some(alpha),
                },
                AttentionMode::PrevReference { shift } => Keys::Pair {
                    a: own - shift,
                    b: 0,
                    boost: None,
                },
            }
        })
        .collect()
}

impl<T: Float> Net<'_, T> {
    fn w(&self, name: &str) -> Result<Var> {
        self.p.var(name)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (self.w(&format!("{name}.w"))?, self.w(&format!("{name}.b"))?);
        self.g.conv2d(x, w, Some(b), (stride, stride), (pad, pad))
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.w(&format!("{name}.g"))?, self.w(&format!("{name}.b"))?);
        self.g.group_norm(x, gamma, beta, self.cfg.norm_groups)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.w(&format!("{name}.w"))?;
        let b = self.p.opt(&format!("{name}.b"));
        self.g.linear(x, w, b)
    }

    fn embed(&mut self, prefix: &str, c_noise: f64) -> Result<Var> {
        let width = self.cfg.base_channels;
        let half = width / 2;
        let mut row = Vec::with_capacity(width);
        let freq = |k: usize| (-(10000f64.ln()) * k as f64 / half as f64).exp();
        row.extend((0..half).map(|k| T::lit((c_noise * freq(k)).cos())));
        row.extend((0..half).map(|k| T::lit((c_noise * freq(k)).sin())));
        let e = self.g.constant(Tensor::new([1, width], row)?);
        let e = self.linear(&format!("{prefix}emb.l1"), e)?;
        let e = self.g.silu(e);
        self.linear(&format!("{prefix}emb.l2"), e)
    }

    fn res(&mut self, name: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.conv1"), h, 1, 1)?;
        let c = self.g.shape(h)[1];
        let e = self.g.silu(emb);
        let e = self.linear(&format!("{name}.emb"), e)?;
        let e = self.g.reshape(e, &[c])?;
        let h = self.g.add_bias(h, e)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.conv2"), h, 1, 1)?;
        let skip = if self.p.opt(&format!("{name}.skip.w")).is_some() {
            self.conv(&format!("{name}.skip"), x, 1, 0)?
        } else {
            x
        };
        self.g.add(skip, h)
    }

    fn stage(&mut self, name: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.res(&format!("{name}.res"), x, emb)?;
        let h = self.temporal(name, h)?;
        self.spatial_attention(&format!("{name}.sattn"), h)
    }

    /// Temporal convolution and temporal attention on the video entries;
    /// reference entries pass through untouched.
    fn temporal(&mut self, name: &str, x: Var) -> Result<Var> {
        let (r, e) = (self.refs, self.entries);
        let refs = self.g.slice(x, 0, 0, r)?;
        let vid = self.g.slice(x, 0, r, e)?;
        let s = self.g.shape(vid).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);

        let t = self.norm(&format!("{name}.tconv.norm"), vid)?;
        let t = self.g.silu(t);
        let t = self.g.permute(t, &[1, 0, 2, 3])?;
        let t = self.g.reshape(t, &[1, c, n, h, w])?;
        let (tw, tb) = (self.w(&format!("{name}.tconv.w"))?, self.w(&format!("{name}.tconv.b"))?);
        let t = self.g.temporal_conv3d(t, tw, Some(tb))?;
        let t = self.g.reshape(t, &[c, n, h, w])?;
        let t = self.g.permute(t, &[1, 0, 2, 3])?;
        let vid = self.g.add(vid, t)?;

        let a = format!("{name}.tattn");
        let t = self.norm(&format!("{a}.norm"), vid)?;
        let t = self.g.reshape(t, &[n, c, h * w])?;
        let t = self.g.permute(t, &[2, 0, 1])?;
        let t = self.g.reshape(t, &[h * w * n, c])?;
        let mut qkv = [t; 3];
        for (slot, proj) in qkv.iter_mut().zip(["q", "k", "v"]) {
            let y = self.linear(&format!("{a}.{proj}"), t)?;
            *slot = self.g.reshape(y, &[h * w, n, c])?;
        }
        let o = self.mha(qkv[0], qkv[1], qkv[2], None)?;
        let o = self.g.reshape(o, &[h * w * n, c])?;
        let o = self.linear(&format!("{a}.out"), o)?;
        let o = self.g.reshape(o, &[h * w, n, c])?;
        let o = self.g.permute(o, &[1, 2, 0])?;
        let o = self.g.reshape(o, &[n, c, h, w])?;
        let vid = self.g.add(vid, o)?;
        self.g.concat(&[refs, vid], 0)
    }

    fn spatial_attention(&mut self, name: &str, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (e, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let (r, n) = (self.refs, self.entries - self.refs);
        let t = self.norm(&format!("{name}.norm"), x)?;
        let t = self.g.reshape(t, &[e, c, hw])?;
        let t = self.g.permute(t, &[0, 2, 1])?;
        let t = self.g.reshape(t, &[e * hw, c])?;
        let mut qkv = [t; 3];
        for (slot, proj) in qkv.iter_mut().zip(["q", "k", "v"]) {
            let y = self.linear(&format!("{name}.{proj}"), t)?;
            *slot = self.g.reshape(y, &[e, hw, c])?;
        }
        let [q, k, v] = qkv;

        let rq = self.g.slice(q, 0, 0, r)?;
        let rk = self.g.slice(k, 0, 0, r)?;
        let rv = self.g.slice(v, 0, 0, r)?;
        let ref_out = self.mha(rq, rk, rv, None)?;

        let vq = self.g.slice(q, 0, r, e)?;
        let vid_out = if self.keys.iter().all(|k| matches!(k, Keys::Own)) {
            let vk = self.g.slice(k, 0, r, e)?;
            let vv = self.g.slice(v, 0, r, e)?;
            self.mha(vq, vk, vv, None)?
        } else {
            let mut ks = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            let mut bias = Vec::with_capacity(n * 2 * hw);
            let mut any_bias = false;
            for j in 0..n {
                let Keys::Pair { a, b, boost } = self.keys[j] else {
                    return Err(invalid!("mixed attention key plans in one batch"));
                };
                let ka = self.g.slice(k, 0, a, a + 1)?;
                let mut kb = self.g.slice(k, 0, b, b + 1)?;
                let va = self.g.slice(v, 0, a, a + 1)?;
                let vb = self.g.slice(v, 0, b, b + 1)?;
                let mut extra = T::zero();
                if let Some(alpha) = boost {
                    match self.cfg.amplify {
                        AmplifyMode::LogitBias => {
                            extra = T::lit(amplify_bias(&AttentionMode::OverlapAmplified { alpha }));
                            any_bias = true;
                        }
                        AmplifyMode::KeyScale => kb = self.g.scale(kb, T::lit(alpha.ln())),
                    }
                }
                bias.extend(std::iter::repeat(T::zero()).take(hw));
                bias.extend(std::iter::repeat(extra).take(hw));
                ks.push(self.g.concat(&[ka, kb], 1)?);
                vs.push(self.g.concat(&[va, vb], 1)?);
            }
            let kk = self.g.concat(&ks, 0)?;
            let vv = self.g.concat(&vs, 0)?;
            self.mha(vq, kk, vv, any_bias.then_some(bias))?
        };

        let o = self.g.concat(&[ref_out, vid_out], 0)?;
        let o = self.g.reshape(o, &[e * hw, c])?;
        let o = self.linear(&format!("{name}.out"), o)?;
        let o = self.g.reshape(o, &[e, hw, c])?;
        let o = self.g.permute(o, &[0, 2, 1])?;
        let o = self.g.reshape(o, &[e, c, h, w])?;
        self.g.add(x, o)
    }

    /// Multi-head attention over `[B, T, C]` operands.
    fn mha(&mut self, q: Var, k: Var, v: Var, bias: Option<Vec<T>>) -> Result<Var> {
        let (b, tq, c) = {
            let s = self.g.shape(q);
            (s[0], s[1], s[2])
        };
        let tk = self.g.shape(k)[1];
        let heads = self.cfg.heads(c);
        if heads == 1 {
            return self.g.attention(q, k, v, bias.as_deref());
        }
        let d = c / heads;
        let split = |g: &mut Graph<T>, x: Var, t: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, t, heads, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * heads, t, d])
        };
        let q = split(self.g, q, tq)?;
        let k = split(self.g, k, tk)?;
        let v = split(self.g, v, tk)?;
        let bias = bias.map(|bv| {
            let mut out = Vec::with_capacity(bv.len() * heads);
            for row in bv.chunks(tk) {
                for _ in 0..heads {
                    out.extend_from_slice(row);
                }
            }
            out
        });
        let o = self.g.attention(q, k, v, bias.as_deref())?;
        let o = self.g.reshape(o, &[b, heads, tq, d])?;
        let o = self.g.permute(o, &[0, 2, 1, 3])?;
        self.g.reshape(o, &[b, tq, c])
    }

    fn encoder(&mut self, prefix: &str, x: Var, emb: Var) -> Result<(Vec<Var>, Var)> {
        let levels = self.cfg.levels();
        let mut h = self.conv(&format!("{prefix}conv_in"), x, 1, 1)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.stage(&format!("{prefix}enc.{l}"), h, emb)?;
            skips.push(h);
            if l + 1 < levels {
                h = self.conv(&format!("{prefix}enc.{l}.down"), h, 2, 1)?;
            }
        }
        let mid = self.res(&format!("{prefix}mid.res"), h, emb)?;
        Ok((skips, mid))
    }
}

/// Runs `U` on a batch of reference-bundle entries followed by video frames.
/// Returns `[E, latent, h, w]`.
pub fn forward<T: Float>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &DenoiserConfig,
    input: &ForwardInput,
) -> Result<Var> {
    let xs = g.shape(input.x).to_vec();
    let lat = cfg.latent_channels;
    if xs.len() != 4 || xs[1] != 2 * lat {
        return Err(shape_err!(
            "denoiser input {:?} must be [E, {}, h, w]",
            xs,
            2 * lat
        ));
    }
    let (e, h, w) = (xs[0], xs[2], xs[3]);
    if input.refs == 0 || input.refs >= e {
        return Err(invalid!(
            "{} entries cannot hold a bundle of {} plus video frames",
            e,
            input.refs
        ));
    }
    let n = e - input.refs;
    if n != cfg.frames || input.modes.len() != n {
        return Err(invalid!(
            "expected {} video frames with one attention mode each, got {n} frames and {} modes",
            cfg.frames,
            input.modes.len()
        ));
    }
    validate_modes(&input.modes, input.refs)?;
    cfg.check_latent_size(h, w)?;
    let ss = g.shape(input.sketches).to_vec();
    let want = [e, cfg.sketch_channels, 4 * h, 4 * w];
    if ss != want {
        return Err(shape_err!("sketches {:?}, expected {:?}", ss, want));
    }
    if !input.c_noise.is_finite() {
        return Err(invalid!("noise embedding input must be finite, got {}", input.c_noise));
    }

    let mut net = Net {
        g,
        p,
        cfg,
        refs: input.refs,
        entries: e,
        keys: key_plan(cfg, input.refs, &input.modes),
    };
    let emb = net.embed("", input.c_noise)?;
    let (mut skips, mut mid) = net.encoder("", input.x, emb)?;

    if input.use_controlnet {
        let s = net.conv("ctrl.sketch.0", input.sketches, 2, 1)?;
        let s = net.g.silu(s);
        let s = net.conv("ctrl.sketch.1", s, 2, 1)?;
        let cx = net.g.concat(&[input.x, s], 1)?;
        let cemb = net.embed("ctrl.", input.c_noise)?;
        let (cskips, cmid) = net.encoder("ctrl.", cx, cemb)?;
        for (l, (skip, cs)) in skips.iter_mut().zip(cskips).enumerate() {
            let z = net.conv(&format!("ctrl.zero.{l}"), cs, 1, 0)?;
            *skip = net.g.add(*skip, z)?;
        }
        let z = net.conv("ctrl.zero.mid", cmid, 1, 0)?;
        mid = net.g.add(mid, z)?;
    }

    let mut hcur = mid;
    for l in (0..cfg.levels()).rev() {
        let cat = net.g.concat(&[hcur, skips[l]], 1)?;
        hcur = net.stage(&format!("dec.{l}"), cat, emb)?;
        if l > 0 {
            let up = net.g.upsample2x(hcur)?;
            hcur = net.conv(&format!("dec.{l}.up"), up, 1, 1)?;
        }
    }
    let o = net.norm("out.norm", hcur)?;
    let o = net.g.silu(o);
    net.conv("out.conv", o, 1, 1)
}

/// A configured network with its parameters, evaluated without a tape.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Float = f32> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    pub sigma_data: f64,
}

impl<T: Float> Denoiser<T> {
    pub fn new(config: DenoiserConfig, params: ParamStore<T>) -> Self {
        Self {
            config,
            params,
            sigma_data: 0.5,
        }
    }

    /// Raw network output `U` for already concatenated inputs.
    pub fn unet(
        &self,
        x: &Tensor<T>,
        sketches: &Tensor<T>,
        c_noise: f64,
        refs: usize,
        modes: &[AttentionMode],
        use_controlnet: bool,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let p = self.params.register(&mut g, |_| false);
        let input = ForwardInput {
            x: g.constant(x.clone()),
            sketches: g.constant(sketches.clone()),
            c_noise,
            refs,
            modes: modes.to_vec(),
            use_controlnet,
        };
        let out = forward(&mut g, &p, &self.config, &input)?;
        Ok(g.take_value(out))
    }

    /// Preconditioned denoiser `D(noised; σ)` for every entry.
    /// `cond`, `noised`: `[E, latent, h, w]`.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &self,
        cond: &Tensor<T>,
        noised: &Tensor<T>,
        sketches: &Tensor<T>,
        sigma: f64,
        refs: usize,
        modes: &[AttentionMode],
        use_controlnet: bool,
    ) -> Result<Tensor<T>> {
        if sigma == 0.0 {
            return Ok(noised.clone());
        }
        edm::denoise(noised, sigma, self.sigma_data, |scaled, c_noise| {
            let x = concat_channels(cond, scaled)?;
            self.unet(&x, sketches, c_noise, refs, modes, use_controlnet)
        })
    }
}

/// Concatenates two `[E, C, h, w]` tensors along channels.
pub(crate) fn concat_channels<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(shape_err!("channel concat of {:?} and {:?}", sa, sb));
    }
    let (e, plane) = (sa[0], sa[2] * sa[3]);
    let (ca, cb) = (sa[1] * plane, sb[1] * plane);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..e {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::new([e, sa[1] + sb[1], sa[2], sa[3]], data)
}
