use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var },
    Silu(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        scale: T,
    },
    Upsample2x(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamically built computation record.
///
/// A graph created with [`Graph::no_grad`] records values only; leaves never
/// require gradients and nothing needed for the backward pass is retained.
#[derive(Debug)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor; it participates in backward if `requires_grad` is set.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && value.requires_grad;
        value.set_grad(None).expect("clearing a gradient cannot fail");
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Adds a per-channel bias `[C]` along axis 1 of `x` (`[B, C, ...]`), or
    /// along the last axis when `x` is 2-D.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, inner) = bias_layout(&shape)?;
        if self.shape(bias) != [c] {
            return Err(shape_err!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                shape
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.data(bias).to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % c];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value.with_requires_grad(false), Op::AddBias { x, bias }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value.with_requires_grad(false), Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("permutation {:?} of rank-{} tensor", axes, shape.len()));
        }
        let data = kernels::permute(self.data(x), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} on rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err!("concat on axis {axis}: {:?} vs {:?}", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err!(
                "slice {start}..{end} on axis {axis} of {:?}",
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data(x);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// `x [M, in] * w^T [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err!("linear: input {:?}, weight {:?}", xs, ws));
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); m * n];
        let mut beta = T::zero();
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err!("linear: bias {:?} for {n} outputs", self.shape(b)));
            }
            let bd = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bd);
            }
            beta = T::one();
        }
        T::gemm(m, k, n, self.data(x), false, self.data(w), true, beta, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d: input {:?}, weight {:?} must be rank 4", xs, ws));
        }
        if xs[1] != ws[1] {
            return Err(shape_err!(
                "conv2d: input has {} channels, weight expects {}",
                xs[1],
                ws[1]
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid!("conv2d: zero stride"));
        }
        let (h, wd) = (xs[2] + 2 * padding.0, xs[3] + 2 * padding.1);
        if h < ws[2] || wd < ws[3] {
            return Err(shape_err!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                ws[2],
                ws[3],
                h,
                wd
            ));
        }
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho: (h - ws[2]) / stride.0 + 1,
            wo: (wd - ws[3]) / stride.1 + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err!("conv2d: bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let out = kernels::conv2d_forward(
            self.data(x),
            xs[0],
            self.data(w),
            b.map(|b| self.data(b)),
            ws[0],
            &geom,
        );
        let value = Tensor::new(vec![xs[0], ws[0], geom.ho, geom.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Convolution along the frame axis of `[B, C, N, H, W]` with a
    /// `[O, C, k_t, 1, 1]` kernel and zero padding that preserves `N`.
    pub fn temporal_conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 {
            return Err(shape_err!("temporal_conv3d: input {:?} must be [B, C, N, H, W]", xs));
        }
        if xs[2] < 1 {
            return Err(invalid!("temporal_conv3d: need at least one frame"));
        }
        if ws.len() != 5 || ws[3] != 1 || ws[4] != 1 || ws[2] % 2 == 0 {
            return Err(shape_err!(
                "temporal_conv3d: weight {:?} must be [O, C, k_t, 1, 1] with odd k_t",
                ws
            ));
        }
        let (bsz, c, n, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let x2 = self.reshape(x, &[bsz, c, n, h * wd])?;
        let w2 = self.reshape(w, &[ws[0], ws[1], ws[2], 1])?;
        let y = self.conv2d(x2, w2, b, (1, 1), (ws[2] / 2, 0))?;
        self.reshape(y, &[bsz, ws[0], n, h, wd])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err!("group_norm: input {:?} must be [B, C, ...]", xs));
        }
        let (b, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(invalid!("group_norm: {groups} groups do not divide {c} channels"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "group_norm: affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let spatial: usize = xs[2..].iter().product();
        let (out, means, rstds) = kernels::group_norm_forward(
            self.data(x),
            self.data(gamma),
            self.data(beta),
            b,
            c,
            spatial,
            groups,
            T::lit(GROUP_NORM_EPS),
        );
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let (means, rstds) = if rg { (means, rstds) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            },
            rg,
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut value = self.value(x).clone().with_requires_grad(false);
        if last > 0 {
            for row in value.data_mut().chunks_mut(last) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                if !max.is_finite() {
                    return Err(Error::NonFinite("softmax input".into()));
                }
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// `softmax(q k^T / sqrt(d) + bias) v` over `[B, T, d]` operands.
    ///
    /// `logit_bias` is a constant with either `T_k` entries (shared across the
    /// batch) or `B * T_k` entries.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, logit_bias: Option<&[T]>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(shape_err!("attention: operands {:?} {:?} {:?} must be rank 3", qs, ks, vs));
        }
        if qs[0] != ks[0] || ks != vs || qs[2] != ks[2] {
            return Err(shape_err!("attention: q {:?}, k {:?}, v {:?}", qs, ks, vs));
        }
        let (batch, tq, tk, d) = (qs[0], qs[1], ks[1], qs[2]);
        let expanded;
        let bias = match logit_bias {
            None => None,
            Some(b) if b.len() == tk => {
                expanded = b.repeat(batch);
                Some(expanded.as_slice())
            }
            Some(b) if b.len() == batch * tk => Some(b),
            Some(b) => {
                return Err(shape_err!(
                    "attention: logit bias of length {} for {tk} keys",
                    b.len()
                ))
            }
        };
        let scale = T::one() / T::lit(d as f64).sqrt();
        let (out, probs) = kernels::attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            bias,
            batch,
            tq,
            tk,
            d,
            scale,
        )
        .map_err(Error::NonFinite)?;
        let value = Tensor::new(vec![batch, tq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(value, Op::Attention { q, k, v, probs, scale }, rg))
    }

    /// Unbatched attention `[T_q, d] x [T_k, d] -> [T_q, d]`.
    pub fn sdp_attention(&mut self, q: Var, k: Var, v: Var, logit_bias: Option<&[T]>) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(shape_err!("sdp_attention: operands must be rank 2"));
        }
        let q3 = self.reshape(q, &[1, qs[0], qs[1]])?;
        let k3 = self.reshape(k, &[1, ks[0], ks[1]])?;
        let v3 = self.reshape(v, &[1, vs[0], vs[1]])?;
        let o = self.attention(q3, k3, v3, logit_bias)?;
        self.reshape(o, &[qs[0], qs[1]])
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("upsample2x: input {:?} must be rank 4", xs));
        }
        let (h, w) = (xs[2], xs[3]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.data(x).len().max(1) as f64);
        let s: T = self.data(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::lit(self.data(a).len().max(1) as f64);
        let s: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients land on every node that
    /// requires them and are readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(invalid!("backward on a no-grad graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(Some(g))?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let gb = g.iter().zip(self.data(*b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, gb);
                }
                if self.needs(*b) {
                    let ga = g.iter().zip(self.data(*a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*bias) {
                    let (c, inner) = bias_layout(self.shape(*x)).expect("validated in forward");
                    let mut gb = vec![T::zero(); c];
                    for (idx, &v) in g.iter().enumerate() {
                        gb[(idx / inner) % c] += v;
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Silu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_axes(axes);
                let gx = kernels::permute(g, node.value.shape(), &inv);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); self.data(*x).len()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    gx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.data(*w), false, T::zero(), &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g, true, self.data(*x), false, T::zero(), &mut gw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let out_ch = self.shape(*w)[0];
                let cg = kernels::conv2d_backward(
                    self.data(*x),
                    self.shape(*x)[0],
                    self.data(*w),
                    out_ch,
                    geom,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let xs = self.shape(*x);
                let spatial: usize = xs[2..].iter().product();
                let (gx, gg, gb) = kernels::group_norm_backward(
                    self.data(*x),
                    self.data(*gamma),
                    means,
                    rstds,
                    g,
                    xs[0],
                    xs[1],
                    spatial,
                    *groups,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y.chunks(last).zip(g.chunks(last)).zip(gx.chunks_mut(last)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let qs = self.shape(*q);
                let tk = self.shape(*k)[1];
                let ag = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    qs[0],
                    qs[1],
                    tk,
                    qs[2],
                    *scale,
                );
                self.accumulate(grads, *q, ag.q);
                self.accumulate(grads, *k, ag.k);
                self.accumulate(grads, *v, ag.v);
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let mut gx = vec![T::zero(); self.data(*x).len()];
                for (plane, gp) in gx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                let v = g[0] / T::lit(n.max(1) as f64);
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::Mse(a, b) => {
                let n = T::lit(self.data(*a).len().max(1) as f64);
                let two = T::lit(2.0);
                let diff: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&x, &y)| two * (x - y) * g[0] / n)
                    .collect();
                if self.needs(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|&v| -v).collect());
                }
                self.accumulate(grads, *a, diff);
            }
        }
    }
}

fn bias_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 | 1 => Err(shape_err!("bias add on rank-{} tensor", shape.len())),
        2 => Ok((shape[1], 1)),
        _ => Ok((shape[1], shape[2..].iter().product())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_of_ones_sums_the_window() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = rand::thread_rng();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn([2, 3, 5, 5], 1.0, &mut rng));
        let w = g.constant(Tensor::zeros([4, 3, 3, 3]));
        let b = g.constant(Tensor::zeros([4]));
        let y = g.conv2d(x, w, Some(b), (1, 1), (1, 1)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_shape_arithmetic() {
        let mut rng = rand::thread_rng();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn([2, 3, 8, 8], 1.0, &mut rng));
        let w = g.constant(Tensor::randn([4, 3, 3, 3], 1.0, &mut rng));
        let y = g.conv2d(x, w, None, (1, 1), (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 8, 8]);
        let y2 = g.conv2d(x, w, None, (2, 2), (1, 1)).unwrap();
        assert_eq!(g.shape(y2), &[2, 4, 4, 4]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, (1, 1), (1, 1)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn temporal_identity_kernel() {
        let mut rng = rand::thread_rng();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn([1, 2, 5, 4, 4], 1.0, &mut rng));
        let mut w = Tensor::zeros([2, 2, 3, 1, 1]);
        // center tap of the diagonal
        w.data_mut()[1] = 1.0;
        w.data_mut()[2 * 3 + 3 + 1] = 1.0;
        let w = g.constant(w);
        let y = g.temporal_conv3d(x, w, None).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 5, 4, 4]);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn temporal_average_of_ramp() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 1, 1], &[0.0, 1.0, 2.0]));
        let w = g.constant(t(&[1, 1, 3, 1, 1], &[1.0 / 3.0; 3]));
        let y = g.temporal_conv3d(x, w, None).unwrap();
        let d = g.value(y).data();
        assert!((d[1] - 1.0).abs() < 1e-12);
        // zero padding at the ends
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_conv_rejects_zero_frames() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 1, 0, 2, 2]));
        let w = g.constant(Tensor::zeros([1, 1, 3, 1, 1]));
        assert!(g.temporal_conv3d(x, w, None).is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[2, 3], &[5.0, -1.0, 2.0, 0.3, 0.1, 9.0]));
        let k = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let v = g.constant(t(&[1, 3], &[7.0, 8.0, 9.0]));
        let o = g.sdp_attention(q, k, v, None).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn attention_logit_bias_multiplies_weight() {
        // Equal logits, bias ln(10) on the third key: weights 1/12, 1/12, 10/12.
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let k = g.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 3.0]));
        let v = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let bias = [0.0, 0.0, 10f64.ln()];
        let o = g.sdp_attention(q, k, v, Some(&bias)).unwrap();
        let d = g.value(o).data();
        assert!((d[0] - 1.0 / 12.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn attention_saturates_to_matching_key() {
        let mut g = Graph::<f64>::new();
        let scale = 40.0;
        let q = g.constant(t(&[1, 3], &[0.0, scale, 0.0]));
        let k = g.constant(t(&[3, 3], &[scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, scale]));
        let v = g.constant(t(&[3, 3], &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 5.0, 6.0, 0.0]));
        let o = g.sdp_attention(q, k, v, None).unwrap();
        let d = g.value(o).data();
        assert!((d[0] - 3.0).abs() < 1e-3 && (d[1] - 4.0).abs() < 1e-3, "{d:?}");
    }

    #[test]
    fn attention_rejects_non_finite_logits() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1], &[f64::INFINITY]));
        let k = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let v = g.constant(t(&[2, 1], &[1.0, 1.0]));
        assert!(matches!(g.sdp_attention(q, k, v, None), Err(Error::NonFinite(_))));
    }

    #[test]
    fn small_layers() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.silu(z);
        assert_eq!(g.value(s).data(), &[0.0]);

        let c = g.constant(Tensor::full([2, 4, 3], 1.7));
        let gamma = g.constant(Tensor::ones([4]));
        let beta = g.constant(Tensor::zeros([4]));
        let n = g.group_norm(c, gamma, beta, 2).unwrap();
        assert!(g.value(n).data().iter().all(|&v| v == 0.0));
        assert!(g.group_norm(c, gamma, beta, 3).is_err());

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let cat = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(cat), &[2, 2]);
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = rand::thread_rng();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn([2, 3, 4, 5], 1.0, &mut rng));
        let p = g.permute(x, &[2, 0, 3, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 5, 3]);
        let back = g.permute(p, &kernels::inverse_axes(&[2, 0, 3, 1])).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        // element check: out[i0,i1,i2,i3] = x[i1, i3, i0, i2]
        let xv = g.value(x).data();
        let pv = g.value(p).data();
        assert_eq!(pv[((1 * 2 + 1) * 5 + 4) * 3 + 2], xv[((1 * 3 + 2) * 4 + 1) * 5 + 4]);
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let mut g = Graph::<f32>::no_grad();
        let x = g.param(Tensor::ones([2]));
        let s = g.sum(x);
        assert!(g.backward(s).is_err());
    }
}
