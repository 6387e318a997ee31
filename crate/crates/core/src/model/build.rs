use rand::Rng;

use super::DenoiserConfig;
use crate::error::Result;
use crate::tensor::{Float, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Uniform in `±sqrt(1 / fan_in)` (Kaiming-uniform with `a = sqrt(5)`).
    Kaiming { fan_in: usize },
    Zero,
    One,
    /// Exact copy of the base parameter named in [`ParamSpec::source`].
    Clone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
    /// For clones: base tensor to copy from.
    pub source: Option<String>,
}

struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: ParamInit) {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            source: None,
        });
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.push(format!("{name}.w"), vec![cout, cin, k, k], ParamInit::Kaiming { fan_in: cin * k * k });
        self.push(format!("{name}.b"), vec![cout], ParamInit::Zero);
    }

    fn zero_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.push(format!("{name}.w"), vec![cout, cin, k, k], ParamInit::Zero);
        self.push(format!("{name}.b"), vec![cout], ParamInit::Zero);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, bias: bool) {
        self.push(format!("{name}.w"), vec![out, inp], ParamInit::Kaiming { fan_in: inp });
        if bias {
            self.push(format!("{name}.b"), vec![out], ParamInit::Zero);
        }
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], ParamInit::One);
        self.push(format!("{name}.b"), vec![c], ParamInit::Zero);
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, embed: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cout, cin, 3);
        self.linear(&format!("{name}.emb"), cout, embed, true);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1);
        }
    }

    fn attn(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm"), c);
        for proj in ["q", "k", "v"] {
            self.linear(&format!("{name}.{proj}"), c, c, false);
        }
        self.linear(&format!("{name}.out"), c, c, true);
    }

    fn stage(&mut self, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig) {
        self.res(&format!("{name}.res"), cin, cout, cfg.embed_dim);
        self.norm(&format!("{name}.tconv.norm"), cout);
        let kt = cfg.temporal_kernel;
        self.push(
            format!("{name}.tconv.w"),
            vec![cout, cout, kt, 1, 1],
            ParamInit::Kaiming { fan_in: cout * kt },
        );
        self.push(format!("{name}.tconv.b"), vec![cout], ParamInit::Zero);
        self.attn(&format!("{name}.sattn"), cout);
        self.attn(&format!("{name}.tattn"), cout);
    }

    fn encoder(&mut self, prefix: &str, cfg: &DenoiserConfig, in_ch: usize) {
        let ch = cfg.channels();
        self.conv(&format!("{prefix}conv_in"), ch[0], in_ch, 3);
        self.linear(&format!("{prefix}emb.l1"), cfg.embed_dim, cfg.base_channels, true);
        self.linear(&format!("{prefix}emb.l2"), cfg.embed_dim, cfg.embed_dim, true);
        let mut prev = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            self.stage(&format!("{prefix}enc.{l}"), prev, c, cfg);
            if l + 1 < ch.len() {
                self.conv(&format!("{prefix}enc.{l}.down"), c, c, 3);
            }
            prev = c;
        }
        self.res(&format!("{prefix}mid.res"), prev, prev, cfg.embed_dim);
    }
}

/// Every parameter of the model with its shape and initializer, in build order.
pub fn param_layout(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let mut lay = Layout { specs: Vec::new() };
    let ch = cfg.channels();
    let lat = cfg.latent_channels;
    lay.encoder("", cfg, 2 * lat);

    let mut h = *ch.last().expect("validated");
    for l in (0..ch.len()).rev() {
        lay.stage(&format!("dec.{l}"), h + ch[l], ch[l], cfg);
        if l > 0 {
            lay.conv(&format!("dec.{l}.up"), ch[l], ch[l], 3);
        }
        h = ch[l];
    }
    lay.norm("out.norm", ch[0]);
    lay.conv("out.conv", lat, ch[0], 3);

    // ControlNet branch: sketch encoder, cloned encoder, zero projections.
    let k = cfg.sketch_features;
    lay.conv("ctrl.sketch.0", k, cfg.sketch_channels, 3);
    lay.zero_conv("ctrl.sketch.1", k, k, 3);
    let base_len = lay.specs.len();
    lay.encoder("ctrl.", cfg, 2 * lat + k);
    for spec in &mut lay.specs[base_len..] {
        let base = spec.name.trim_start_matches("ctrl.").to_string();
        spec.source = Some(base);
        spec.init = ParamInit::Clone;
    }
    for (l, &c) in ch.iter().enumerate() {
        lay.zero_conv(&format!("ctrl.zero.{l}"), c, c, 1);
    }
    let last = *ch.last().expect("validated");
    lay.zero_conv("ctrl.zero.mid", last, last, 1);
    lay.specs
}

/// Channel counts of every group-normalized feature map.
pub(crate) fn norm_channel_counts(cfg: &DenoiserConfig) -> Vec<usize> {
    param_layout(cfg)
        .into_iter()
        .filter(|s| s.name.ends_with(".g"))
        .map(|s| s.shape[0])
        .collect()
}

/// Fresh parameters: Kaiming-uniform convolutions and linears, unit norms,
/// the ControlNet encoder cloned from the base encoder, zero sketch output
/// and zero ControlNet projections.
pub fn build<T: Float, R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let specs = param_layout(cfg);
    for spec in &specs {
        let t = match spec.init {
            ParamInit::Kaiming { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::rand_uniform(spec.shape.clone(), -bound, bound, rng)
            }
            ParamInit::Zero => Tensor::zeros(spec.shape.clone()),
            ParamInit::One => Tensor::ones(spec.shape.clone()),
            ParamInit::Clone => {
                let base = store.get(spec.source.as_deref().expect("clone source"))?.clone();
                if base.shape() == spec.shape.as_slice() {
                    base
                } else {
                    widen_input_channels(&base, &spec.shape, rng)
                }
            }
        };
        store.insert(spec.name.clone(), t)?;
    }
    Ok(store)
}

/// Copies `base` into the leading input channels of a wider conv kernel and
/// fills the extra channels with Kaiming-uniform values.
fn widen_input_channels<T: Float, R: Rng + ?Sized>(base: &Tensor<T>, shape: &[usize], rng: &mut R) -> Tensor<T> {
    let (o, cin_new, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    let cin = base.shape()[1];
    let bound = (1.0 / (cin_new * kh * kw) as f64).sqrt();
    let mut out = Tensor::<T>::rand_uniform(shape.to_vec(), -bound, bound, rng);
    let plane = kh * kw;
    for oc in 0..o {
        let src = &base.data()[oc * cin * plane..(oc + 1) * cin * plane];
        out.data_mut()[oc * cin_new * plane..oc * cin_new * plane + cin * plane].copy_from_slice(src);
    }
    out
}
