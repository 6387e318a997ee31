//! Batch assembly with the reference entry, Adam on selected parameter
//! groups, and the training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_training_sets, TrainingSet};
use crate::edm::{self, TrainingNoiseConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{checkpoint, forward, AttentionMode, DenoiserConfig, ForwardInput};
use crate::tensor::{BoundParams, Float, Graph, ParamStore, Tensor, Var};
use crate::vae;

/// Latents and sketches of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedClip<T: Float = f32> {
    pub latents: Vec<Tensor<T>>,
    pub sketches: Vec<Tensor<T>>,
}

impl<T: Float> EncodedClip<T> {
    pub fn from_frames(frames: &[Tensor<T>], sketches: &[Tensor<T>]) -> Result<Self> {
        if frames.len() != sketches.len() {
            return Err(invalid!("{} frames with {} sketches", frames.len(), sketches.len()));
        }
        Ok(Self {
            latents: vae::encode_frames(frames)?,
            sketches: sketches.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Clips plus every (clip, training set) pair usable for a window of `frames`.
#[derive(Debug, Clone)]
pub struct Dataset<T: Float = f32> {
    pub clips: Vec<EncodedClip<T>>,
    pub frames: usize,
    pub sets: Vec<(usize, TrainingSet)>,
}

impl<T: Float> Dataset<T> {
    pub fn new(clips: Vec<EncodedClip<T>>, frames: usize) -> Result<Self> {
        let sets: Vec<(usize, TrainingSet)> = clips
            .iter()
            .enumerate()
            .flat_map(|(i, c)| build_training_sets(c.len(), frames).into_iter().map(move |s| (i, s)))
            .collect();
        if sets.is_empty() {
            return Err(invalid!("no clip is longer than the {frames}-frame training window"));
        }
        Ok(Self { clips, frames, sets })
    }
}

/// One training example: entry 0 is the reference, entries `1..=N` the window.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Float = f32> {
    /// `[N+1, C, h, w]` clean latents.
    pub targets: Tensor<T>,
    /// `[N+1, C, h, w]`, the reference latent in every entry.
    pub cond: Tensor<T>,
    /// `[N+1, S, H, W]`.
    pub sketches: Tensor<T>,
    /// `[N+1, C, h, w]` unit Gaussian noise.
    pub noise: Tensor<T>,
    pub sigma: f64,
    pub clip: usize,
    pub reference: usize,
    pub window: Range<usize>,
}

impl<T: Float> Batch<T> {
    pub fn noised(&self) -> Result<Tensor<T>> {
        let s = T::lit(self.sigma);
        self.targets.zip_map(&self.noise, |x, n| x + s * n)
    }
}

pub fn assemble_batch<T: Float, R: Rng + ?Sized>(
    dataset: &Dataset<T>,
    noise: &TrainingNoiseConfig,
    rng: &mut R,
) -> Result<Batch<T>> {
    if dataset.sets.is_empty() {
        return Err(invalid!("empty dataset"));
    }
    let (clip_idx, set) = &dataset.sets[rng.gen_range(0..dataset.sets.len())];
    let clip = &dataset.clips[*clip_idx];
    let reference = rng.gen_range(set.candidates.clone());
    let order: Vec<usize> = std::iter::once(reference).chain(set.targets.clone()).collect();
    let targets = Tensor::stack(&order.iter().map(|&i| clip.latents[i].clone()).collect::<Vec<_>>())?;
    let cond = Tensor::stack(&vec![clip.latents[reference].clone(); order.len()])?;
    let sketches = Tensor::stack(&order.iter().map(|&i| clip.sketches[i].clone()).collect::<Vec<_>>())?;
    let sigma = noise.sample(rng)?;
    let noise = Tensor::randn(targets.shape().to_vec(), 1.0, rng);
    Ok(Batch {
        targets,
        cond,
        sketches,
        noise,
        sigma,
        clip: *clip_idx,
        reference,
        window: set.targets.clone(),
    })
}

/// Weighted denoising loss of one batch, all entries weighted equally.
pub fn batch_loss<T: Float>(
    g: &mut Graph<T>,
    params: &BoundParams,
    config: &DenoiserConfig,
    batch: &Batch<T>,
    sigma_data: f64,
    use_controlnet: bool,
) -> Result<Var> {
    let e = batch.targets.shape()[0];
    if e != config.frames + 1 {
        return Err(shape_err!("batch of {e} entries for a {}-frame model", config.frames));
    }
    let clean = g.constant(batch.targets.clone());
    let noise = g.constant(batch.noise.clone());
    let cond = g.constant(batch.cond.clone());
    let sketches = g.constant(batch.sketches.clone());
    edm::dsm_loss(g, clean, noise, batch.sigma, sigma_data, |g, noised, sigma| {
        edm::denoise_graph(g, noised, sigma, sigma_data, |g, scaled, c_noise| {
            let x = g.concat(&[cond, scaled], 1)?;
            let input = ForwardInput {
                x,
                sketches,
                c_noise,
                refs: 1,
                modes: vec![AttentionMode::Standard; config.frames],
                use_controlnet,
            };
            forward(g, params, config, &input)
        })
    })
}

/// Which parameters the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroups {
    /// The ControlNet branch and every spatial and temporal self-attention layer.
    #[default]
    ControlnetAndAttention,
    All,
}

impl ParamGroups {
    pub fn contains(self, name: &str) -> bool {
        match self {
            ParamGroups::All => true,
            ParamGroups::ControlnetAndAttention => {
                name.starts_with("ctrl.") || name.contains(".sattn.") || name.contains(".tattn.")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Examples per optimizer step; their gradients are averaged.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: ParamGroups,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub noise: TrainingNoiseConfig,
    pub use_controlnet: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups: ParamGroups::ControlnetAndAttention,
            seed: 0,
            checkpoint_every: 500,
            noise: TrainingNoiseConfig::default(),
            use_controlnet: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("train.learning_rate and train.eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
struct Moments<T: Float> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam over named parameters.
#[derive(Debug, Clone)]
pub struct Adam<T: Float = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update; `grads` maps parameter names to gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let (lr, eps) = (T::lit(self.lr / bc1), T::lit(self.eps));
        let bc2_sqrt = T::lit(bc2.sqrt());
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(shape_err!("gradient of {name} has {} values for {}", g.len(), p.numel()));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + one_b1 * gi;
                *v = b2 * *v + one_b2 * gi * gi;
                *w = *w - lr * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Where training writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// CSV `step,loss,sigma`; `sigma` is the mean over the step's examples.
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Float = f32> {
    pub params: ParamStore<T>,
    /// `(step, loss, sigma)` per optimizer step.
    pub losses: Vec<(usize, f64, f64)>,
}

/// Loss and gradients (for trainable names) of one batch.
pub fn loss_and_grads<T: Float>(
    config: &DenoiserConfig,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    groups: ParamGroups,
    use_controlnet: bool,
) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
    let mut g = Graph::new();
    let bound = params.register(&mut g, |n| groups.contains(n));
    let loss = batch_loss(&mut g, &bound, config, batch, 0.5, use_controlnet)?;
    let value = g.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    g.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound.iter() {
        if groups.contains(name) {
            let grad = g.grad(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.value(var).numel()]);
            grads.insert(name.to_string(), grad);
        }
    }
    Ok((value, grads))
}

fn write_loss_log(path: &Path, losses: &[(usize, f64, f64)]) -> Result<()> {
    let mut text = String::from("step,loss,sigma\n");
    for (s, l, sg) in losses {
        text.push_str(&format!("{s},{l},{sg}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `params` in place of a copy and returns the result. `progress` is
/// called after every step with `(step, loss)`.
pub fn train<T: Float>(
    config: &DenoiserConfig,
    params: ParamStore<T>,
    dataset: &Dataset<T>,
    train_cfg: &TrainConfig,
    outputs: &TrainOutputs,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport<T>> {
    train_cfg.validate()?;
    config.validate()?;
    if dataset.frames != config.frames {
        return Err(invalid!(
            "dataset windows have {} frames but the model expects {}",
            dataset.frames,
            config.frames
        ));
    }
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut opt = Adam::new(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.eps);
    let mut losses = Vec::with_capacity(train_cfg.steps);
    for step in 1..=train_cfg.steps {
        let mut total: BTreeMap<String, Vec<T>> = BTreeMap::new();
        let (mut loss_sum, mut sigma_sum) = (0.0, 0.0);
        for _ in 0..train_cfg.batch_size {
            let batch = assemble_batch(dataset, &train_cfg.noise, &mut rng)?;
            let (loss, grads) = loss_and_grads(config, &params, &batch, train_cfg.groups, train_cfg.use_controlnet)?;
            if !loss.is_finite() {
                return Err(diverged(config, &params, outputs, step, loss, &batch));
            }
            loss_sum += loss;
            sigma_sum += batch.sigma;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        let inv = T::lit(1.0 / train_cfg.batch_size as f64);
        for g in total.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * inv);
        }
        opt.step(&mut params, &total)?;
        let b = train_cfg.batch_size as f64;
        losses.push((step, loss_sum / b, sigma_sum / b));
        progress(step, loss_sum / b);
        let periodic = train_cfg.checkpoint_every > 0 && step % train_cfg.checkpoint_every == 0;
        if periodic || step == train_cfg.steps {
            if let Some(path) = &outputs.checkpoint {
                checkpoint::save(path, config, &params)?;
            }
            if let Some(path) = &outputs.loss_log {
                write_loss_log(path, &losses)?;
            }
        }
    }
    Ok(TrainReport { params, losses })
}

/// Dumps the pre-step parameters and batch summary, then builds the error.
fn diverged<T: Float>(
    config: &DenoiserConfig,
    params: &ParamStore<T>,
    outputs: &TrainOutputs,
    step: usize,
    loss: f64,
    batch: &Batch<T>,
) -> Error {
    let mut msg = format!(
        "loss {loss} at step {step} (sigma {}, clip {}, reference frame {}, window {:?})",
        batch.sigma, batch.clip, batch.reference, batch.window
    );
    if let Some(path) = &outputs.checkpoint {
        let mut dump = path.as_os_str().to_owned();
        dump.push(".diverged");
        let dump = PathBuf::from(dump);
        if checkpoint::save(&dump, config, params).is_ok() {
            msg.push_str(&format!("; parameters before the step saved to {}", dump.display()));
        }
        let mut info = dump.as_os_str().to_owned();
        info.push(".txt");
        if let Ok(mut f) = fs::File::create(PathBuf::from(info)) {
            let _ = writeln!(f, "{msg}");
        }
    }
    Error::NonFinite(msg)
}

/// Fixed probe batches for comparing losses across training.
pub fn probe_batches<T: Float>(
    dataset: &Dataset<T>,
    noise: &TrainingNoiseConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Batch<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| assemble_batch(dataset, noise, &mut rng)).collect()
}

/// Mean loss over `batches` without gradients.
pub fn probe_loss<T: Float>(
    config: &DenoiserConfig,
    params: &ParamStore<T>,
    batches: &[Batch<T>],
    use_controlnet: bool,
) -> Result<f64> {
    let mut sum = 0.0;
    for b in batches {
        let mut g = Graph::no_grad();
        let bound = params.register(&mut g, |_| false);
        let loss = batch_loss(&mut g, &bound, config, b, 0.5, use_controlnet)?;
        sum += g.value(loss).item()?.as_f64();
    }
    Ok(sum / batches.len().max(1) as f64)
}
