//! Euler sampling of one segment and sequential sampling of long videos
//! with overlapped blending and prev-reference attention.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edm::NoiseSchedule;
use crate::error::{invalid, shape_err, Result};
use crate::model::{segment_modes, AttentionMode, Denoiser, DEFAULT_ALPHA, DEFAULT_SHIFT};
use crate::tensor::{Float, Tensor};
use crate::vae;

/// Inclusive, 1-based frame ranges of the segments covering a long video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub total: usize,
    pub frames: usize,
    pub overlap: usize,
    pub segments: Vec<(usize, usize)>,
}

impl SegmentPlan {
    /// Frames shared between segment `k` (0-based) and the one before it.
    pub fn overlap_before(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.segments[k - 1].1 + 1 - self.segments[k].0
        }
    }

    /// Frames shared between segment `k` and the one after it.
    pub fn overlap_after(&self, k: usize) -> usize {
        if k + 1 < self.segments.len() {
            self.overlap_before(k + 1)
        } else {
            0
        }
    }
}

/// Segment `n` covers frames `(n-1)(N-o)+1 ..= (n-1)(N-o)+N`. When the frames
/// do not divide evenly, the last segment is right-aligned to end at `L`.
pub fn plan_segments(total: usize, frames: usize, overlap: usize) -> Result<SegmentPlan> {
    if frames == 0 || overlap >= frames {
        return Err(invalid!("overlap {overlap} must be smaller than the segment length {frames}"));
    }
    if total < frames {
        return Err(invalid!(
            "video of {total} frames is shorter than one segment of {frames}; pad it to at least {frames} frames"
        ));
    }
    let stride = frames - overlap;
    let mut segments = Vec::new();
    let mut start = 1;
    loop {
        let end = start + frames - 1;
        if end >= total {
            segments.push((total + 1 - frames, total));
            break;
        }
        segments.push((start, end));
        start += stride;
    }
    Ok(SegmentPlan {
        total,
        frames,
        overlap,
        segments,
    })
}

/// `x_{t-1} = (σ_{t-1}/σ_t) x_t + ((σ_t - σ_{t-1})/σ_t) D`.
pub fn euler_step<T: Float>(x: &Tensor<T>, denoised: &Tensor<T>, sigma: f64, sigma_next: f64) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(invalid!("Euler step from sigma = {sigma}"));
    }
    if !(sigma_next >= 0.0 && sigma_next <= sigma) {
        return Err(invalid!("Euler step needs {sigma} >= sigma_next >= 0, got {sigma_next}"));
    }
    if sigma_next == 0.0 {
        // Lands exactly on the prediction.
        return x.zip_map(denoised, |_, d| d);
    }
    let keep = T::lit(sigma_next / sigma);
    let toward = T::lit((sigma - sigma_next) / sigma);
    x.zip_map(denoised, |xv, dv| keep * xv + toward * dv)
}

/// Denoiser outputs of the trailing frames of a finished segment, per step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlendCache<T: Float = f32> {
    /// Absolute 1-based index of the first cached frame.
    pub first_frame: usize,
    pub frames: usize,
    pub steps: BTreeMap<usize, Vec<Tensor<T>>>,
}

impl<T: Float> BlendCache<T> {
    pub fn get(&self, t: usize) -> Result<&[Tensor<T>]> {
        self.steps
            .get(&t)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid!("blend cache has no entry for step {t}"))
    }
}

/// Anything that maps noised entries to clean predictions.
pub trait SegmentDenoiser<T: Float> {
    /// `cond`, `noised`: `[E, C, h, w]`; sketches `[E, S, H, W]`.
    #[allow(clippy::too_many_arguments)]
    fn denoise(
        &self,
        cond: &Tensor<T>,
        noised: &Tensor<T>,
        sketches: &Tensor<T>,
        sigma: f64,
        refs: usize,
        modes: &[AttentionMode],
    ) -> Result<Tensor<T>>;
}

/// A [`Denoiser`] with the ControlNet switch fixed.
#[derive(Debug, Clone, Copy)]
pub struct WithControl<'a, T: Float> {
    pub net: &'a Denoiser<T>,
    pub use_controlnet: bool,
}

impl<T: Float> SegmentDenoiser<T> for WithControl<'_, T> {
    fn denoise(
        &self,
        cond: &Tensor<T>,
        noised: &Tensor<T>,
        sketches: &Tensor<T>,
        sigma: f64,
        refs: usize,
        modes: &[AttentionMode],
    ) -> Result<Tensor<T>> {
        self.net
            .denoise(cond, noised, sketches, sigma, refs, modes, self.use_controlnet)
    }
}

/// Noised component of the reference-bundle entries during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceNoise {
    /// Euler-updated alongside the video frames from initial noise.
    #[default]
    Trajectory,
    /// Re-noised at every step: `cond + σ_t · n` with one fixed `n`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub overlap: usize,
    pub alpha: f64,
    pub shift: usize,
    pub seed: u64,
    pub use_controlnet: bool,
    pub reference_noise: ReferenceNoise,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            overlap: 4,
            alpha: DEFAULT_ALPHA,
            shift: DEFAULT_SHIFT,
            seed: 0,
            use_controlnet: true,
            reference_noise: ReferenceNoise::Trajectory,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total: usize, frames: usize) -> Result<()> {
        self.schedule.validate()?;
        if self.overlap >= frames {
            return Err(invalid!("overlap {} must be below the segment length {frames}", self.overlap));
        }
        if total > frames && self.shift > self.overlap {
            return Err(invalid!(
                "shift {} exceeds overlap {}; frames would reference before the segment",
                self.shift,
                self.overlap
            ));
        }
        if !(self.alpha > 1.0) {
            return Err(invalid!("amplification alpha must exceed 1, got {}", self.alpha));
        }
        Ok(())
    }
}

/// One reference-path input: conditioning latent and its sketch.
#[derive(Debug, Clone)]
pub struct BundleEntry<T: Float = f32> {
    pub cond: Tensor<T>,
    pub sketch: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SegmentOutput<T: Float = f32> {
    /// Final latents of the video frames.
    pub latents: Vec<Tensor<T>>,
    pub cache: BlendCache<T>,
    /// Post-blend denoiser outputs of the video frames per step, when traced.
    pub trace: Option<BTreeMap<usize, Vec<Tensor<T>>>>,
}

/// Inputs of one segment beyond the network itself.
#[derive(Debug, Clone)]
pub struct SegmentRequest<'a, T: Float = f32> {
    /// Video-frame sketches, `[S, H, W]` each.
    pub sketches: &'a [Tensor<T>],
    /// Conditioning latent shared by all video frames (the reference).
    pub video_cond: &'a Tensor<T>,
    pub bundle: &'a [BundleEntry<T>],
    pub modes: &'a [AttentionMode],
    /// Overwrites frames `1..=cache.frames` with cached outputs.
    pub cache: Option<&'a BlendCache<T>>,
    /// Absolute index of this segment's first frame.
    pub first_frame: usize,
    /// Trailing frames to cache for the next segment.
    pub record: usize,
    pub trace: bool,
}

pub fn sample_segment<T: Float, D: SegmentDenoiser<T> + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    req: &SegmentRequest<'_, T>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SegmentOutput<T>> {
    let n = req.sketches.len();
    let refs = req.bundle.len();
    if n == 0 || refs == 0 {
        return Err(invalid!("a segment needs video frames and a global reference"));
    }
    if req.modes.len() != n {
        return Err(invalid!("{} attention modes for {n} frames", req.modes.len()));
    }
    if req.record > n {
        return Err(invalid!("cannot cache {} of {n} frames", req.record));
    }
    if let Some(cache) = req.cache {
        if cache.frames > n {
            return Err(invalid!("cache of {} frames for a {n}-frame segment", cache.frames));
        }
        if cache.first_frame != req.first_frame {
            return Err(invalid!(
                "cache starts at frame {} but the segment starts at {}",
                cache.first_frame,
                req.first_frame
            ));
        }
        if req.modes[..cache.frames]
            .iter()
            .any(|m| !matches!(m, AttentionMode::OverlapAmplified { .. }))
        {
            return Err(invalid!(
                "overlapped blending requires the amplified-overlap attention modes on blended frames"
            ));
        }
    }
    let latent_shape = req.video_cond.shape().to_vec();
    for b in req.bundle {
        if b.cond.shape() != latent_shape.as_slice() {
            return Err(shape_err!("bundle latent {:?} vs {:?}", b.cond.shape(), latent_shape));
        }
    }
    let schedule = &config.schedule;
    schedule.validate()?;

    let e = refs + n;
    let mut conds: Vec<Tensor<T>> = req.bundle.iter().map(|b| b.cond.clone()).collect();
    conds.extend(std::iter::repeat(req.video_cond.clone()).take(n));
    let cond = Tensor::stack(&conds)?;
    let mut sks: Vec<Tensor<T>> = req.bundle.iter().map(|b| b.sketch.clone()).collect();
    sks.extend(req.sketches.iter().cloned());
    let sketches = Tensor::stack(&sks)?;

    let mut shape = vec![e];
    shape.extend_from_slice(&latent_shape);
    let sigma_max = schedule.sigma_at(schedule.steps)?;
    let mut x = Tensor::<T>::randn(shape.clone(), sigma_max, rng);
    let fixed_noise = match config.reference_noise {
        ReferenceNoise::Fixed => Some(Tensor::<T>::randn(shape.clone(), 1.0, rng)),
        ReferenceNoise::Trajectory => None,
    };
    let per = cond.numel() / e;
    let ref_len = refs * per;

    let mut cache = BlendCache {
        first_frame: req.first_frame + n - req.record,
        frames: req.record,
        steps: BTreeMap::new(),
    };
    let mut trace = req.trace.then(BTreeMap::new);
    for t in (1..=schedule.steps).rev() {
        let sigma = schedule.sigma_at(t)?;
        let sigma_next = schedule.sigma_before(t)?;
        if let Some(noise) = &fixed_noise {
            let s = T::lit(sigma);
            let (xd, cd, nd) = (x.data_mut(), cond.data(), noise.data());
            for i in 0..ref_len {
                xd[i] = cd[i] + s * nd[i];
            }
        }
        let mut d = denoiser.denoise(&cond, &x, &sketches, sigma, refs, req.modes)?;
        if d.shape() != x.shape() {
            return Err(shape_err!("denoiser returned {:?} for {:?}", d.shape(), x.shape()));
        }
        if let Some(c) = req.cache {
            let cached = c.get(t)?;
            for (j, frame) in cached.iter().enumerate() {
                let at = (refs + j) * per;
                d.data_mut()[at..at + per].copy_from_slice(frame.data());
            }
        }
        let video = |j: usize| -> Result<Tensor<T>> {
            Tensor::new(latent_shape.clone(), d.data()[(refs + j) * per..(refs + j + 1) * per].to_vec())
        };
        cache
            .steps
            .insert(t, (n - req.record..n).map(video).collect::<Result<_>>()?);
        if let Some(tr) = trace.as_mut() {
            tr.insert(t, (0..n).map(video).collect::<Result<_>>()?);
        }
        x = euler_step(&x, &d, sigma, sigma_next)?;
    }
    let latents = (0..n)
        .map(|j| Tensor::new(latent_shape.clone(), x.data()[(refs + j) * per..(refs + j + 1) * per].to_vec()))
        .collect::<Result<_>>()?;
    Ok(SegmentOutput { latents, cache, trace })
}

/// Long-video sampling variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Overlapped blending with amplified-overlap and prev-reference attention.
    #[default]
    Full,
    /// Independent segments, standard attention, no blending.
    NoSchemes,
    /// As `NoSchemes`, but each segment's reference is the re-encoded last
    /// frame generated so far.
    PrevSample,
}

#[derive(Debug, Clone)]
pub struct LongVideo<T: Float = f32> {
    pub plan: SegmentPlan,
    pub latents: Vec<Tensor<T>>,
    /// Decoded, unclamped frames `[3, H, W]`.
    pub frames: Vec<Tensor<T>>,
    pub segments: Vec<SegmentOutput<T>>,
}

/// Samples `sketches.len()` frames conditioned on one reference frame.
///
/// `sketches` holds one `[S, H, W]` sketch per frame; the reference frame is
/// RGB `[3, H, W]` with its own sketch.
#[allow(clippy::too_many_arguments)]
pub fn sample_long<T: Float, D: SegmentDenoiser<T> + ?Sized>(
    denoiser: &D,
    frames_per_segment: usize,
    sketches: &[Tensor<T>],
    reference: &Tensor<T>,
    reference_sketch: &Tensor<T>,
    scheme: Scheme,
    config: &SamplerConfig,
    trace: bool,
) -> Result<LongVideo<T>> {
    let total = sketches.len();
    let n = frames_per_segment;
    let overlap = config.overlap;
    if scheme == Scheme::Full {
        config.validate(total, n)?;
    } else {
        config.schedule.validate()?;
    }
    let plan = plan_segments(total, n, overlap)?;
    let global = vae::encode(reference)?;
    let mut out: Vec<Option<Tensor<T>>> = vec![None; total];
    let mut segments: Vec<SegmentOutput<T>> = Vec::with_capacity(plan.segments.len());

    for (k, &(start, end)) in plan.segments.iter().enumerate() {
        let o_prev = plan.overlap_before(k);
        let seg_sketches = &sketches[start - 1..end];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64);

        let (video_cond, ref_sketch) = match scheme {
            Scheme::PrevSample if k > 0 => {
                let last = out[start - 2].as_ref().expect("earlier frames are emitted first");
                let decoded = vae::decode(last)?.map(|v| v.max(T::zero()).min(T::one()));
                (vae::encode(&decoded)?, sketches[start - 2].clone())
            }
            _ => (global.clone(), reference_sketch.clone()),
        };
        let mut bundle = vec![BundleEntry {
            cond: video_cond.clone(),
            sketch: ref_sketch,
        }];
        let (modes, cache, record) = match scheme {
            Scheme::Full if k > 0 => {
                for j in 0..o_prev {
                    let abs = start + j;
                    bundle.push(BundleEntry {
                        cond: out[abs - 1].clone().expect("overlap frames were emitted"),
                        sketch: sketches[abs - 1].clone(),
                    });
                }
                let modes = segment_modes(n, k + 1, o_prev, config.alpha, config.shift.min(o_prev));
                (modes, Some(&segments[k - 1].cache), plan.overlap_after(k))
            }
            Scheme::Full => (vec![AttentionMode::Standard; n], None, plan.overlap_after(k)),
            _ => (vec![AttentionMode::Standard; n], None, 0),
        };
        let req = SegmentRequest {
            sketches: seg_sketches,
            video_cond: &video_cond,
            bundle: &bundle,
            modes: &modes,
            cache,
            first_frame: start,
            record,
            trace,
        };
        let seg = sample_segment(denoiser, &req, config, &mut rng)?;
        for (j, lat) in seg.latents.iter().enumerate() {
            let slot = &mut out[start - 1 + j];
            if slot.is_none() {
                *slot = Some(lat.clone());
            }
        }
        segments.push(seg);
    }
    let latents: Vec<Tensor<T>> = out.into_iter().map(|l| l.expect("plan covers every frame")).collect();
    let frames = vae::decode_frames(&latents)?;
    Ok(LongVideo {
        plan,
        latents,
        frames,
        segments,
    })
}
