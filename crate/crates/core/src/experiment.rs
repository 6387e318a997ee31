//! Desk-scale ablation: trains the full model and a model without reference
//! attention on synthetic clips, then compares sampling variants on a
//! held-out test set. Also times sampling across overlap sizes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{gen_clip, split_scenes, ClipSpec, Rgb, SyntheticClip};
use crate::error::{Error, Result};
use crate::metrics::{edmd, psnr, ssim, tc, EvalConfig};
use crate::model::{build, checkpoint, Denoiser, DenoiserConfig};
use crate::sampler::{sample_long, SamplerConfig, Scheme, WithControl};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{probe_batches, probe_loss, train, Dataset, EncodedClip, TrainOutputs};

/// Generation variants compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Full,
    NoRefAttn,
    NoSchemes,
    PrevSample,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Full, Method::NoRefAttn, Method::NoSchemes, Method::PrevSample];

    pub fn label(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::NoRefAttn => "no-ref-attn",
            Method::NoSchemes => "no-schemes",
            Method::PrevSample => "prev-sample",
        }
    }

    fn scheme(self) -> Scheme {
        match self {
            Method::Full | Method::NoRefAttn => Scheme::Full,
            Method::NoSchemes => Scheme::NoSchemes,
            Method::PrevSample => Scheme::PrevSample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MethodScores {
    pub tc: f64,
    pub color: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub edmd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub id: usize,
    pub motion: f64,
    /// Indexed like [`Method::ALL`].
    pub scores: [MethodScores; 4],
}

/// One directional claim of the ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    pub name: String,
    pub clips: usize,
    pub fraction: f64,
    pub mean_better: f64,
    pub mean_worse: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub label: &'static str,
    pub probe_before: f64,
    pub probe_after: f64,
}

impl ModelFit {
    /// The probe loss at least halved.
    pub fn passed(&self) -> bool {
        self.probe_after <= 0.5 * self.probe_before
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub train_clips: usize,
    pub fits: Vec<ModelFit>,
    pub clips: Vec<ClipResult>,
    pub orderings: Vec<Ordering>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        self.fits.iter().all(ModelFit::passed) && self.orderings.iter().all(|o| o.passed)
    }

    pub fn mean(&self, method: Method, f: impl Fn(&MethodScores) -> f64) -> f64 {
        let i = Method::ALL.iter().position(|&m| m == method).expect("listed");
        mean(self.clips.iter().map(|c| f(&c.scores[i])))
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trained on {} clips", self.train_clips);
        for f in &self.fits {
            let _ = writeln!(s, "probe loss {}: {:.4} -> {:.4}", f.label, f.probe_before, f.probe_after);
        }
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8}", "method", "TC", "color", "PSNR", "SSIM", "EDMD");
        for m in Method::ALL {
            let _ = writeln!(
                s,
                "{:<12} {:>8.4} {:>8.4} {:>8.2} {:>8.4} {:>8.3}",
                m.label(),
                self.mean(m, |x| x.tc),
                self.mean(m, |x| x.color),
                self.mean(m, |x| x.psnr),
                self.mean(m, |x| x.ssim),
                self.mean(m, |x| x.edmd),
            );
        }
        for o in &self.orderings {
            let _ = writeln!(
                s,
                "{}: {:.0}% of {} clips, means {:.4} vs {:.4} [{}]",
                o.name,
                100.0 * o.fraction,
                o.clips,
                o.mean_better,
                o.mean_worse,
                if o.passed { "ok" } else { "FAILED" }
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,motion,method,tc,color,psnr,ssim,edmd\n");
        for c in &self.clips {
            for (m, sc) in Method::ALL.iter().zip(&c.scores) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    c.id,
                    c.motion,
                    m.label(),
                    sc.tc,
                    sc.color,
                    sc.psnr,
                    sc.ssim,
                    sc.edmd
                );
            }
        }
        s
    }

    fn clips_from_csv(text: &str) -> Option<Vec<ClipResult>> {
        let mut clips: Vec<ClipResult> = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return None;
            }
            let id: usize = f[0].parse().ok()?;
            let m = Method::ALL.iter().position(|m| m.label() == f[2])?;
            let num = |i: usize| f[i].parse::<f64>().ok();
            let sc = MethodScores {
                tc: num(3)?,
                color: num(4)?,
                psnr: num(5)?,
                ssim: num(6)?,
                edmd: num(7)?,
            };
            if clips.last().map(|c| c.id) != Some(id) {
                clips.push(ClipResult {
                    id,
                    motion: num(1)?,
                    scores: [MethodScores::default(); 4],
                });
            }
            clips.last_mut()?.scores[m] = sc;
        }
        Some(clips)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean distance between each shape's mean generated colour (inside its
/// label mask eroded by one pixel) and its palette colour, over frames and
/// shapes.
pub fn color_error(frames: &[Tensor], labels: &[Vec<u8>], palette: &[Rgb]) -> Result<f64> {
    if frames.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} frames for {} label maps", frames.len(), labels.len())));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (frame, lab) in frames.iter().zip(labels) {
        let (h, w) = (frame.shape()[1], frame.shape()[2]);
        let hw = h * w;
        let d = frame.data();
        let mut sums = vec![[0.0f64; 3]; palette.len()];
        let mut counts = vec![0usize; palette.len()];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let l = lab[p];
                if l == 0 {
                    continue;
                }
                let interior = (y == 0 || lab[p - w] == l)
                    && (y + 1 == h || lab[p + w] == l)
                    && (x == 0 || lab[p - 1] == l)
                    && (x + 1 == w || lab[p + 1] == l);
                if !interior {
                    continue;
                }
                for c in 0..3 {
                    sums[l as usize][c] += d[c * hw + p] as f64;
                }
                counts[l as usize] += 1;
            }
        }
        for k in 1..palette.len() {
            if counts[k] < 4 {
                continue;
            }
            let dist: f64 = (0..3)
                .map(|c| (sums[k][c] / counts[k] as f64 - palette[k][c] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            total += dist;
            count += 1;
        }
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Scores one generated video against its ground-truth clip.
pub fn score_method(generated: &[Tensor], clip: &SyntheticClip, eval: &EvalConfig) -> Result<MethodScores> {
    let frames: Vec<Tensor> = generated.iter().map(|f| f.map(|v| v.clamp(0.0, 1.0))).collect();
    let tc = tc(&frames, &clip.frames, &clip.flows, eval)?.value;
    let color = color_error(&frames, &clip.labels, &clip.palette)?;
    let psnr_v = mean(frames.iter().zip(&clip.frames).map(|(a, b)| psnr(a, b).unwrap_or(f64::NAN)));
    let ssim_v = mean(frames.iter().zip(&clip.frames).map(|(a, b)| ssim(a, b).unwrap_or(f64::NAN)));
    let edmd_v = edmd(&frames, &clip.sketches, eval)?.value;
    Ok(MethodScores {
        tc,
        color,
        psnr: psnr_v,
        ssim: ssim_v,
        edmd: edmd_v,
    })
}

/// Training clips generated from `[data]`, curated by the scene filter.
pub fn training_clips(cfg: &RunConfig) -> Result<Vec<EncodedClip>> {
    let mut out = Vec::with_capacity(cfg.data.clips);
    for i in 0..cfg.data.clips {
        let clip = gen_clip(&cfg.data.clip_spec(i))?;
        for range in split_scenes(&clip.frames, &cfg.data.filter)? {
            out.push(EncodedClip::from_frames(&clip.frames[range.clone()], &clip.sketches[range])?);
        }
    }
    Ok(out)
}

/// Held-out clip `i` with its motion scale spread over `eval.test_motion`.
pub fn test_clip_spec(cfg: &RunConfig, i: usize) -> ClipSpec {
    let (lo, hi) = cfg.eval.test_motion;
    let n = cfg.eval.test_clips.max(2) - 1;
    ClipSpec {
        seed: cfg.eval.test_seed.wrapping_add(i as u64),
        length: cfg.eval.test_length,
        motion_scale: lo + (hi - lo) * i as f64 / n as f64,
        ..cfg.data.clip_spec(0)
    }
}

fn cache_key(parts: &[String]) -> String {
    let mut s = format!("version = \"{}\"\n", env!("CARGO_PKG_VERSION"));
    for p in parts {
        s.push_str(p);
        s.push('\n');
    }
    s
}

fn toml_of<T: serde::Serialize>(name: &str, v: &T) -> Result<String> {
    let body = toml::to_string(v).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("[{name}]\n{body}"))
}

/// Trains (or reloads from `cache`) the model described by `model_cfg`.
fn trained_model(
    cfg: &RunConfig,
    model_cfg: &DenoiserConfig,
    label: &'static str,
    dataset: &Dataset,
    cache: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(ParamStore, ModelFit)> {
    let ckpt = cache.join(format!("{label}.ckpt"));
    let key_path = cache.join(format!("{label}.key"));
    let key = cache_key(&[
        toml_of("data", &cfg.data)?,
        toml_of("model", model_cfg)?,
        toml_of("train", &cfg.train)?,
    ]);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    init_rng.set_stream(1);
    let init: ParamStore = build(model_cfg, &mut init_rng)?;
    let probes = probe_batches(dataset, &cfg.train.noise, 32, cfg.train.seed ^ 0x9e37_79b9)?;
    let before = probe_loss(model_cfg, &init, &probes, cfg.train.use_controlnet)?;

    let cached = fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str());
    let params = match cached.then(|| checkpoint::load::<f32>(&ckpt)) {
        Some(Ok((c, p))) if &c == model_cfg => {
            log(&format!("{label}: reusing {}", ckpt.display()));
            p
        }
        _ => {
            log(&format!("{label}: training {} steps", cfg.train.steps));
            let start = Instant::now();
            let steps = cfg.train.steps;
            let outputs = TrainOutputs {
                checkpoint: Some(ckpt.clone()),
                loss_log: Some(cache.join(format!("{label}.loss.csv"))),
            };
            let mut recent = 0.0;
            let report = train(model_cfg, init, dataset, &cfg.train, &outputs, |step, loss| {
                recent += loss;
                if step % 250 == 0 || step == steps {
                    log(&format!(
                        "{label}: step {step}/{steps} mean loss {:.4} ({:.0} s)",
                        recent / if step % 250 == 0 { 250.0 } else { (step % 250) as f64 },
                        start.elapsed().as_secs_f64()
                    ));
                    recent = 0.0;
                }
            })?;
            fs::write(&key_path, &key).map_err(|e| Error::io(&key_path, e))?;
            report.params
        }
    };
    let after = probe_loss(model_cfg, &params, &probes, cfg.train.use_controlnet)?;
    Ok((
        params,
        ModelFit {
            label,
            probe_before: before,
            probe_after: after,
        },
    ))
}

fn ordering(
    name: &str,
    clips: &[&ClipResult],
    better: Method,
    worse: Method,
    f: impl Fn(&MethodScores) -> f64,
    min_fraction: f64,
) -> Ordering {
    let idx = |m: Method| Method::ALL.iter().position(|&x| x == m).expect("listed");
    let (b, w) = (idx(better), idx(worse));
    let valid: Vec<(f64, f64)> = clips
        .iter()
        .map(|c| (f(&c.scores[b]), f(&c.scores[w])))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let wins = valid.iter().filter(|(x, y)| x < y).count();
    let fraction = if valid.is_empty() { 0.0 } else { wins as f64 / valid.len() as f64 };
    let mean_better = mean(valid.iter().map(|v| v.0));
    let mean_worse = mean(valid.iter().map(|v| v.1));
    Ordering {
        name: name.to_string(),
        clips: valid.len(),
        fraction,
        mean_better,
        mean_worse,
        passed: !valid.is_empty() && fraction >= min_fraction && mean_better < mean_worse,
    }
}

/// The orderings checked on a set of per-clip results.
pub fn orderings(clips: &[ClipResult], motion_threshold: f64, min_fraction: f64) -> Vec<Ordering> {
    let all: Vec<&ClipResult> = clips.iter().collect();
    let moving: Vec<&ClipResult> = clips.iter().filter(|c| c.motion > motion_threshold).collect();
    vec![
        ordering("TC full < no-schemes", &all, Method::Full, Method::NoSchemes, |s| s.tc, min_fraction),
        ordering("TC full < prev-sample", &all, Method::Full, Method::PrevSample, |s| s.tc, min_fraction),
        ordering(
            &format!("color full < no-ref-attn (motion > {motion_threshold} px)"),
            &moving,
            Method::Full,
            Method::NoRefAttn,
            |s| s.color,
            min_fraction,
        ),
    ]
}

/// Samples every test clip with every method and scores it.
pub fn evaluate(
    cfg: &RunConfig,
    full: &Denoiser,
    no_ref: &Denoiser,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<ClipResult>> {
    let eval = cfg.eval.metrics();
    let mut results = Vec::with_capacity(cfg.eval.test_clips);
    let start = Instant::now();
    for i in 0..cfg.eval.test_clips {
        let clip = gen_clip(&test_clip_spec(cfg, i))?;
        let mut scores = [MethodScores::default(); 4];
        for (k, method) in Method::ALL.into_iter().enumerate() {
            let net = if method == Method::NoRefAttn { no_ref } else { full };
            let den = WithControl {
                net,
                use_controlnet: cfg.sample.use_controlnet,
            };
            let video = sample_long(
                &den,
                net.config.frames,
                &clip.sketches,
                &clip.frames[0],
                &clip.sketches[0],
                method.scheme(),
                &cfg.sample,
                false,
            )?;
            scores[k] = score_method(&video.frames, &clip, &eval)?;
        }
        let motion = clip.mean_motion();
        log(&format!(
            "test clip {i}: motion {motion:.2} px, TC full {:.3} / no-schemes {:.3} / prev {:.3}, color full {:.3} / no-ref {:.3} ({:.0} s)",
            scores[0].tc,
            scores[2].tc,
            scores[3].tc,
            scores[0].color,
            scores[1].color,
            start.elapsed().as_secs_f64()
        ));
        results.push(ClipResult { id: i, motion, scores });
    }
    Ok(results)
}

/// Full desk-scale run. Trained checkpoints and per-clip results are cached
/// in `cache` and reused while the configuration is unchanged.
pub fn run_ablation(cfg: &RunConfig, cache: &Path, log: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
    log(&format!("generating {} training clips", cfg.data.clips));
    let clips = training_clips(cfg)?;
    let train_clips = clips.len();
    let dataset = Dataset::new(clips, cfg.model.frames)?;

    let full_cfg = DenoiserConfig {
        reference_attention: true,
        ..cfg.model.clone()
    };
    let no_ref_cfg = DenoiserConfig {
        reference_attention: false,
        ..cfg.model.clone()
    };
    let (full_params, full_fit) = trained_model(cfg, &full_cfg, "full", &dataset, cache, log)?;
    let (no_ref_params, no_ref_fit) = trained_model(cfg, &no_ref_cfg, "no-ref-attn", &dataset, cache, log)?;
    drop(dataset);

    let results_path = cache.join("results.csv");
    let results_key_path = cache.join("results.key");
    let key = cache_key(&[
        cfg.to_toml()?,
        format!("full_probe = {}\nno_ref_probe = {}", full_fit.probe_after, no_ref_fit.probe_after),
    ]);
    let cached = fs::read_to_string(&results_key_path).ok().as_deref() == Some(key.as_str());
    let clips = match cached
        .then(|| fs::read_to_string(&results_path).ok())
        .flatten()
        .and_then(|t| AblationReport::clips_from_csv(&t))
    {
        Some(c) if c.len() == cfg.eval.test_clips => {
            log(&format!("reusing {}", results_path.display()));
            c
        }
        _ => {
            let full = Denoiser::new(full_cfg, full_params);
            let no_ref = Denoiser::new(no_ref_cfg, no_ref_params);
            let clips = evaluate(cfg, &full, &no_ref, log)?;
            clips
        }
    };
    let report = AblationReport {
        train_clips,
        fits: vec![full_fit, no_ref_fit],
        orderings: orderings(&clips, cfg.eval.motion_threshold, cfg.eval.min_fraction),
        clips,
    };
    fs::write(&results_path, report.to_csv()).map_err(|e| Error::io(&results_path, e))?;
    fs::write(&results_key_path, &key).map_err(|e| Error::io(&results_key_path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub overlap: usize,
    pub segments: usize,
    pub seconds: f64,
    /// Time relative to sampling without overlap.
    pub ratio: f64,
}

/// Times long-video sampling for each overlap against a no-overlap baseline
/// (independent segments). Uses a randomly initialized model of the
/// configured architecture with `eval.sweep_frames` frames per segment;
/// each timing is the best of `repeats`.
pub fn overlap_sweep(cfg: &RunConfig, overlaps: &[usize], repeats: usize, log: &mut dyn FnMut(&str)) -> Result<Vec<SweepRow>> {
    let n = cfg.eval.sweep_frames;
    let l = cfg.eval.sweep_length;
    if let Some(&bad) = overlaps.iter().find(|&&o| o >= n) {
        return Err(Error::Config(format!("overlap {bad} must be below the {n}-frame segment")));
    }
    let model_cfg = DenoiserConfig {
        frames: n,
        ..cfg.model.clone()
    };
    let params: ParamStore = build(&model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.sample.seed))?;
    let net = Denoiser::new(model_cfg, params);
    let den = WithControl {
        net: &net,
        use_controlnet: cfg.sample.use_controlnet,
    };
    let spec = ClipSpec {
        length: l,
        ..cfg.data.clip_spec(0)
    };
    let clip = gen_clip(&spec)?;
    let time = |overlap: usize, scheme: Scheme| -> Result<(f64, usize)> {
        let sc = SamplerConfig {
            overlap,
            // Prev-reference can look back at most `overlap` frames.
            shift: cfg.sample.shift.min(overlap.max(1)),
            ..cfg.sample.clone()
        };
        let mut best = f64::INFINITY;
        let mut segments = 0;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let v = sample_long(&den, n, &clip.sketches, &clip.frames[0], &clip.sketches[0], scheme, &sc, false)?;
            best = best.min(start.elapsed().as_secs_f64());
            segments = v.plan.segments.len();
        }
        Ok((best, segments))
    };
    let (base, base_segments) = time(0, Scheme::NoSchemes)?;
    log(&format!("overlap 0: {base_segments} segments, {base:.2} s"));
    let mut rows = vec![SweepRow {
        overlap: 0,
        segments: base_segments,
        seconds: base,
        ratio: 1.0,
    }];
    for &o in overlaps {
        let scheme = if o == 0 { Scheme::NoSchemes } else { Scheme::Full };
        let (secs, segments) = time(o, scheme)?;
        log(&format!("overlap {o}: {segments} segments, {secs:.2} s, ratio {:.2}", secs / base));
        rows.push(SweepRow {
            overlap: o,
            segments,
            seconds: secs,
            ratio: secs / base,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("overlap,segments,seconds,ratio\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.4}", r.overlap, r.segments, r.seconds, r.ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_error_of_ground_truth_is_zero() {
        let clip = gen_clip(&ClipSpec {
            seed: 3,
            length: 4,
            height: 32,
            width: 32,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(color_error(&clip.frames, &clip.labels, &clip.palette).unwrap(), 0.0);
        let grey: Vec<Tensor> = clip.frames.iter().map(|f| f.map(|_| 0.5)).collect();
        assert!(color_error(&grey, &clip.labels, &clip.palette).unwrap() > 0.05);
    }

    #[test]
    fn orderings_count_wins_and_means() {
        let mk = |id, motion, full_tc: f64, other_tc: f64| ClipResult {
            id,
            motion,
            scores: [
                MethodScores { tc: full_tc, color: 0.1, ..Default::default() },
                MethodScores { tc: 1.0, color: 0.3, ..Default::default() },
                MethodScores { tc: other_tc, ..Default::default() },
                MethodScores { tc: other_tc, ..Default::default() },
            ],
        };
        let clips = vec![mk(0, 6.0, 1.0, 1.2), mk(1, 2.0, 1.1, 1.05), mk(2, 7.0, 1.0, 1.3)];
        let o = orderings(&clips, 5.0, 0.6);
        assert!((o[0].fraction - 2.0 / 3.0).abs() < 1e-12);
        assert!(o[0].passed);
        assert_eq!(o[2].clips, 2);
        assert!(o[2].passed);
        let strict = orderings(&clips, 5.0, 0.9);
        assert!(!strict[0].passed);
        let report = AblationReport {
            train_clips: 1,
            fits: vec![],
            clips: clips.clone(),
            orderings: o,
        };
        assert_eq!(AblationReport::clips_from_csv(&report.to_csv()).unwrap(), clips);
    }
}
