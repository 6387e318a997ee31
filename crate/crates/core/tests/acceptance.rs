//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always show up in `cargo test` output.
//!
//! Criterion 9 trains two models and caches them (and its per-clip results)
//! under `target/desk-experiment`; delete that directory to recompute.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidcolor::config::RunConfig;
use vidcolor::data::{gen_clip, ClipSpec};
use vidcolor::edm::{self, NoiseSchedule};
use vidcolor::experiment::run_ablation;
use vidcolor::metrics::{edmd, edt, psnr, ssim, tc, EvalConfig};
use vidcolor::model::{self, build, checkpoint, segment_modes, AttentionMode, Denoiser, DenoiserConfig, ForwardInput};
use vidcolor::sampler::{sample_long, sample_segment, BundleEntry, SamplerConfig, Scheme, SegmentDenoiser, SegmentRequest, WithControl};
use vidcolor::tensor::{gradcheck, BoundParams, GradcheckOptions, Graph, ParamStore, Tensor, Var};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy(frames: usize) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        norm_groups: 4,
        embed_dim: 16,
        sketch_features: 4,
        head_dim: 8,
        frames,
        ..Default::default()
    }
}

fn c1_schedule() -> Outcome {
    let s = NoiseSchedule::default();
    let (top, bottom) = (s.sigma_at(25).map_err(|e| e.to_string())?, s.sigma_at(1).map_err(|e| e.to_string())?);
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    ensure!(rel(top, 700.0) < 1e-9, "sigma_25 = {top}");
    ensure!(rel(bottom, 0.002) < 1e-9, "sigma_1 = {bottom}");
    let roots: Vec<f64> = (1..=25).map(|t| s.sigma_at(t).unwrap().powf(1.0 / 7.0)).collect();
    let step = (roots[24] - roots[0]) / 24.0;
    let worst = roots
        .iter()
        .enumerate()
        .map(|(i, r)| ((r - (roots[0] + step * i as f64)) / r).abs())
        .fold(0.0, f64::max);
    ensure!(worst < 1e-9, "sigma^(1/7) deviates from affine by {worst:e}");
    Ok(format!("sigma_25 = {top}, sigma_1 = {bottom}, affine deviation {worst:.1e}"))
}

fn c2_zero_controlnet() -> Outcome {
    let cfg = toy(3);
    let params: ParamStore = build(&cfg, &mut rng(1)).map_err(|e| e.to_string())?;
    let net = Denoiser::new(cfg, params);
    let modes = vec![AttentionMode::Standard; 3];
    let mut r = rng(2);
    for trial in 0..50 {
        let x = Tensor::randn([4, 96, 8, 8], 1.0, &mut r);
        let density = r.gen_range(0.01..0.5);
        let s = Tensor::from_fn([4, 1, 32, 32], |_| if r.gen_bool(density) { 1.0 } else { 0.0 });
        let c_noise = r.gen_range(-2.0..2.0);
        let with = net.unet(&x, &s, c_noise, 1, &modes, true).map_err(|e| e.to_string())?;
        let without = net.unet(&x, &s, c_noise, 1, &modes, false).map_err(|e| e.to_string())?;
        ensure!(with.data() == without.data(), "outputs differ on input {trial}");
    }
    Ok("50 random inputs bit-identical".into())
}

fn contract(g: &mut Graph<f64>, out: Var, seed: u64) -> vidcolor::Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::randn(shape, 1.0, &mut rng(seed ^ 0xabcdef)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn layer_checks(seed: u64, worst: &mut f64) -> Result<(), String> {
    let mut r = rng(seed);
    let tol = 1e-4;
    let mut check = |inputs: Vec<Tensor<f64>>, name: &str, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> vidcolor::Result<Var>| {
        let rep = gradcheck(
            |g, v| {
                let out = f(g, v)?;
                contract(g, out, seed)
            },
            &inputs,
            &GradcheckOptions::with_tolerance(tol),
        )
        .map_err(|e| e.to_string())?;
        *worst = worst.max(rep.max_rel_err);
        ensure!(rep.passed(), "{name}: relative error {} (seed {seed})", rep.max_rel_err);
        Ok(())
    };
    let (b, c, h, w) = (r.gen_range(1..3), 2 * r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5));
    let x = Tensor::<f64>::randn([b, c, h, w], 1.0, &mut r);
    let y = Tensor::<f64>::randn([b, c, h, w], 1.0, &mut r);
    let xy = vec![x.clone(), y.clone()];
    check(xy.clone(), "add", &|g, v| g.add(v[0], v[1]))?;
    check(xy.clone(), "sub", &|g, v| g.sub(v[0], v[1]))?;
    check(xy.clone(), "mul", &|g, v| g.mul(v[0], v[1]))?;
    check(xy.clone(), "concat", &|g, v| g.concat(&[v[0], v[1]], 1))?;
    check(xy, "mse", &|g, v| g.mse(v[0], v[1]))?;
    check(vec![x.clone()], "scale", &|g, v| Ok(g.scale(v[0], 0.37)))?;
    check(vec![x.clone()], "silu", &|g, v| Ok(g.silu(v[0])))?;
    check(vec![x.clone()], "permute", &|g, v| g.permute(v[0], &[2, 0, 3, 1]))?;
    check(vec![x.clone()], "slice", &|g, v| g.slice(v[0], 2, 1, h))?;
    check(vec![x.clone()], "softmax", &|g, v| g.softmax(v[0]))?;
    check(vec![x.clone()], "upsample", &|g, v| g.upsample2x(v[0]))?;
    check(vec![x.clone()], "mean", &|g, v| Ok(g.mean(v[0])))?;
    check(vec![x.clone(), Tensor::randn([c], 1.0, &mut r)], "bias", &|g, v| g.add_bias(v[0], v[1]))?;
    check(
        vec![x.clone(), Tensor::randn([c], 1.0, &mut r), Tensor::randn([c], 1.0, &mut r)],
        "group_norm",
        &|g, v| g.group_norm(v[0], v[1], v[2], 2),
    )?;
    let oc = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    check(
        vec![x.clone(), Tensor::randn([oc, c, 3, 3], 0.5, &mut r), Tensor::randn([oc], 1.0, &mut r)],
        "conv2d",
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), (stride, stride), (1, 1)),
    )?;
    let n = r.gen_range(1..4);
    check(
        vec![
            Tensor::randn([b, c, n, h, w], 1.0, &mut r),
            Tensor::randn([oc, c, 3, 1, 1], 0.5, &mut r),
            Tensor::randn([oc], 1.0, &mut r),
        ],
        "temporal_conv3d",
        &|g, v| g.temporal_conv3d(v[0], v[1], Some(v[2])),
    )?;
    let (tq, tk, d) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..5));
    let bias: Vec<f64> = (0..b * tk).map(|_| r.gen_range(-1.0..1.0)).collect();
    check(
        vec![
            Tensor::randn([b, tq, d], 1.0, &mut r),
            Tensor::randn([b, tk, d], 1.0, &mut r),
            Tensor::randn([b, tk, d], 1.0, &mut r),
        ],
        "attention",
        &|g, v| g.attention(v[0], v[1], v[2], Some(&bias)),
    )?;
    check(
        vec![Tensor::randn([3, 4], 1.0, &mut r), Tensor::randn([2, 4], 1.0, &mut r), Tensor::randn([2], 1.0, &mut r)],
        "linear",
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    Ok(())
}

fn c3_gradients() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        layer_checks(seed, &mut worst)?;
    }

    let cfg = DenoiserConfig {
        base_channels: 4,
        norm_groups: 2,
        embed_dim: 6,
        sketch_features: 2,
        head_dim: 2,
        frames: 3,
        ..Default::default()
    };
    let mut r = rng(10);
    let mut params: ParamStore<f64> = build(&cfg, &mut r).map_err(|e| e.to_string())?;
    for (_, t) in params.iter_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.1, &mut r);
        *t = t.zip_map(&noise, |a, b| a + b).unwrap();
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let (e, h) = (5, 8);
    let clean = Tensor::<f64>::randn([e, 48, h, h], 1.0, &mut r);
    let cond = Tensor::<f64>::randn([e, 48, h, h], 1.0, &mut r);
    let noise = Tensor::<f64>::randn([e, 48, h, h], 1.0, &mut r);
    let sketches = Tensor::<f64>::rand_uniform([e, 1, 4 * h, 4 * h], 0.0, 1.0, &mut r);
    let modes = segment_modes(3, 2, 1, 10.0, 1);
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    inputs.push(clean);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(v.iter().copied()));
        let noise = g.constant(noise.clone());
        let condv = g.constant(cond.clone());
        let sk = g.constant(sketches.clone());
        edm::dsm_loss(g, v[names.len()], noise, 0.8, 0.5, |g, noised, sigma| {
            edm::denoise_graph(g, noised, sigma, 0.5, |g, scaled, c_noise| {
                let x = g.concat(&[condv, scaled], 1)?;
                let input = ForwardInput {
                    x,
                    sketches: sk,
                    c_noise,
                    refs: 2,
                    modes: modes.clone(),
                    use_controlnet: true,
                };
                model::forward(g, &bound, &cfg, &input)
            })
        })
    };
    let opts = GradcheckOptions {
        tolerance: 1e-3,
        max_coords_per_input: Some(3),
        seed: 11,
        ..Default::default()
    };
    let rep = gradcheck(f, &inputs, &opts).map_err(|e| e.to_string())?;
    ensure!(rep.passed(), "end-to-end relative error {} at {:?}", rep.max_rel_err, rep.worst);
    Ok(format!(
        "layers worst {worst:.1e} over 20 trials; end-to-end worst {:.1e} over {} coordinates",
        rep.max_rel_err, rep.checked
    ))
}

struct Affine {
    a: f64,
    b: f64,
}

impl SegmentDenoiser<f64> for Affine {
    fn denoise(
        &self,
        cond: &Tensor<f64>,
        noised: &Tensor<f64>,
        _: &Tensor<f64>,
        _: f64,
        _: usize,
        _: &[AttentionMode],
    ) -> vidcolor::Result<Tensor<f64>> {
        noised.zip_map(cond, |x, c| self.a * x + self.b * c)
    }
}

fn c4_sampler_oracle() -> Outcome {
    let schedule = NoiseSchedule::default();
    let config = SamplerConfig::default();
    let (a, b, n) = (0.3, 0.6, 4);
    let mut r = rng(5);
    let cond = Tensor::<f64>::randn([48, 2, 2], 1.0, &mut r);
    let sk: Vec<Tensor<f64>> = (0..n).map(|_| Tensor::rand_uniform([1, 8, 8], 0.0, 1.0, &mut r)).collect();
    let bundle = vec![BundleEntry { cond: cond.clone(), sketch: sk[0].clone() }];
    let modes = vec![AttentionMode::Standard; n];
    let req = SegmentRequest {
        sketches: &sk,
        video_cond: &cond,
        bundle: &bundle,
        modes: &modes,
        cache: None,
        first_frame: 1,
        record: 0,
        trace: false,
    };
    let out = sample_segment(&Affine { a, b }, &req, &config, &mut rng(9)).map_err(|e| e.to_string())?;
    let steps = schedule.steps;
    let sig = |t: usize| -> f64 {
        if t == 0 {
            return 0.0;
        }
        let (lo, hi) = (0.002f64.powf(1.0 / 7.0), 700f64.powf(1.0 / 7.0));
        (lo + (t as f64 - 1.0) / (steps as f64 - 1.0) * (hi - lo)).powi(7)
    };
    let (mut gain, mut offset) = (1.0, 0.0);
    for t in (1..=steps).rev() {
        let w = (sig(t) - sig(t - 1)) / sig(t);
        let c = sig(t - 1) / sig(t) + w * a;
        gain *= c;
        offset = c * offset + w * b;
    }
    let init = Tensor::<f64>::randn([1 + n, 48, 2, 2], sig(steps), &mut rng(9));
    let per = cond.numel();
    let mut worst = 0.0f64;
    for (j, lat) in out.latents.iter().enumerate() {
        for (i, &v) in lat.data().iter().enumerate() {
            worst = worst.max((v - (gain * init.data()[(1 + j) * per + i] + offset * cond.data()[i])).abs());
        }
    }
    ensure!(worst < 1e-10, "max deviation {worst:e}");
    Ok(format!("{steps} steps, max deviation {worst:.1e}"))
}

fn c5_blending() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("toy.ckpt");
    let cfg = toy(14);
    let params: ParamStore = build(&cfg, &mut rng(3)).map_err(|e| e.to_string())?;
    checkpoint::save(&ckpt, &cfg, &params).map_err(|e| e.to_string())?;
    let (cfg, params) = checkpoint::load::<f32>(&ckpt).map_err(|e| e.to_string())?;
    let net = Denoiser::new(cfg, params);
    let (l, n, o) = (24, 14, 4);
    let clip = gen_clip(&ClipSpec { seed: 4, length: l, height: 32, width: 32, ..Default::default() }).map_err(|e| e.to_string())?;
    let config = SamplerConfig { overlap: o, ..Default::default() };
    let den = WithControl { net: &net, use_controlnet: true };
    let video = sample_long(&den, n, &clip.sketches, &clip.frames[0], &clip.sketches[0], Scheme::Full, &config, true)
        .map_err(|e| e.to_string())?;
    ensure!(video.plan.segments == vec![(1, 14), (11, 24)], "plan {:?}", video.plan.segments);
    let (first, second) = (&video.segments[0], &video.segments[1]);
    let trace = second.trace.as_ref().ok_or("no trace")?;
    for t in 1..=config.schedule.steps {
        let cached = first.cache.get(t).map_err(|e| e.to_string())?;
        for j in 0..o {
            ensure!(trace[&t][j] == cached[j], "step {t}: frame {} differs from the cache", 11 + j);
        }
    }
    for j in 0..o {
        ensure!(second.latents[j] == first.latents[n - o + j], "final latent of frame {} differs", 11 + j);
    }
    Ok(format!("{o} overlapped frames bit-identical at all {} steps", config.schedule.steps))
}

fn c6_edt() -> Outcome {
    let mut r = rng(1);
    for trial in 0..200 {
        let density = r.gen_range(0.001..0.3);
        let mut m: Vec<bool> = (0..1024).map(|_| r.gen_bool(density)).collect();
        if !m.iter().any(|&v| v) {
            m[r.gen_range(0..1024)] = true;
        }
        let fast = edt(&m, 32, 32).map_err(|e| e.to_string())?;
        let lines: Vec<(i64, i64)> = (0..1024).filter(|&p| m[p]).map(|p| ((p / 32) as i64, (p % 32) as i64)).collect();
        for p in 0..1024 {
            let (y, x) = ((p / 32) as i64, (p % 32) as i64);
            let d2 = lines.iter().map(|&(ly, lx)| (y - ly).pow(2) + (x - lx).pow(2)).min().unwrap();
            ensure!(fast[p] == (d2 as f64).sqrt(), "mask {trial} pixel {p}: {} vs {}", fast[p], (d2 as f64).sqrt());
        }
    }
    Ok("200 masks exactly equal to brute force".into())
}

fn c7_metric_identities() -> Outcome {
    let clip = gen_clip(&ClipSpec { seed: 7, length: 8, height: 32, width: 32, ..Default::default() }).map_err(|e| e.to_string())?;
    let cfg = EvalConfig::default();
    let t = tc(&clip.frames, &clip.frames, &clip.flows, &cfg).map_err(|e| e.to_string())?;
    ensure!((t.value - 1.0).abs() < 1e-6, "TC = {}", t.value);
    let e = edmd(&clip.frames, &clip.sketches, &cfg).map_err(|e| e.to_string())?;
    ensure!(e.value == 0.0, "EDMD = {}", e.value);
    let f = &clip.frames[3];
    let p = psnr(f, f).map_err(|e| e.to_string())?;
    ensure!(p == f64::INFINITY, "PSNR(x, x) = {p}");
    let s = ssim(f, f).map_err(|e| e.to_string())?;
    ensure!((s - 1.0).abs() < 1e-9, "SSIM(x, x) = {s}");
    let a = Tensor::<f64>::full([3, 16, 16], 0.25);
    let b = Tensor::<f64>::full([3, 16, 16], 0.35);
    let p20 = psnr(&a, &b).map_err(|e| e.to_string())?;
    ensure!((p20 - 20.0).abs() < 1e-9, "PSNR for an offset of 0.1 = {p20}");
    Ok(format!("TC {:.8}, EDMD {}, PSNR inf / {p20:.6} dB, SSIM {s}", t.value, e.value))
}

fn c8_amplification() -> Outcome {
    let alpha = 10.0f64;
    let mut worst = 0.0f64;
    for tk in 2..=64usize {
        let mut g = Graph::<f64>::new();
        // The op wants V shaped like K, so the head width is T_k. With q = 0 the keys never matter.
        let q = g.constant(Tensor::zeros([1, 1, tk]));
        let k = g.constant(Tensor::randn([1, tk, tk], 1.0, &mut rng(tk as u64)));
        // One-hot values expose each key's weight in the output.
        let v = g.constant(Tensor::from_fn([1, tk, tk], |i| if i / tk == i % tk { 1.0 } else { 0.0 }));
        let modes = [AttentionMode::OverlapAmplified { alpha }];
        let amplified = tk - 1;
        let bias: Vec<f64> = (0..tk).map(|j| if j == amplified { model::amplify_bias(&modes[0]) } else { 0.0 }).collect();
        let o = g.attention(q, k, v, Some(&bias)).map_err(|e| e.to_string())?;
        let w = g.value(o).data().to_vec();
        let expect = alpha / (tk as f64 - 1.0 + alpha);
        worst = worst.max((w[amplified] - expect).abs());
        let plain = 1.0 / (tk as f64 - 1.0 + alpha);
        for (j, &wj) in w.iter().enumerate().take(amplified) {
            ensure!((wj - plain).abs() < 1e-6, "T_k = {tk}: plain key {j} weight {wj}");
        }
    }
    ensure!(worst < 1e-6, "amplified weight off by {worst:e}");
    Ok(format!("T_k = 2..64, max error {worst:.1e}"))
}

fn c9_desk_experiment() -> Outcome {
    let cfg = RunConfig::load(&workspace().join("configs/desk.toml")).map_err(|e| e.to_string())?;
    let cache = workspace().join("target/desk-experiment");
    let mut log = |m: &str| eprintln!("  [desk] {m}");
    let report = run_ablation(&cfg, &cache, &mut log).map_err(|e| e.to_string())?;
    for line in report.table().lines() {
        println!("    {line}");
    }
    ensure!(report.train_clips >= 500, "only {} training clips", report.train_clips);
    ensure!(report.clips.len() >= 50, "only {} test clips", report.clips.len());
    ensure!(cfg.eval.test_length >= 3 * cfg.model.frames, "test clips shorter than 3N");
    for f in &report.fits {
        ensure!(f.passed(), "{} probe loss {:.4} -> {:.4} did not halve", f.label, f.probe_before, f.probe_after);
    }
    let failed: Vec<&str> = report.orderings.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    ensure!(failed.is_empty(), "orderings failed: {}", failed.join("; "));
    Ok(format!("{} orderings hold on {} test clips", report.orderings.len(), report.clips.len()))
}

fn c10_overlap_sweep() -> Outcome {
    let config = workspace().join("configs/desk.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_vidcolor"))
        .args(["ablate", "--config", config.to_str().unwrap(), "--overlap", "2,4,6,8,10", "--repeats", "2"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "ablate --overlap failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let rows: Vec<(usize, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let overlaps: Vec<usize> = rows.iter().map(|r| r.0).collect();
    ensure!(overlaps == vec![0, 2, 4, 6, 8, 10], "rows {overlaps:?}");
    let ratios: Vec<f64> = rows.iter().skip(1).map(|r| r.1).collect();
    ensure!(ratios.windows(2).all(|w| w[1] > w[0]), "ratios not increasing: {ratios:?}");
    let shown: Vec<String> = rows.iter().skip(1).map(|(o, r)| format!("o={o}: {r:.2}")).collect();
    Ok(shown.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("schedule exactness", c1_schedule),
        ("zero-init ControlNet no-op", c2_zero_controlnet),
        ("gradient suite", c3_gradients),
        ("sampler oracle", c4_sampler_oracle),
        ("blending bit-exactness", c5_blending),
        ("EDT oracle", c6_edt),
        ("metric identities", c7_metric_identities),
        ("amplification semantics", c8_amplification),
        ("desk-scale ablation", c9_desk_experiment),
        ("overlap sweep", c10_overlap_sweep),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.1} s)", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} ({secs:.1} s)", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
