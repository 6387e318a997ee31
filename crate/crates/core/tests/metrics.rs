use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidcolor::data::{extract_sketch, gen_clip, ClipSpec};
use vidcolor::metrics::{
    edmap_rmse, edmd, edt, edt_spaced, psnr, resize, resize_flow, score_clip, ssim, tc, warp, EvalConfig,
};
use vidcolor::tensor::Tensor;

fn brute_force(mask: &[bool], h: usize, w: usize, sx: f64, sy: f64) -> Vec<f64> {
    let lines: Vec<(usize, usize)> = (0..h * w).filter(|&p| mask[p]).map(|p| (p / w, p % w)).collect();
    (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            lines
                .iter()
                .map(|&(ly, lx)| {
                    let dx = sx * (x as f64 - lx as f64);
                    let dy = sy * (y as f64 - ly as f64);
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let density = rng.gen_range(0.001..0.3);
    let mut m: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    if !m.iter().any(|&v| v) {
        m[rng.gen_range(0..h * w)] = true;
    }
    m
}

#[test]
fn edt_matches_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = random_mask(&mut rng, 32, 32);
        assert_eq!(edt(&m, 32, 32).unwrap(), brute_force(&m, 32, 32, 1.0, 1.0));
    }
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let m = random_mask(&mut rng, h, w);
        let got = edt_spaced(&m, h, w, 4.0, 2.5).unwrap();
        let want = brute_force(&m, h, w, 4.0, 2.5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }
}

#[test]
fn edt_examples() {
    let mut m = vec![false; 9];
    m[0] = true;
    let d = edt(&m, 3, 3).unwrap();
    let s = |v: f64| v.sqrt();
    assert_eq!(d, vec![0.0, 1.0, 2.0, 1.0, s(2.0), s(5.0), 2.0, s(5.0), s(8.0)]);
    assert_eq!(edt(&[true; 12], 3, 4).unwrap(), vec![0.0; 12]);
    assert!(edt(&[false; 9], 3, 3).is_err());
    assert!(edt(&[true; 8], 3, 3).is_err());
}

#[test]
fn edmd_examples() {
    let line = |row: usize| (0..32 * 32).map(|p| p / 32 == row).collect::<Vec<_>>();
    let rmse = edmap_rmse(&line(10), &line(12), 32, 32, 1.0, 1.0).unwrap();
    // Distance maps |y-10| and |y-12| differ by 2 on every row except 11.
    assert!((rmse - (31.0f64 * 4.0 / 32.0).sqrt()).abs() < 1e-12);

    let clip = gen_clip(&ClipSpec { seed: 3, length: 4, height: 32, width: 32, ..Default::default() }).unwrap();
    let r = edmd(&clip.frames, &clip.sketches, &EvalConfig::default()).unwrap();
    assert_eq!(r.value, 0.0);
    assert_eq!(r.skipped, 0);

    let blank = vec![Tensor::<f32>::full([3, 32, 32], 0.5); 4];
    let r = edmd(&blank, &clip.sketches, &EvalConfig::default()).unwrap();
    assert_eq!(r.skipped, 4);
    assert!(r.value.is_nan());

    let other = gen_clip(&ClipSpec { seed: 4, length: 4, height: 32, width: 32, ..Default::default() }).unwrap();
    let r = edmd(&other.frames, &clip.sketches, &EvalConfig::default()).unwrap();
    assert!(r.value > 0.0);
    // At native resolution the distances shrink by the resize factor.
    let native = edmd(&other.frames, &clip.sketches, &EvalConfig { resolution: 0 }).unwrap();
    assert!((r.value - 8.0 * native.value).abs() < 1e-9 * r.value);
}

#[test]
fn warp_examples() {
    let ramp = Tensor::<f64>::from_fn([1, 3, 5], |i| (i % 5) as f64);
    let flow = Tensor::<f64>::from_fn([2, 3, 5], |i| if i < 15 { -1.0 } else { 0.0 });
    let w = warp(&ramp, &flow).unwrap();
    for (i, &v) in w.data().iter().enumerate() {
        assert_eq!(v, ((i % 5) as f64 - 1.0).max(0.0));
    }
    let half = Tensor::<f64>::from_fn([2, 3, 5], |i| if i < 15 { 0.5 } else { 0.0 });
    assert_eq!(warp(&ramp, &half).unwrap().data()[1], 1.5);
    assert!(warp(&ramp, &Tensor::zeros([2, 3, 4])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_flow_warp_is_identity(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::<f32>::randn([3, 9, 7], 1.0, &mut r);
        prop_assert_eq!(warp(&f, &Tensor::zeros([2, 9, 7])).unwrap(), f);
    }

    #[test]
    fn tc_of_identical_videos_is_one(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::rand_uniform([3, 16, 16], 0.0, 1.0, &mut r)).collect();
        let flows: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn([2, 16, 16], 3.0, &mut r)).collect();
        let cfg = EvalConfig { resolution: 32 };
        let rep = tc(&frames, &frames, &flows, &cfg).unwrap();
        prop_assert!((rep.value - 1.0).abs() < 1e-6);
        // Uniformly brighter generated frames leave TC unchanged.
        let bright: Vec<_> = frames.iter().map(|f| f.map(|v| 2.0 * v)).collect();
        let rep2 = tc(&bright, &frames, &flows, &cfg).unwrap();
        prop_assert!((rep2.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::rand_uniform([3, 16, 16], 0.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform([3, 16, 16], 0.0, 1.0, &mut r);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let e = edmap_rmse(
            &extract_sketch(&a).data().iter().map(|&v| v > 0.5).collect::<Vec<_>>(),
            &extract_sketch(&b).data().iter().map(|&v| v > 0.5).collect::<Vec<_>>(),
            16, 16, 1.0, 1.0,
        );
        if let Ok(v) = e {
            prop_assert!(v >= 0.0);
        }
    }
}

#[test]
fn tc_on_synthetic_clip() {
    let clip = gen_clip(&ClipSpec { seed: 7, length: 8, height: 32, width: 32, ..Default::default() }).unwrap();
    let cfg = EvalConfig::default();
    let same = tc(&clip.frames, &clip.frames, &clip.flows, &cfg).unwrap();
    assert!((same.value - 1.0).abs() < 1e-6);
    assert_eq!(same.pairs, 7);
    let frozen = vec![clip.frames[0].clone(); clip.len()];
    let r = tc(&frozen, &clip.frames, &clip.flows, &cfg).unwrap();
    assert!(r.value.is_finite() && r.value >= 0.0);
    let black = vec![Tensor::<f32>::zeros([3, 32, 32]); clip.len()];
    let r = tc(&clip.frames, &black, &clip.flows, &cfg).unwrap();
    assert_eq!(r.guarded, 7);
    assert!(tc(&clip.frames[..1], &clip.frames[..1], &[], &cfg).is_err());
    assert!(tc(&clip.frames, &clip.frames, &clip.flows[1..], &cfg).is_err());
}

#[test]
fn psnr_ssim_examples() {
    let a = Tensor::<f64>::full([3, 16, 16], 0.25);
    let b = Tensor::<f64>::full([3, 16, 16], 0.35);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let n = Tensor::<f64>::rand_uniform([3, 20, 20], 0.0, 1.0, &mut r);
    assert!((ssim(&n, &n).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&n, &n.map(|v| 1.0 - v)).unwrap() < 0.5);
    assert!(ssim(&Tensor::<f64>::zeros([3, 8, 8]), &Tensor::zeros([3, 8, 8])).is_err());
    assert!(psnr(&a, &Tensor::zeros([3, 4, 4])).is_err());
}

#[test]
fn resizing() {
    let t = Tensor::<f64>::from_fn([1, 4, 4], |i| (i % 4) as f64);
    assert_eq!(resize(&t, 4, 4).unwrap(), t);
    let up = resize(&t, 8, 8).unwrap();
    assert_eq!(up.shape(), &[1, 8, 8]);
    assert_eq!(up.data()[0], 0.0);
    assert_eq!(up.data()[7], 3.0);
    let flow = Tensor::<f64>::full([2, 4, 4], 1.0);
    let f = resize_flow(&flow, 8, 16).unwrap();
    assert_eq!(f.data()[0], 4.0);
    assert_eq!(f.data()[128], 2.0);
}

#[test]
fn clip_scores() {
    let clip = gen_clip(&ClipSpec { seed: 2, length: 5, height: 32, width: 32, ..Default::default() }).unwrap();
    let s = score_clip(&clip.frames, &clip.frames, &clip.flows, &clip.sketches, &EvalConfig::default()).unwrap();
    assert_eq!(s.psnr, f64::INFINITY);
    assert!((s.ssim - 1.0).abs() < 1e-9);
    assert!((s.tc.value - 1.0).abs() < 1e-6);
    assert_eq!(s.edmd.value, 0.0);
}
