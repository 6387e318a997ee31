use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidcolor::data::{gen_clip, ClipSpec};
use vidcolor::edm::TrainingNoiseConfig;
use vidcolor::model::{build, checkpoint, DenoiserConfig};
use vidcolor::tensor::{Graph, ParamStore, Tensor};
use vidcolor::training::{
    assemble_batch, batch_loss, probe_batches, probe_loss, train, Adam, Dataset, EncodedClip, ParamGroups,
    TrainConfig, TrainOutputs,
};
use vidcolor::{vae, Error};

fn tiny(frames: usize) -> DenoiserConfig {
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

fn dataset(clips: usize, length: usize, frames: usize) -> Dataset {
    let encoded = (0..clips)
        .map(|i| {
            let c = gen_clip(&ClipSpec {
                seed: 100 + i as u64,
                length,
                height: 32,
                width: 32,
                ..Default::default()
            })
            .unwrap();
            EncodedClip::from_frames(&c.frames, &c.sketches).unwrap()
        })
        .collect();
    Dataset::new(encoded, frames).unwrap()
}

#[test]
fn batches_carry_the_reference_entry() {
    let ds = dataset(3, 10, 4);
    assert_eq!(ds.sets.len(), 3 * 6);
    let noise = TrainingNoiseConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let b = assemble_batch(&ds, &noise, &mut rng).unwrap();
        assert_eq!(b.targets.shape()[0], 5);
        assert!(b.reference < b.window.start);
        let reference = &ds.clips[b.clip].latents[b.reference];
        for e in 0..5 {
            assert_eq!(&b.cond.narrow0(e, e + 1).unwrap().reshape(reference.shape().to_vec()).unwrap(), reference);
        }
        assert_eq!(&b.targets.narrow0(0, 1).unwrap().reshape(reference.shape().to_vec()).unwrap(), reference);
        let first = &ds.clips[b.clip].latents[b.window.start];
        assert_eq!(&b.targets.narrow0(1, 2).unwrap().reshape(first.shape().to_vec()).unwrap(), first);
        assert!(b.sigma > 0.0);
    }
    let a = assemble_batch(&ds, &noise, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = assemble_batch(&ds, &noise, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    // Cond matches a fresh encoding of the decoded reference frame.
    let frame = vae::decode(&ds.clips[a.clip].latents[a.reference]).unwrap();
    let again = vae::encode(&frame).unwrap();
    assert_eq!(a.cond.narrow0(2, 3).unwrap().data(), again.data());
}

#[test]
fn short_clips_give_no_dataset() {
    let c = gen_clip(&ClipSpec { length: 4, height: 32, width: 32, ..Default::default() }).unwrap();
    let e = EncodedClip::from_frames(&c.frames, &c.sketches).unwrap();
    assert!(Dataset::new(vec![e], 4).is_err());
}

fn changed(a: &ParamStore, b: &ParamStore) -> Vec<String> {
    a.iter()
        .filter(|(n, t)| b.get(n).unwrap() != *t)
        .map(|(n, _)| n.to_string())
        .collect()
}

#[test]
fn only_designated_groups_change() {
    let cfg = tiny(3);
    let ds = dataset(2, 8, 3);
    let init: ParamStore = build(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let tc = TrainConfig {
        steps: 3,
        learning_rate: 1e-3,
        checkpoint_every: 0,
        ..Default::default()
    };
    let out = train(&cfg, init.clone(), &ds, &tc, &TrainOutputs::default(), |_, _| {}).unwrap();
    let moved = changed(&init, &out.params);
    assert!(!moved.is_empty());
    for name in &moved {
        assert!(ParamGroups::ControlnetAndAttention.contains(name), "{name} changed");
    }
    assert!(moved.iter().any(|n| n.contains(".sattn.")));
    assert!(moved.iter().any(|n| n.contains(".tattn.")));
    assert!(moved.iter().any(|n| n.starts_with("ctrl.")));
    for (name, t) in init.iter() {
        if name.contains(".res.") && !name.starts_with("ctrl.") {
            assert_eq!(out.params.get(name).unwrap(), t);
        }
    }
    let all = TrainConfig { groups: ParamGroups::All, steps: 1, ..tc };
    let out = train(&cfg, init.clone(), &ds, &all, &TrainOutputs::default(), |_, _| {}).unwrap();
    assert!(changed(&init, &out.params).iter().any(|n| n == "enc.0.res.conv1.w"));
}

#[test]
fn same_seed_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3);
    let ds = dataset(2, 8, 3);
    let init: ParamStore = build(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let tc = TrainConfig {
        steps: 4,
        batch_size: 2,
        checkpoint_every: 2,
        groups: ParamGroups::All,
        ..Default::default()
    };
    let run = |name: &str| {
        let outputs = TrainOutputs {
            checkpoint: Some(dir.path().join(name)),
            loss_log: Some(dir.path().join(format!("{name}.csv"))),
        };
        train(&cfg, init.clone(), &ds, &tc, &outputs, |_, _| {}).unwrap();
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
    let log = std::fs::read_to_string(dir.path().join("a.ckpt.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,sigma");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4,"));
    let (c, p) = checkpoint::load::<f32>(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(c, cfg);
    assert_eq!(p.len(), init.len());
}

#[test]
fn overfits_a_single_clip() {
    let cfg = tiny(3);
    let ds = dataset(1, 8, 3);
    let init: ParamStore = build(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let noise = TrainingNoiseConfig::default();
    let probes = probe_batches(&ds, &noise, 16, 99).unwrap();
    let before = probe_loss(&cfg, &init, &probes, true).unwrap();
    let tc = TrainConfig {
        steps: 500,
        learning_rate: 1e-3,
        groups: ParamGroups::All,
        checkpoint_every: 0,
        ..Default::default()
    };
    let out = train(&cfg, init, &ds, &tc, &TrainOutputs::default(), |_, _| {}).unwrap();
    let after = probe_loss(&cfg, &out.params, &probes, true).unwrap();
    assert!(after <= 0.5 * before, "probe loss {before} -> {after}");
}

#[test]
fn losses_are_finite_on_random_batches() {
    let cfg = DenoiserConfig { frames: 6, ..Default::default() };
    let ds = dataset(4, 12, 6);
    let params: ParamStore = build(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let noise = TrainingNoiseConfig::default();
    let batches = probe_batches(&ds, &noise, 1000, 7).unwrap();
    for (i, b) in batches.iter().enumerate() {
        let l = probe_loss(&cfg, &params, std::slice::from_ref(b), true).unwrap();
        assert!(l.is_finite(), "batch {i}: {l} at sigma {}", b.sigma);
    }
}

#[test]
fn without_controlnet_sketches_are_ignored() {
    let cfg = tiny(3);
    let ds = dataset(1, 8, 3);
    let mut params: ParamStore = build(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    // Give the ControlNet branch real influence first.
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for (name, t) in params.iter_mut() {
        if name.starts_with("ctrl.zero") || name.starts_with("ctrl.sketch.1") {
            *t = Tensor::randn(t.shape().to_vec(), 0.2, &mut r);
        }
    }
    let b = assemble_batch(&ds, &TrainingNoiseConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut zeroed = b.clone();
    zeroed.sketches = Tensor::zeros(b.sketches.shape().to_vec());
    let loss = |batch, ctrl| {
        let mut g = Graph::no_grad();
        let bound = params.register(&mut g, |_| false);
        let l = batch_loss(&mut g, &bound, &cfg, batch, 0.5, ctrl).unwrap();
        g.value(l).item().unwrap()
    };
    assert_eq!(loss(&b, false), loss(&zeroed, false));
    assert_ne!(loss(&b, true), loss(&zeroed, true));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3);
    let ds = dataset(1, 8, 3);
    let mut params: ParamStore = build(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    params.get_mut("out.conv.b").unwrap().data_mut()[0] = f32::NAN;
    let outputs = TrainOutputs {
        checkpoint: Some(dir.path().join("m.ckpt")),
        loss_log: None,
    };
    let err = train(&cfg, params, &ds, &TrainConfig::default(), &outputs, |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("step 1"));
    assert!(dir.path().join("m.ckpt.diverged").is_file());
    assert!(dir.path().join("m.ckpt.diverged.txt").is_file());
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.3, -4.0, 0.0]);
    let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
    opt.step(&mut p, &grads).unwrap();
    let w = p.get("w").unwrap().data().to_vec();
    assert!((w[0] - 0.9).abs() < 1e-6);
    assert!((w[1] + 1.9).abs() < 1e-6);
    assert_eq!(w[2], 0.5);
    let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
}
