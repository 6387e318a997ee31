//! Invertible frame/latent map: 4x4 space-to-depth followed by a fixed affine
//! rescale, so latents are 48 x H/4 x W/4 and roughly zero-mean.
//!
//! The rearrangement is exact. The affine part `z = (v - 0.5) * 2` is exact
//! for values on a 2^-8 grid and within one rounding step otherwise, which
//! never changes an 8-bit pixel level.

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

pub const PATCH: usize = 4;
pub const LATENT_CHANNELS: usize = 3 * PATCH * PATCH;
pub const SHIFT: f64 = 0.5;
pub const SCALE: f64 = 2.0;

fn check_frame<T: Float>(frame: &Tensor<T>) -> Result<(usize, usize)> {
    match *frame.shape() {
        [3, h, w] if h % PATCH == 0 && w % PATCH == 0 && h > 0 && w > 0 => Ok((h, w)),
        [3, h, w] => Err(shape_err!(
            "frame size {h}x{w} is not divisible by {PATCH}"
        )),
        _ => Err(shape_err!("expected an RGB frame [3, H, W], got {:?}", frame.shape())),
    }
}

/// Space-to-depth only; channel `(c * 4 + dy) * 4 + dx`.
pub fn patchify<T: Float>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = check_frame(frame)?;
    let (lh, lw) = (h / PATCH, w / PATCH);
    let src = frame.data();
    let mut out = vec![T::zero(); src.len()];
    for c in 0..3 {
        for y in 0..h {
            let (by, dy) = (y / PATCH, y % PATCH);
            for x in 0..w {
                let (bx, dx) = (x / PATCH, x % PATCH);
                let ch = (c * PATCH + dy) * PATCH + dx;
                out[(ch * lh + by) * lw + bx] = src[(c * h + y) * w + x];
            }
        }
    }
    Tensor::new([LATENT_CHANNELS, lh, lw], out)
}

pub fn unpatchify<T: Float>(latent: &Tensor<T>) -> Result<Tensor<T>> {
    let (lh, lw) = match *latent.shape() {
        [LATENT_CHANNELS, lh, lw] => (lh, lw),
        _ => {
            return Err(shape_err!(
                "expected a latent [{LATENT_CHANNELS}, h, w], got {:?}",
                latent.shape()
            ))
        }
    };
    let (h, w) = (lh * PATCH, lw * PATCH);
    let src = latent.data();
    let mut out = vec![T::zero(); src.len()];
    for c in 0..3 {
        for y in 0..h {
            let (by, dy) = (y / PATCH, y % PATCH);
            for x in 0..w {
                let (bx, dx) = (x / PATCH, x % PATCH);
                let ch = (c * PATCH + dy) * PATCH + dx;
                out[(c * h + y) * w + x] = src[(ch * lh + by) * lw + bx];
            }
        }
    }
    Tensor::new([3, h, w], out)
}

pub fn encode<T: Float>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let (shift, scale) = (T::lit(SHIFT), T::lit(SCALE));
    Ok(patchify(frame)?.map(|v| (v - shift) * scale))
}

/// Inverse of [`encode`]; values are not clamped here.
pub fn decode<T: Float>(latent: &Tensor<T>) -> Result<Tensor<T>> {
    let (shift, inv) = (T::lit(SHIFT), T::lit(1.0 / SCALE));
    unpatchify(&latent.map(|z| z * inv + shift))
}

/// Encodes `[L, 3, H, W]` into `[L, 48, H/4, W/4]`.
pub fn encode_frames<T: Float>(frames: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    frames.iter().map(encode).collect()
}

pub fn decode_frames<T: Float>(latents: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    latents.iter().map(decode).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mid_gray_encodes_to_zero() {
        let f = Tensor::<f32>::full([3, 4, 4], 0.5);
        let z = encode(&f).unwrap();
        assert_eq!(z.shape(), &[48, 1, 1]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(decode(&z).unwrap(), f);
    }

    #[test]
    fn shapes_and_errors() {
        let f = Tensor::<f32>::zeros([3, 8, 8]);
        assert_eq!(encode(&f).unwrap().shape(), &[48, 2, 2]);
        assert_eq!(decode(&encode(&f).unwrap()).unwrap().shape(), &[3, 8, 8]);
        assert!(encode(&Tensor::<f32>::zeros([3, 6, 8])).is_err());
        assert!(encode(&Tensor::<f32>::zeros([1, 8, 8])).is_err());
        assert!(decode(&Tensor::<f32>::zeros([47, 2, 2])).is_err());
    }

    #[test]
    fn channel_layout() {
        // Pixel (c=1, y=5, x=2) lands in channel (1*4 + 1)*4 + 2 = 22 at block (1, 0).
        let mut f = Tensor::<f32>::zeros([3, 8, 8]);
        f.data_mut()[(8 + 5) * 8 + 2] = 1.0;
        let p = patchify(&f).unwrap();
        let hot: Vec<usize> = (0..p.numel()).filter(|&i| p.data()[i] == 1.0).collect();
        assert_eq!(hot, vec![(22 * 2 + 1) * 2]);
    }

    #[test]
    fn dyadic_frames_round_trip_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Tensor<f32> = Tensor::from_fn([3, 16, 12], |_| rng.gen_range(0u32..=256) as f32 / 256.0);
        assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn eight_bit_levels_survive_quantization() {
        let f: Tensor<f32> = Tensor::from_fn([3, 16, 16], |i| (i % 256) as f32 / 255.0);
        let back = decode(&encode(&f).unwrap()).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            assert_eq!((a * 255.0).round(), (b * 255.0).round());
        }
    }

    proptest! {
        #[test]
        fn patchify_round_trip_is_bit_exact(bh in 1usize..5, bw in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f32>::rand_uniform([3, 4 * bh, 4 * bw], 0.0, 1.0, &mut rng);
            prop_assert_eq!(unpatchify(&patchify(&f).unwrap()).unwrap(), f);
        }

        #[test]
        fn codec_round_trip(bh in 1usize..4, bw in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::<f32>::rand_uniform([3, 4 * bh, 4 * bw], 0.0, 1.0, &mut rng);
            let back = decode(&encode(&f).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&f).unwrap() <= 6e-8);
        }

        #[test]
        fn centered_map_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([3, 8, 8], 1.0, &mut rng);
            let y = Tensor::<f64>::randn([3, 8, 8], 1.0, &mut rng);
            let centered = |t: &Tensor<f64>| encode(t).unwrap().map(|v| v + SHIFT * SCALE);
            let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let lhs = centered(&mix);
            let rhs = centered(&x).zip_map(&centered(&y), |p, q| a * p + b * q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }
}
