use crate::tensor::{Float, Tensor};

/// Gradient magnitude above which a pixel can become a line.
pub const SKETCH_THRESHOLD: f64 = 0.15;

/// Rec. 601 luma.
pub fn luma<T: Float>(r: T, g: T, b: T) -> T {
    T::lit(0.299) * r + T::lit(0.587) * g + T::lit(0.114) * b
}

/// Binary line map `[1, H, W]` of an RGB frame `[3, H, W]`: Sobel magnitude of
/// luma (scaled so a unit step reads 1), thresholded and thinned to a single
/// pixel by non-maximum suppression along the gradient.
pub fn extract_sketch<T: Float>(frame: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let hw = h * w;
    let d = frame.data();
    let y: Vec<f64> = (0..hw)
        .map(|p| luma(d[p], d[hw + p], d[2 * hw + p]).as_f64())
        .collect();
    let at = |r: isize, c: isize| y[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut gx = vec![0.0; hw];
    let mut gy = vec![0.0; hw];
    let mut mag = vec![0.0; hw];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = r as usize * w + c as usize;
            gx[p] = ((at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1)))
                / 4.0;
            gy[p] = ((at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1)))
                / 4.0;
            mag[p] = gx[p].hypot(gy[p]);
        }
    }
    let m = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[r as usize * w + c as usize]
        }
    };
    Tensor::from_fn([1, h, w], |p| {
        if mag[p] <= SKETCH_THRESHOLD {
            return T::zero();
        }
        let (r, c) = ((p / w) as isize, (p % w) as isize);
        // Quantize the gradient direction to one of four axes.
        let angle = gy[p].atan2(gx[p]).to_degrees().rem_euclid(180.0);
        let (dr, dc) = if !(22.5..157.5).contains(&angle) {
            (0, 1)
        } else if angle < 67.5 {
            (1, 1)
        } else if angle < 112.5 {
            (1, 0)
        } else {
            (1, -1)
        };
        // Ties go to the pixel before the edge, so a step gives one line.
        let keep = mag[p] > m(r - dr, c - dc) && mag[p] >= m(r + dr, c + dc);
        if keep {
            T::one()
        } else {
            T::zero()
        }
    })
}
