//! Procedural flat-colour animation with exact backward flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sketch::{extract_sketch, luma};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
    ];

    /// Point test in the shape's own frame (centre at the origin, unit scale).
    fn contains(self, u: f64, v: f64, rx: f64, ry: f64) -> bool {
        match self {
            ShapeKind::Ellipse => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= rx && v.abs() <= ry,
            // Apex up (negative y), base at v = ry.
            ShapeKind::Triangle => v >= -ry && v <= ry && u.abs() <= rx * (v + ry) / (2.0 * ry),
            ShapeKind::Diamond => u.abs() / rx + v.abs() / ry <= 1.0,
        }
    }
}

/// Keyframe of a piecewise-linear trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Key {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub rx: f64,
    pub ry: f64,
    pub color: Rgb,
    /// Sorted by `t`; held constant outside the keyed range.
    pub keys: Vec<Key>,
}

impl Shape {
    /// Centre and scale at time `t`.
    pub fn pose(&self, t: f64) -> (f64, f64, f64) {
        let ks = &self.keys;
        if t <= ks[0].t {
            return (ks[0].x, ks[0].y, ks[0].scale);
        }
        for w in ks.windows(2) {
            if t <= w[1].t {
                let a = (t - w[0].t) / (w[1].t - w[0].t);
                let lerp = |p: f64, q: f64| p + a * (q - p);
                return (lerp(w[0].x, w[1].x), lerp(w[0].y, w[1].y), lerp(w[0].scale, w[1].scale));
            }
        }
        let k = ks[ks.len() - 1];
        (k.x, k.y, k.scale)
    }

    fn covers(&self, px: f64, py: f64, t: f64) -> bool {
        let (cx, cy, s) = self.pose(t);
        self.kind.contains((px - cx) / s, (py - cy) / s, self.rx, self.ry)
    }
}

/// Shapes over a flat background; later shapes are drawn on top.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: Rgb,
    pub shapes: Vec<Shape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSpec {
    pub seed: u64,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    /// Mean shape speed in pixels per frame.
    pub motion_scale: f64,
    pub scaling: bool,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 16,
            height: 64,
            width: 64,
            n_shapes: 3,
            motion_scale: 3.0,
            scaling: true,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(invalid!("clip length must be at least 2, got {}", self.length));
        }
        if self.height < 8 || self.width < 8 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(invalid!(
                "clip size {}x{} must be at least 8 and divisible by 4",
                self.height,
                self.width
            ));
        }
        if !(self.motion_scale >= 0.0 && self.motion_scale.is_finite()) {
            return Err(invalid!("motion scale must be finite and non-negative"));
        }
        if self.n_shapes > 250 {
            return Err(invalid!("at most 250 shapes per clip"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    /// RGB `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `flows[t]` is `F_{t+1 -> t}` `[2, H, W]` (x, y) in pixels, sampled on frame `t+1`.
    pub flows: Vec<Tensor>,
    /// `[1, H, W]`, 1 on lines.
    pub sketches: Vec<Tensor>,
    /// Index 0 is the background, `k` is shape `k`.
    pub palette: Vec<Rgb>,
    /// Per frame, row-major palette index of every pixel.
    pub labels: Vec<Vec<u8>>,
}

impl SyntheticClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mean flow magnitude over shape pixels (background excluded), in pixels.
    pub fn mean_motion(&self) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for (flow, labels) in self.flows.iter().zip(&self.labels[1..]) {
            let hw = labels.len();
            let d = flow.data();
            for (p, &l) in labels.iter().enumerate() {
                if l != 0 {
                    sum += (d[p] as f64).hypot(d[hw + p] as f64);
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Rasterizes `scene` at integer pixel positions for frames `0..length`.
pub fn render_clip(scene: &Scene, length: usize, height: usize, width: usize) -> Result<SyntheticClip> {
    if length < 2 || height == 0 || width == 0 {
        return Err(invalid!("cannot render {length} frames of {height}x{width}"));
    }
    if scene.shapes.len() > 250 {
        return Err(invalid!("at most 250 shapes per scene"));
    }
    if scene.shapes.iter().any(|s| s.keys.is_empty() || !(s.rx > 0.0 && s.ry > 0.0)) {
        return Err(invalid!("every shape needs keyframes and positive extents"));
    }
    let hw = height * width;
    let mut palette = vec![scene.background];
    palette.extend(scene.shapes.iter().map(|s| s.color));

    let label_at = |t: usize| -> Vec<u8> {
        let mut labels = vec![0u8; hw];
        for y in 0..height {
            for x in 0..width {
                for (k, s) in scene.shapes.iter().enumerate().rev() {
                    if s.covers(x as f64, y as f64, t as f64) {
                        labels[y * width + x] = (k + 1) as u8;
                        break;
                    }
                }
            }
        }
        labels
    };
    let labels: Vec<Vec<u8>> = (0..length).map(label_at).collect();

    let frames: Vec<Tensor> = labels
        .iter()
        .map(|lab| {
            Tensor::from_fn([3, height, width], |i| {
                let (c, p) = (i / hw, i % hw);
                palette[lab[p] as usize][c]
            })
        })
        .collect();

    let mut flows = Vec::with_capacity(length - 1);
    for t in 0..length - 1 {
        let lab = &labels[t + 1];
        let mut data = vec![0f32; 2 * hw];
        for p in 0..hw {
            let l = lab[p] as usize;
            if l == 0 {
                continue;
            }
            let s = &scene.shapes[l - 1];
            let (cx0, cy0, s0) = s.pose(t as f64);
            let (cx1, cy1, s1) = s.pose((t + 1) as f64);
            let (px, py) = ((p % width) as f64, (p / width) as f64);
            let ratio = s0 / s1;
            let qx = cx0 + ratio * (px - cx1);
            let qy = cy0 + ratio * (py - cy1);
            data[p] = (qx - px) as f32;
            data[hw + p] = (qy - py) as f32;
        }
        flows.push(Tensor::new([2, height, width], data)?);
    }
    let sketches = frames.iter().map(extract_sketch).collect();
    Ok(SyntheticClip {
        frames,
        flows,
        sketches,
        palette,
        labels,
    })
}

/// Random palette of `count` colours on the 8-bit grid with pairwise luma
/// separation, so every boundary produces a sketch line.
pub fn random_palette<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<Rgb> {
    let mut min_luma = 0.2f32;
    loop {
        for _ in 0..400 {
            let colors: Vec<Rgb> = (0..count).map(|_| random_color(rng)).collect();
            let separated = colors.iter().enumerate().all(|(i, a)| {
                colors[..i].iter().all(|b| {
                    let dl = (luma(a[0], a[1], a[2]) - luma(b[0], b[1], b[2])).abs();
                    let dc: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
                    dl >= min_luma && dc >= 0.3
                })
            });
            if separated {
                return colors;
            }
        }
        min_luma *= 0.8;
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    let h: f32 = rng.gen_range(0.0..6.0);
    let s: f32 = rng.gen_range(0.4..1.0);
    let v: f32 = rng.gen_range(0.3..1.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|u| (u * 255.0).round() / 255.0)
}

/// Interval between trajectory keyframes, in frames.
const KEY_INTERVAL: usize = 6;

/// Random scene: mixed shape kinds with piecewise-linear motion, one
/// shape entering or leaving the frame now and then, and occasional position
/// swaps between two shapes.
pub fn random_scene(spec: &ClipSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let side = h.min(w);
    let mut colors = random_palette(spec.n_shapes + 1, &mut rng);
    let background = colors.remove(0);
    let n_keys = (spec.length - 1).div_ceil(KEY_INTERVAL) + 1;
    let kind_offset = rng.gen_range(0..ShapeKind::ALL.len());

    let mut shapes: Vec<Shape> = Vec::with_capacity(spec.n_shapes);
    for (k, color) in colors.into_iter().enumerate() {
        let kind = ShapeKind::ALL[(k + kind_offset) % ShapeKind::ALL.len()];
        let rx = side * rng.gen_range(0.11..0.2);
        let ry = rx * rng.gen_range(0.7..1.4);
        let inside = |rng: &mut ChaCha8Rng| (rng.gen_range(0.2 * w..0.8 * w), rng.gen_range(0.2 * h..0.8 * h));
        let mut keys = Vec::with_capacity(n_keys);
        let (mut x, mut y) = inside(&mut rng);
        for j in 0..n_keys {
            let scale = if spec.scaling { rng.gen_range(0.8..1.25) } else { 1.0 };
            if j > 0 {
                let step = spec.motion_scale * KEY_INTERVAL as f64 * rng.gen_range(0.6..1.4);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                x = reflect(x + step * angle.cos(), 0.1 * w, 0.9 * w);
                y = reflect(y + step * angle.sin(), 0.1 * h, 0.9 * h);
            }
            keys.push(Key {
                t: (j * KEY_INTERVAL) as f64,
                x,
                y,
                scale,
            });
        }
        shapes.push(Shape {
            kind,
            rx,
            ry,
            color,
            keys,
        });
    }

    if !shapes.is_empty() && rng.gen_bool(0.5) {
        // Enter from (or leave through) the nearest edge.
        let k = rng.gen_range(0..shapes.len());
        let enter = rng.gen_bool(0.5);
        let s = &mut shapes[k];
        let margin = s.rx.max(s.ry) * 1.5;
        let idx = if enter { 0 } else { s.keys.len() - 1 };
        let key = &mut s.keys[idx];
        let (dl, dr, dt, db) = (key.x, w - key.x, key.y, h - key.y);
        let nearest = dl.min(dr).min(dt).min(db);
        if nearest == dl {
            key.x = -margin;
        } else if nearest == dr {
            key.x = w + margin;
        } else if nearest == dt {
            key.y = -margin;
        } else {
            key.y = h + margin;
        }
    }
    if shapes.len() >= 2 && n_keys >= 2 && rng.gen_bool(0.5) {
        let a = rng.gen_range(0..shapes.len());
        let b = (a + rng.gen_range(1..shapes.len())) % shapes.len();
        let j = rng.gen_range(0..n_keys - 1);
        let (ka, kb) = (shapes[a].keys[j], shapes[b].keys[j]);
        for (s, from) in [(a, kb), (b, ka)] {
            let key = &mut shapes[s].keys[j + 1];
            key.x = from.x;
            key.y = from.y;
        }
    }
    Ok(Scene { background, shapes })
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut u = (v - lo).rem_euclid(2.0 * span);
    if u > span {
        u = 2.0 * span - u;
    }
    lo + u
}

pub fn gen_clip(spec: &ClipSpec) -> Result<SyntheticClip> {
    let scene = random_scene(spec)?;
    render_clip(&scene, spec.length, spec.height, spec.width)
}
