//! PPM frames and sketches, `.flo5` flows, palettes and the clip directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use super::synth::{Rgb, SyntheticClip};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const FLO5_MAGIC: &[u8; 4] = b"FLO5";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.ppm")
}

pub fn sketch_name(i: usize) -> String {
    format!("sketch_{i:05}.ppm")
}

pub fn flow_name(i: usize) -> String {
    format!("flow_{i:05}.flo5")
}

fn to_byte<T: Float>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6, 8-bit. Values are clamped to `[0, 1]`.
pub fn write_ppm<T: Float>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    let [c, h, w] = frame.shape() else {
        return Err(Error::format(path, format!("expected a [3, H, W] frame, got {:?}", frame.shape())));
    };
    if *c != 3 {
        return Err(Error::format(path, format!("expected 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * hw);
    let d = frame.data();
    for p in 0..hw {
        buf.extend([d[p], d[hw + p], d[2 * hw + p]].map(to_byte));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads P6 or P5 (grey replicated to three channels), maxval up to 255.
pub fn read_ppm<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::format(path, format!("unsupported image type {m}; expected P6 or P5"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::format(path, format!("bad {what} in PPM header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("maxval {maxval} unsupported (8-bit only)")));
    }
    let data = &bytes[pos + 1..];
    let hw = h * w;
    if data.len() < hw * channels {
        return Err(Error::format(path, "truncated pixel data"));
    }
    let scale = maxval as f64;
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        let src = if channels == 3 { 3 * p + c } else { p };
        T::lit(data[src] as f64 / scale)
    }))
}

/// Sketches are stored black lines on white.
pub fn write_sketch<T: Float>(path: &Path, sketch: &Tensor<T>) -> Result<()> {
    let hw = sketch.numel();
    let (h, w) = (sketch.shape()[1], sketch.shape()[2]);
    let inv = Tensor::<T>::from_fn([3, h, w], |i| T::one() - sketch.data()[i % hw]);
    write_ppm(path, &inv)
}

pub fn read_sketch<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let img = read_ppm::<T>(path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Ok(Tensor::from_fn([1, h, w], |p| {
        if img.data()[p].as_f64() < 0.5 {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `"FLO5"`, u32 H, u32 W, then `(dx, dy)` f32 pairs in row-major order.
pub fn write_flo5<T: Float>(path: &Path, flow: &Tensor<T>) -> Result<()> {
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let hw = h * w;
    let mut buf = Vec::with_capacity(12 + 8 * hw);
    buf.extend_from_slice(FLO5_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    let d = flow.data();
    for p in 0..hw {
        buf.extend_from_slice(&(d[p].as_f64() as f32).to_le_bytes());
        buf.extend_from_slice(&(d[hw + p].as_f64() as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flo5<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FLO5_MAGIC {
        return Err(Error::format(path, "not a FLO5 flow file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let hw = h * w;
    if bytes.len() != 12 + 8 * hw {
        return Err(Error::format(path, format!("expected {} bytes of flow for {h}x{w}", 8 * hw)));
    }
    let f = |k: usize| T::lit(f32::from_le_bytes(bytes[12 + 4 * k..16 + 4 * k].try_into().expect("4 bytes")) as f64);
    Ok(Tensor::from_fn([2, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        f(2 * p + c)
    }))
}

/// One `index r g b` line per colour, 8-bit components.
pub fn write_palette(path: &Path, palette: &[Rgb]) -> Result<()> {
    let mut text = String::from("# index r g b (0 = background)\n");
    for (i, c) in palette.iter().enumerate() {
        let [r, g, b] = c.map(|v| to_byte(v));
        text.push_str(&format!("{i} {r} {g} {b}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_palette(path: &Path) -> Result<Vec<Rgb>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<u8> = line
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: expected `index r g b`", n + 1)))?;
        if nums.len() != 4 || nums[0] as usize != out.len() {
            return Err(Error::format(path, format!("line {}: expected `index r g b` in order", n + 1)));
        }
        out.push([nums[1], nums[2], nums[3]].map(|v| v as f32 / 255.0));
    }
    Ok(out)
}

/// Frames, sketches and flows of a clip read from disk.
#[derive(Debug, Clone)]
pub struct DiskClip<T: Float = f32> {
    pub frames: Vec<Tensor<T>>,
    pub sketches: Vec<Tensor<T>>,
    pub flows: Vec<Tensor<T>>,
    pub palette: Option<Vec<Rgb>>,
}

pub fn write_clip(dir: &Path, clip: &SyntheticClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames.iter().enumerate() {
        write_ppm(&dir.join(frame_name(i)), f)?;
    }
    for (i, s) in clip.sketches.iter().enumerate() {
        write_sketch(&dir.join(sketch_name(i)), s)?;
    }
    for (i, f) in clip.flows.iter().enumerate() {
        write_flo5(&dir.join(flow_name(i)), f)?;
    }
    write_palette(&dir.join("palette.txt"), &clip.palette)
}

/// Consecutive numbered files `name(0), name(1), ...` present in `dir`.
pub fn numbered_files(dir: &Path, name: fn(usize) -> String) -> Vec<PathBuf> {
    (0..).map(|i| dir.join(name(i))).take_while(|p| p.is_file()).collect()
}

pub fn read_frames<T: Float>(dir: &Path) -> Result<Vec<Tensor<T>>> {
    let files = numbered_files(dir, frame_name);
    if files.is_empty() {
        return Err(Error::format(dir, "no frame_00000.ppm found"));
    }
    files.iter().map(|p| read_ppm(p)).collect()
}

pub fn read_sketches<T: Float>(dir: &Path) -> Result<Vec<Tensor<T>>> {
    let files = numbered_files(dir, sketch_name);
    if files.is_empty() {
        return Err(Error::format(dir, "no sketch_00000.ppm found"));
    }
    files.iter().map(|p| read_sketch(p)).collect()
}

pub fn read_flows<T: Float>(dir: &Path) -> Result<Vec<Tensor<T>>> {
    numbered_files(dir, flow_name).iter().map(|p| read_flo5(p)).collect()
}

pub fn read_clip<T: Float>(dir: &Path) -> Result<DiskClip<T>> {
    let palette_path = dir.join("palette.txt");
    Ok(DiskClip {
        frames: read_frames(dir)?,
        sketches: read_sketches(dir)?,
        flows: read_flows(dir)?,
        palette: if palette_path.is_file() {
            Some(read_palette(&palette_path)?)
        } else {
            None
        },
    })
}

pub fn write_frames<T: Float>(dir: &Path, frames: &[Tensor<T>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}
