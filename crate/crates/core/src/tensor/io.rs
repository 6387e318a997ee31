//! `.ten` tensor container: `"TEN1"`, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! rank x u64 LE dims, then the raw LE payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const TEN_MAGIC: &[u8; 4] = b"TEN1";

pub fn write_tensor<T: Float, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(TEN_MAGIC)?;
    w.write_all(&[T::DTYPE as u8, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&T::to_le_bytes_vec(t.data()))
}

/// Reads one record; `what` names the source in error messages.
pub fn read_tensor<T: Float, R: Read>(r: &mut R, what: &Path) -> Result<Tensor<T>> {
    let io = |e: std::io::Error| Error::format(what, format!("truncated tensor record ({e})"));
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..4] != TEN_MAGIC {
        return Err(Error::format(what, "bad tensor magic (expected TEN1)"));
    }
    let dtype = match head[4] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::format(what, format!("unknown dtype code {other}"))),
    };
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut payload = vec![0u8; numel * width];
    r.read_exact(&mut payload).map_err(io)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn save<T: Float>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    read_tensor(&mut cursor, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f32>::randn(shape, 1.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&mut buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f64>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TEN1");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..14], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 4 + 2 + 16 + 16);
    }

    #[test]
    fn bad_magic_is_reported() {
        let err = read_tensor::<f32, _>(&mut &b"XXXX\0\0"[..], Path::new("x.ten")).unwrap_err();
        assert!(err.to_string().contains("x.ten"));
    }
}
