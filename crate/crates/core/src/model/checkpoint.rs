//! Checkpoint container: `"LVCDCKPT"`, u32 version, u32 entry count, then per
//! entry a u16 name length, the UTF-8 name and a `.ten` record. The model
//! config is written next to it as TOML (`<path>.toml`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Float, ParamStore};

pub const MAGIC: &[u8; 8] = b"LVCDCKPT";
pub const VERSION: u32 = 1;

pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn write_params<T: Float>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut buf = Vec::new();
    buf.write_all(MAGIC).map_err(io)?;
    buf.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    buf.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::format(path, format!("parameter name too long: {name}")))?;
        buf.write_all(&len.to_le_bytes()).map_err(io)?;
        buf.write_all(bytes).map_err(io)?;
        write_tensor(&mut buf, t).map_err(io)?;
    }
    fs::write(path, buf).map_err(io)
}

struct Cursor<'a> {
    rest: &'a [u8],
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.rest.len() < n {
            return Err(Error::format(self.path, format!("truncated checkpoint while reading {what}")));
        }
        let (head, rest) = self.rest.split_at(n);
        self.rest = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_params<T: Float>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { rest: &bytes, path };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic, expected LVCDCKPT)"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let count = c.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let t = read_tensor(&mut c.rest, path)?;
        store
            .insert(name, t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    if !c.rest.is_empty() {
        return Err(Error::format(path, "trailing bytes after the last entry"));
    }
    Ok(store)
}

pub fn save<T: Float>(path: &Path, config: &DenoiserConfig, params: &ParamStore<T>) -> Result<()> {
    write_params(path, params)?;
    let cpath = config_path(path);
    let text = toml::to_string(config).map_err(|e| Error::format(&cpath, e.to_string()))?;
    fs::write(&cpath, text).map_err(|e| Error::io(&cpath, e))
}

/// Loads parameters and config and checks that they describe the same model.
pub fn load<T: Float>(path: &Path) -> Result<(DenoiserConfig, ParamStore<T>)> {
    let cpath = config_path(path);
    let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let config: DenoiserConfig = toml::from_str(&text).map_err(|e| Error::format(&cpath, e.to_string()))?;
    config
        .validate()
        .map_err(|e| Error::format(&cpath, e.to_string()))?;
    let params = read_params(path)?;
    for spec in super::param_layout(&config) {
        match params.get(&spec.name) {
            Ok(t) if t.shape() == spec.shape.as_slice() => {}
            Ok(t) => {
                return Err(Error::format(
                    path,
                    format!("{} has shape {:?}, config expects {:?}", spec.name, t.shape(), spec.shape),
                ))
            }
            Err(_) => return Err(Error::format(path, format!("missing parameter {}", spec.name))),
        }
    }
    Ok((config, params))
}
