//! Model checkpoints.
//!
//! Layout (little endian): magic `TCFN`, `u16` version, `u32` parameter
//! count, then per parameter a `u16` name length, the UTF-8 name, a `u8`
//! rank, `u32` dimensions and `f32` data. Non-trainable state (batch-norm
//! running statistics, fuzzy-rule centroids) is stored under a `state/`
//! prefix. A trailing `CONF` section (`u32` length + JSON) carries the
//! [`ModelConfig`] so a checkpoint is self-describing.
//!
//! Values are rounded to `f32` on save; loading and re-saving reproduces the
//! file byte for byte.

use std::path::Path;

use crate::arch::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCFN";
pub const VERSION: u16 = 1;
const CONFIG_TAG: &[u8; 4] = b"CONF";
pub const STATE_PREFIX: &str = "state/";

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = if p.trainable {
            p.name.clone()
        } else {
            format!("{STATE_PREFIX}{}", p.name)
        };
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(
            u8::try_from(p.tensor.rank())
                .map_err(|_| Error::invalid(format!("rank of `{name}` exceeds 255")))?,
        );
        for &d in p.tensor.shape() {
            out.extend_from_slice(
                &u32::try_from(d)
                    .map_err(|_| Error::invalid("dimension exceeds u32"))?
                    .to_le_bytes(),
            );
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let conf = serde_json::to_vec(&model.config).map_err(|e| Error::invalid(e.to_string()))?;
    out.extend_from_slice(CONFIG_TAG);
    out.extend_from_slice(&(conf.len() as u32).to_le_bytes());
    out.extend_from_slice(&conf);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parse a checkpoint; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |msg: String| Error::format(path, msg);
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("bad magic, expected \"TCFN\"".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| bad("parameter name is not UTF-8".into()))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| bad(format!("`{name}` is too large")))?,
                name,
            )?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        entries.push((name.to_string(), Tensor::new(shape, data)?));
    }
    if r.take(4, "config tag")? != CONFIG_TAG {
        return Err(bad("missing CONF section".into()));
    }
    let conf_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(conf_len, "config")?)
        .map_err(|e| bad(format!("config: {e}")))?;
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = Model::new(config, 0).map_err(|e| bad(e.to_string()))?;
    if entries.len() != model.params.len() {
        return Err(bad(format!(
            "{} parameters stored, the model has {}",
            entries.len(),
            model.params.len()
        )));
    }
    for (stored, tensor) in entries {
        let (name, trainable) = match stored.strip_prefix(STATE_PREFIX) {
            Some(n) => (n, false),
            None => (stored.as_str(), true),
        };
        let p = model
            .params
            .get_mut(name)
            .map_err(|_| bad(format!("unexpected parameter `{stored}`")))?;
        if p.trainable != trainable || p.tensor.shape() != tensor.shape() {
            return Err(bad(format!(
                "`{stored}` has shape {:?}, expected {:?}{}",
                tensor.shape(),
                p.tensor.shape(),
                if p.trainable { "" } else { " (state)" }
            )));
        }
        p.tensor = tensor;
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// The model as it will be after a save/load cycle.
pub fn rounded(model: &Model) -> Model {
    let mut m = model.clone();
    for p in m.params.iter_mut() {
        p.tensor = p.tensor.map(|v| v as f32 as f64);
    }
    m
}
