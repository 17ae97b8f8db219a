//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "HSWN" | version: u32 = 1 | count: u32
//! count × ( name_len: u16 | name: utf-8 | rank: u8 | dims: u32 × rank | values: f32 × Π dims )
//! config_len: u32 | config: utf-8 JSON of HybridModelConfig
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HybridModel, HybridModelConfig, ModelLayout};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSWN";
pub const VERSION: u32 = 1;

pub fn encode(model: &HybridModel<f32>) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(16 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and validates its tensors against its own config.
pub fn decode(bytes: &[u8]) -> Result<HybridModel<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotCheckpoint);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Data(format!("tensor #{i} name is not utf-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Data(format!("{name}: {e}")))?);
        names.push(name);
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.take(json_len, "config")?;
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after config", bytes.len() - r.pos)));
    }
    let config: HybridModelConfig =
        serde_json::from_slice(json).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    HybridModel::from_params(&config, ParamSet::from_parts(names, tensors)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save(model: &HybridModel<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HybridModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and checks that the stored architecture matches `expected`.
/// Shape disagreements name the first offending tensor.
pub fn load_expecting(path: &Path, expected: &HybridModelConfig) -> Result<HybridModel<f32>> {
    let model = load(path)?;
    check_config(&model, expected)?;
    Ok(model)
}

pub fn check_config(model: &HybridModel<f32>, expected: &HybridModelConfig) -> Result<()> {
    if model.config().same_architecture(expected) {
        return Ok(());
    }
    ModelLayout::new(expected)?.registry.validate(model.params())?;
    let stored = serde_json::to_value(model.config()).expect("config serializes");
    let wanted = serde_json::to_value(expected).expect("config serializes");
    let field = stored
        .as_object()
        .and_then(|s| {
            wanted
                .as_object()
                .and_then(|w| w.iter().find(|(k, v)| *k != "seed" && s.get(*k) != Some(v)))
        })
        .map(|(k, _)| k.clone())
        .unwrap_or_default();
    Err(Error::ConfigMismatch(format!(
        "checkpoint {field} is {}, expected {}",
        stored[&field], wanted[&field]
    )))
}
