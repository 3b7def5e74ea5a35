//! `NPNW` checkpoint files.
//!
//! Layout (little-endian): magic `NPNW`, `u32` version, `u32` length of a
//! UTF-8 `key = value` config record followed by the record itself, `u32`
//! parameter count, then per parameter: `u32` name length, name bytes,
//! `u32` rank, `u32` per dimension, and the `f64` values in row-major order.

use std::path::Path;

use crate::config::ConfigMap;
use crate::diff::ParamSet;
use crate::error::{Error, Result};
use crate::io::{read, write_atomic, Reader};
use crate::model::{Model, NetConfig};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"NPNW";
pub const VERSION: u32 = 1;

/// A model, its parameter values, and the full config record it was saved
/// with (architecture under `net.*` plus whatever the caller added).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamSet,
    pub config: ConfigMap,
}

pub fn encode(config: &NetConfig, params: &ParamSet, extra: &ConfigMap) -> Vec<u8> {
    let mut record = extra.clone();
    config.write(&mut record);
    let text = record.render();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected NPNW"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(len, "config record")?)
        .map_err(|e| Error::format(at, format!("config record is not UTF-8: {e}")))?;
    let config = ConfigMap::parse(text).map_err(|e| Error::format(at, e.to_string()))?;
    let net = NetConfig::read(&config).map_err(|e| Error::format(at, e.to_string()))?;
    let (model, mut params) = Model::build(&net, 0)?;

    let at = r.offset();
    let count = r.u32("parameter count")? as usize;
    if count != params.len() {
        return Err(Error::format(
            at,
            format!("{count} parameters stored, architecture has {}", params.len()),
        ));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let at = r.offset();
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
        if name != params[id].name {
            return Err(Error::format(
                at,
                format!("expected parameter {:?}, found {name:?}", params[id].name),
            ));
        }
        let at = r.offset();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != params[id].value.shape() {
            return Err(Error::format(
                at,
                format!("{name}: stored shape {shape:?}, expected {:?}", params[id].value.shape()),
            ));
        }
        let n = numel(&shape);
        let bytes = r.take(8 * n, "parameter values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params[id].value = Tensor::new(&shape, data)?;
    }
    if !r.is_at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last parameter"));
    }
    Ok(Checkpoint { model, params, config })
}

pub fn save_checkpoint(path: &Path, config: &NetConfig, params: &ParamSet, extra: &ConfigMap) -> Result<()> {
    write_atomic(path, &encode(config, params, extra))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&read(path)?).map_err(|e| match e {
        Error::Format { offset, message } => {
            Error::Format { offset, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    })
}
