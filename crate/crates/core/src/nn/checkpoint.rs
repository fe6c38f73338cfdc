//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "BSNNCKPT"
//! version      u32 LE
//! header_len   u32 LE
//! header       UTF-8 text, `header_len` bytes:
//!                kind = <network kind>
//!                config.<key> = <value>      (one per config field)
//!                param <name> <d0,d1,..|-> <offset>
//! payload      f32 LE values, parameters then buffers, in store order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::config::Fields;
use super::{CrnnHighbandConfig, EncoderDecoderConfig, NetConfig, NetKind, Network, StackedLstmConfig};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BSNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_fields(config: &NetConfig) -> Vec<(&'static str, String)> {
    match config {
        NetConfig::CrnnHighband(c) => c.to_fields(),
        NetConfig::EncoderDecoder(c) => c.to_fields(),
        NetConfig::StackedLstm(c) => c.to_fields(),
    }
}

pub(crate) fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let store = net.store();
    let mut header = format!("kind = {}\n", net.kind());
    for (k, v) in config_fields(net.config()) {
        header.push_str(&format!("config.{k} = {v}\n"));
    }
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for id in store.ids() {
        let t = store.get(id);
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        header.push_str(&format!("param {} {dims} {offset}\n", store.name(id)));
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("parameter {} does not fit in f32", store.name(id))));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
        offset += t.len();
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not UTF-8"))?;
    let payload = &bytes[16 + hlen..];

    let mut kind = None;
    let mut fields = BTreeMap::new();
    let mut params = Vec::new();
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(corrupt(format!("bad parameter line {line:?}")));
            }
            let shape: Vec<usize> = if parts[1] == "-" {
                Vec::new()
            } else {
                parts[1]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| corrupt(format!("bad shape in {line:?}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = parts[2].parse().map_err(|_| corrupt(format!("bad offset in {line:?}")))?;
            params.push((parts[0].to_string(), shape, offset));
        } else if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim(), v.trim().to_string());
            if k == "kind" {
                kind = Some(v.parse::<NetKind>().map_err(|_| corrupt(format!("unknown network kind {v:?}")))?);
            } else if let Some(key) = k.strip_prefix("config.") {
                fields.insert(key.to_string(), v);
            } else {
                return Err(corrupt(format!("unexpected header key {k:?}")));
            }
        } else {
            return Err(corrupt(format!("bad header line {line:?}")));
        }
    }
    let kind = kind.ok_or_else(|| corrupt("header has no network kind"))?;
    let f = Fields(&fields);
    let wrap = |e: Error| corrupt(format!("bad {kind} config: {e}"));
    let config = match kind {
        NetKind::CrnnHighband => NetConfig::CrnnHighband(CrnnHighbandConfig::from_fields(&f).map_err(wrap)?),
        NetKind::EncoderDecoder => NetConfig::EncoderDecoder(EncoderDecoderConfig::from_fields(&f).map_err(wrap)?),
        NetKind::StackedLstm => NetConfig::StackedLstm(StackedLstmConfig::from_fields(&f).map_err(wrap)?),
    };
    let mut net = Network::build(config, 0).map_err(wrap)?;

    let ids: Vec<_> = net.store().ids().collect();
    if ids.len() != params.len() {
        return Err(corrupt(format!(
            "checkpoint lists {} tensors, network has {}",
            params.len(),
            ids.len()
        )));
    }
    let total: usize = net.store().ids().map(|id| net.store().get(id).len()).sum();
    if payload.len() != total * 4 {
        return Err(corrupt(format!("payload has {} bytes, expected {}", payload.len(), total * 4)));
    }
    for (id, (name, shape, offset)) in ids.into_iter().zip(params) {
        let store = net.store_mut();
        if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
            return Err(corrupt(format!(
                "tensor {name} {shape:?} does not match network tensor {} {:?}",
                store.name(id),
                store.get(id).shape()
            )));
        }
        let n = store.get(id).len();
        let bytes = payload
            .get(offset * 4..(offset + n) * 4)
            .ok_or_else(|| corrupt(format!("offset of {name} out of range")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("non-finite values in {name}")));
        }
        store.set(id, Tensor::new(shape, data)?)?;
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint and checks its network kind and output dimension.
pub fn load_checkpoint_as(path: impl AsRef<Path>, kind: NetKind, output_dim: Option<usize>) -> Result<Network> {
    let path = path.as_ref();
    let net = load_checkpoint(path)?;
    if net.kind() != kind {
        return Err(Error::Checkpoint(format!(
            "{}: expected a {kind} network, found {}",
            path.display(),
            net.kind()
        )));
    }
    if let Some(d) = output_dim {
        if net.output_dim() != d {
            return Err(Error::Checkpoint(format!(
                "{}: expected output dimension {d}, found {}",
                path.display(),
                net.output_dim()
            )));
        }
    }
    Ok(net)
}
