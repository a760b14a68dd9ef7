//! Binary parameter containers.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                       |
//! |------------|-----------------------------------------------|
//! | 8          | magic                                         |
//! | 4          | `u32` format version                          |
//! | 8          | `u64` header length `n`                       |
//! | n          | UTF-8 JSON header listing `(path, shape)`     |
//! | 8 · Σ len  | raw `f64` values of every tensor, header order |

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ForecastModel, ModelConfig, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::peft::AdapterSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RCMODEL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ParamRole>,
}

/// Serializes a container to bytes.
pub(crate) fn encode_container<H: Serialize>(magic: &[u8; 8], version: u32, header: &H, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let payload: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + header.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the header and returns it with the raw payload.
pub(crate) fn decode_container<'a, H: DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
    what: &str,
) -> Result<(H, &'a [u8])> {
    let bad = |m: String| Error::Checkpoint(format!("{what}: {m}"));
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(bad("bad magic".into()));
    }
    let v = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if v != version {
        return Err(bad(format!("unsupported version {v}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() - 20 < n {
        return Err(bad("truncated header".into()));
    }
    let header = serde_json::from_slice(&bytes[20..20 + n]).map_err(|e| bad(format!("header: {e}")))?;
    Ok((header, &bytes[20 + n..]))
}

/// Writes through a temporary file so a crash never leaves a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Splits a raw payload into tensors of the given shapes; rejects leftovers.
pub(crate) fn decode_payload(payload: &[u8], shapes: &[&[usize]]) -> Result<Vec<Tensor>> {
    let want: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 8;
    if payload.len() != want {
        return Err(Error::Checkpoint(format!("payload holds {} bytes, header implies {want}", payload.len())));
    }
    let mut off = 0;
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let data = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            Tensor::new(shape, data)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    adapters: AdapterSet,
    params: Vec<TensorEntry>,
}

/// Writes the full registry (base and adapter parameters) and config.
pub fn save_checkpoint(model: &ForecastModel, path: impl AsRef<Path>) -> Result<()> {
    let params = model
        .params()
        .iter()
        .map(|(k, p)| TensorEntry {
            path: k.clone(),
            shape: p.value.shape().to_vec(),
            trainable: Some(p.trainable),
            role: Some(p.role),
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config().clone(),
        adapters: model.adapters().clone(),
        params,
    };
    let tensors: Vec<&Tensor> = model.params().iter().map(|(_, p)| &p.value).collect();
    write_atomic(path.as_ref(), &encode_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &tensors)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ForecastModel> {
    let bytes = std::fs::read(path.as_ref())?;
    let what = path.as_ref().display().to_string();
    let (header, payload): (CheckpointHeader, _) = decode_container(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &what)?;
    let shapes: Vec<&[usize]> = header.params.iter().map(|e| e.shape.as_slice()).collect();
    let tensors = decode_payload(payload, &shapes)?;
    let mut store = ParamStore::default();
    for (e, t) in header.params.iter().zip(tensors) {
        store.insert(e.path.clone(), t, e.trainable.unwrap_or(false), e.role.unwrap_or(ParamRole::Base))?;
    }
    ForecastModel::from_parts(header.config, store, header.adapters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let grid = GridSpec::from_resolution(45.0).unwrap();
        let cfg = ModelConfig {
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 1,
            ..ModelConfig::desk(grid, vec!["a".into(), "b".into()], vec!["a".into()])
        };
        let mut m = ForecastModel::new(cfg, 5).unwrap();
        m.params_mut().get_mut("head.weight").unwrap().trainable = false;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
