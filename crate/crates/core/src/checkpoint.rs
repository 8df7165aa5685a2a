//! Flat binary checkpoint of named parameter tensors.
//!
//! Layout: magic `PFCK`, u32 BE header length, UTF-8 JSON header listing
//! `{name, shape, trainable}` per tensor plus a dtype tag, then every
//! tensor's values as big-endian f64 in header order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndkernel::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"PFCK";
pub const DTYPE: &str = "f64-be";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Encodes the store; with `trainable_only`, BN buffers are left out.
pub fn encode(store: &ParamStore, trainable_only: bool) -> Vec<u8> {
    let params: Vec<_> = store.params().iter().filter(|p| p.trainable || !trainable_only).collect();
    let header = CheckpointHeader {
        dtype: DTYPE.into(),
        tensors: params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n: usize = params.iter().map(|p| p.value.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(TensorEntry, Tensor)>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Framing("not a checkpoint".into()));
    }
    let hlen = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| Error::Framing("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.dtype != DTYPE {
        return Err(Error::Framing(format!("unsupported dtype `{}`", header.dtype)));
    }
    let mut off = 8 + hlen;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(off..off + 8 * n).ok_or_else(|| Error::Framing("truncated checkpoint data".into()))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes"))).collect();
        off += 8 * n;
        let t = Tensor::new(&entry.shape, data)?;
        out.push((entry, t));
    }
    if off != bytes.len() {
        return Err(Error::Framing(format!("{} trailing checkpoint bytes", bytes.len() - off)));
    }
    Ok(out)
}

/// Overwrites matching tensors in `store`; every decoded name must exist
/// with the same shape.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    for (entry, t) in decode(bytes)? {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor `{}` not in model", entry.name)))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Config(format!(
                "architecture mismatch on `{}`: {:?} vs {:?}",
                entry.name,
                dst.shape(),
                t.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LcnnConfig, LcnnModel};

    #[test]
    fn round_trip_restores_model() {
        let cfg = LcnnConfig { lstm_hidden: 4, conv_channels: [4, 8, 8], input_dim: 3, window: 6, ..Default::default() };
        let a = LcnnModel::init(cfg.clone(), 1).unwrap();
        let mut b = LcnnModel::init(cfg, 2).unwrap();
        load_into(b.params_mut(), &encode(a.params(), false)).unwrap();
        assert_eq!(a.params().flatten_trainable(), b.params().flatten_trainable());
    }

    #[test]
    fn size_is_values_plus_header() {
        let a = LcnnModel::init(LcnnConfig::default(), 1).unwrap();
        let bytes = encode(a.params(), true);
        let data = 8 * a.params().trainable_count();
        assert!(bytes.len() > data && bytes.len() < data + 4096);
    }

    #[test]
    fn mismatched_architecture_rejected() {
        let a = LcnnModel::init(LcnnConfig::default(), 1).unwrap();
        let mut b = LcnnModel::init(LcnnConfig { lstm_hidden: 16, ..Default::default() }, 1).unwrap();
        assert!(load_into(b.params_mut(), &encode(a.params(), true)).is_err());
        assert!(decode(&[1, 2, 3]).is_err());
    }
}
