//! Checkpoint container.
//!
//! Layout: `TTSC` magic, u32 version, u64 header length, JSON header, then a
//! little-endian f64 payload. The header records dims, config and vocabulary
//! hashes, training step, RNG state, provenance (which languages the model
//! saw in text pretraining and in paired data), and the offset table of every
//! named parameter tensor plus optional optimizer moments. Reload is
//! bit-exact.

use super::{ModelDims, Params, TensorMut};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::Real;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TTSC";
const VERSION: u32 = 1;

/// Which data a model has been exposed to, for synthesis-mode classification.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    /// Language ids present in the MLM pretraining text (empty for scratch).
    pub pretrained_on: BTreeSet<usize>,
    /// Language ids present in the paired fine-tuning data.
    pub paired_on: BTreeSet<usize>,
    /// Freeze policy used in fine-tuning, if any.
    pub freeze: Option<String>,
    /// Ablation name baked into this run, if any.
    pub ablation: Option<String>,
}

/// Everything in the checkpoint header except the offset tables.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub config_hash: String,
    pub vocab_hash: String,
    pub seed: u64,
    pub step: u64,
    pub rng: Option<RngState>,
    pub provenance: Provenance,
}

/// In-memory checkpoint: parameters plus optional Adam moments.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params<Real>,
    pub opt_m: BTreeMap<String, Vec<Real>>,
    pub opt_v: BTreeMap<String, Vec<Real>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<TensorEntry>,
    opt_m: Vec<TensorEntry>,
    opt_v: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload: Vec<Real> = Vec::new();
    let mut param_entries = Vec::new();
    ckpt.params.for_each_param(&mut |name, t| {
        param_entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape(),
            offset: payload.len(),
            len: t.len(),
        });
        payload.extend(t.iter().copied());
    });
    let mut opt_m_entries = Vec::new();
    for (name, values) in &ckpt.opt_m {
        opt_m_entries.push(TensorEntry {
            name: name.clone(),
            shape: vec![values.len()],
            offset: payload.len(),
            len: values.len(),
        });
        payload.extend(values.iter().copied());
    }
    let mut opt_v_entries = Vec::new();
    for (name, values) in &ckpt.opt_v {
        opt_v_entries.push(TensorEntry {
            name: name.clone(),
            shape: vec![values.len()],
            offset: payload.len(),
            len: values.len(),
        });
        payload.extend(values.iter().copied());
    }
    let header = Header {
        meta: ckpt.meta.clone(),
        params: param_entries,
        opt_m: opt_m_entries,
        opt_v: opt_v_entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::with_capacity(16 + header_json.len() + payload.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload_bytes = &bytes[16 + header_len..];
    let n_values = payload_bytes.len() / 8;
    let read_value = |i: usize| -> Real {
        f64::from_le_bytes(payload_bytes[i * 8..i * 8 + 8].try_into().unwrap())
    };

    let mut values: BTreeMap<String, (Vec<usize>, Vec<Real>)> = BTreeMap::new();
    for entry in &header.params {
        if entry.offset + entry.len > n_values {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` exceeds payload",
                entry.name
            )));
        }
        let data: Vec<Real> = (entry.offset..entry.offset + entry.len).map(read_value).collect();
        values.insert(entry.name.clone(), (entry.shape.clone(), data));
    }

    let mut params = Params::<Real>::init(&header.meta.dims, 0)?;
    let mut err: Option<String> = None;
    params.for_each_param_mut(&mut |name, mut t| {
        match values.remove(name) {
            Some((shape, data)) => {
                if data.len() != t.len() {
                    err = Some(format!(
                        "tensor `{name}` has {} values, expected {}",
                        data.len(),
                        t.len()
                    ));
                    return;
                }
                let _ = shape;
                match &mut t {
                    TensorMut::M(m) => {
                        for (dst, v) in m.iter_mut().zip(data) {
                            *dst = v;
                        }
                    }
                    TensorMut::V(vv) => {
                        for (dst, v) in vv.iter_mut().zip(data) {
                            *dst = v;
                        }
                    }
                }
            }
            None => err = Some(format!("checkpoint missing tensor `{name}`")),
        }
    });
    if let Some(msg) = err {
        return Err(Error::Checkpoint(msg));
    }
    if !values.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} unknown tensors (first: {:?})",
            values.len(),
            values.keys().next()
        )));
    }

    let mut opt_m = BTreeMap::new();
    for entry in &header.opt_m {
        let data: Vec<Real> = (entry.offset..entry.offset + entry.len).map(read_value).collect();
        opt_m.insert(entry.name.clone(), data);
    }
    let mut opt_v = BTreeMap::new();
    for entry in &header.opt_v {
        let data: Vec<Real> = (entry.offset..entry.offset + entry.len).map(read_value).collect();
        opt_v.insert(entry.name.clone(), data);
    }

    Ok(Checkpoint {
        meta: header.meta,
        params,
        opt_m,
        opt_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BottleneckVariant, ParamGroup};

    fn mini_dims() -> ModelDims {
        ModelDims {
            d: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            bottleneck_hidden: 4,
            vocab_size: 10,
            n_languages: 3,
            feature_dim: 4,
            postnet_layers: 2,
            postnet_kernel: 3,
            prediction_hidden: 8,
            speaker_dim: 3,
            bottleneck_variant: BottleneckVariant::Residual,
            use_language_id: true,
            dropout: 0.0,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dims = mini_dims();
        let params = Params::<Real>::init(&dims, 42).unwrap();
        let mut opt_m = BTreeMap::new();
        opt_m.insert("encoder.block0.attn.wq.w".to_string(), vec![0.25; 64]);
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                dims,
                config_hash: "cafe".into(),
                vocab_hash: "beef".into(),
                seed: 7,
                step: 123,
                rng: Some(crate::rng::DetRng::new(1, "t").state()),
                provenance: Provenance {
                    pretrained_on: BTreeSet::from([0, 1, 2]),
                    paired_on: BTreeSet::from([0, 1]),
                    freeze: Some("freeze_lae".into()),
                    ablation: None,
                },
            },
            params,
            opt_m,
            opt_v: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        for g in ParamGroup::ALL {
            assert_eq!(loaded.params.group_hash(g), ckpt.params.group_hash(g));
        }
        assert_eq!(loaded.opt_m, ckpt.opt_m);

        // Saving the reload reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"TTSC\x01\x00").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
