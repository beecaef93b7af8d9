//! Binary checkpoint: 8-byte magic, a `u64` little-endian header length,
//! a UTF-8 JSON header (config plus ordered tensor manifest), then raw
//! little-endian tensor payloads in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelWeights, Precision};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCRASP01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn dtype_of(p: Precision) -> &'static str {
    match p {
        Precision::Single => "f32",
        Precision::Double => "f64",
    }
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let dtype = dtype_of(model.config.precision);
    let tensors = model.weights.tensors();
    let header = Header {
        config: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                dtype: dtype.into(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + model.weights.param_count() as usize * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, data) in &tensors {
        match model.config.precision {
            Precision::Double => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            Precision::Single => data
                .iter()
                .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| Error::ShapeMismatch("missing header length".into()))?
        .try_into()
        .expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(16..16usize.saturating_add(header_len))
        .ok_or_else(|| Error::ShapeMismatch("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    header.config.validate()?;
    let mut weights = ModelWeights::zeros(&header.config);
    let mut offset = 16 + header_len;
    {
        let slots = weights.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, dst), entry) in slots.into_iter().zip(&header.tensors) {
            let numel: usize = entry.shape.iter().product();
            if entry.name != name || numel != dst.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match config slot {name} ({} values)",
                    entry.name,
                    entry.shape,
                    dst.len()
                )));
            }
            let width = match entry.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(Error::ShapeMismatch(format!("unknown dtype {other}"))),
            };
            let payload = bytes.get(offset..offset + numel * width).ok_or_else(|| {
                Error::ShapeMismatch(format!("payload for {name} is truncated"))
            })?;
            for (d, chunk) in dst.iter_mut().zip(payload.chunks_exact(width)) {
                *d = if width == 8 {
                    f64::from_le_bytes(chunk.try_into().expect("8 bytes"))
                } else {
                    f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64
                };
            }
            offset += numel * width;
        }
    }
    if offset != bytes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Model::new(header.config, weights)
}

/// Write a checkpoint atomically (temp file in the target directory, then rename).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_prune, enumerate_units, UnitKind};

    fn model() -> Model {
        Model::random(ModelConfig::dense(2, 16, 4, 2, 4, 6, 20, 16, 2).unwrap(), 5)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"MCRASP01");
    }

    #[test]
    fn truncated_file_is_a_shape_error() {
        let bytes = encode_checkpoint(&model()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(cut), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn pruned_model_round_trips() {
        let m = model();
        let keep = enumerate_units(&m.config)
            .into_iter()
            .filter(|u| !(u.layer == 1 && u.kind == UnitKind::MlpNeuron && u.index_in_layer < 4))
            .filter(|u| !(u.layer == 0 && u.kind == UnitKind::GqaGroup && u.index_in_layer == 0))
            .collect();
        let p = apply_prune(&m, &keep).unwrap();
        assert_eq!(p.config.layers[1].d_mlp, 2);
        let back = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn single_precision_round_trips_rounded_weights() {
        let mut cfg = ModelConfig::dense(1, 8, 2, 1, 4, 3, 10, 8, 1).unwrap();
        cfg.precision = Precision::Single;
        let m = Model::random(cfg, 1);
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
