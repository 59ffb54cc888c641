//! Checkpoint file: 8-byte magic, little-endian u64 header length, JSON
//! header, then every tensor as little-endian f32 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::data::ClassMap;
use crate::error::{Error, Result};
use crate::model::{init_params, Model, ModelDims};

pub const MAGIC: &[u8; 8] = b"ASDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub class_map: ClassMap,
    /// SHA-256 over the final mixup generator position.
    pub rng_digest: String,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Values already rounded to f32 precision.
    pub tensors: Vec<(String, Tensor)>,
}

fn to_f32_precision(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    pub fn from_model(model: &Model, class_map: ClassMap, train: TrainConfig, rng_digest: String) -> Self {
        let tensors: Vec<(String, Tensor)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, to_f32_precision(t)))
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                dims: model.dims.clone(),
                train,
                class_map,
                rng_digest,
                tensors: tensors
                    .iter()
                    .map(|(n, t)| TensorMeta {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            },
            tensors,
        }
    }

    /// Rebuilds the model; names and shapes must match the declared dims.
    pub fn model(&self) -> Result<Model> {
        let mut model = init_params(0, &self.header.dims)?;
        let slots = model.named_tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the model needs {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), (stored, t)) in slots.into_iter().zip(&self.tensors) {
            if &name != stored || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {stored} {:?} does not fit model slot {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let blob_len: usize = self.tensors.iter().map(|(_, t)| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic or truncated prefix)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header of {header_len} bytes runs past end of file")))?;
        let version: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])?;
        let found = version.get("format_version").and_then(|v| v.as_u64());
        if found != Some(FORMAT_VERSION as u64) {
            return Err(bad(format!(
                "unsupported format version {found:?}, expected {FORMAT_VERSION}"
            )));
        }
        let header: CheckpointHeader = serde_json::from_value(version)?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let n: usize = meta.shape.iter().product();
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(bad(format!(
                    "blob for {} needs {} bytes, only {} remain",
                    meta.name,
                    4 * n,
                    bytes.len() - offset
                )));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((meta.name.clone(), Tensor::new(meta.shape.clone(), data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last blob",
                bytes.len() - offset
            )));
        }
        Ok(Checkpoint { header, tensors })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelConfig;
    use crate::model::BackboneConfig;

    fn small() -> Checkpoint {
        let mut dims = ModelDims::new(
            MelConfig {
                n_fft: 32,
                hop: 16,
                n_mels: 6,
                ..MelConfig::default()
            },
            3,
        );
        dims.backbone = BackboneConfig {
            channels: vec![4, 5],
            embedding_dim: 7,
            ..BackboneConfig::default()
        };
        let model = init_params(11, &dims).unwrap();
        let classes = ClassMap::from_keys([("fan".into(), 0), ("fan".into(), 1), ("pump".into(), 0)]);
        Checkpoint::from_model(&model, classes, TrainConfig::default(), "00".into())
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ck = small();
        save_checkpoint(&ck, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ck);
        for ((_, x), (_, y)) in loaded.tensors.iter().zip(&ck.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let model = loaded.model().unwrap();
        assert_eq!(model.named_tensors().len(), ck.tensors.len());
    }

    #[test]
    fn truncation_is_a_structured_error() {
        let bytes = small().to_bytes().unwrap();
        for cut in [0, 7, 15, 40, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_) | Error::Json(_)), "{cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut ck = small();
        ck.header.format_version = 99;
        let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn mismatched_tensor_is_rejected_on_rebuild() {
        let mut ck = small();
        ck.tensors[0].1 = Tensor::zeros(&[1]);
        ck.header.tensors[0].shape = vec![1];
        let round = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(matches!(round.model(), Err(Error::Checkpoint(_))));
    }
}
