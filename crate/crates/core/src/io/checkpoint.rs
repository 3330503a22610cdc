//! Checkpoint files.
//!
//! Layout, integers little-endian:
//!
//! | field        | size | notes                                          |
//! |--------------|------|------------------------------------------------|
//! | magic        | 8    | `C3DCKPT\0`                                    |
//! | version      | 4    | `u32`, currently [`CHECKPOINT_VERSION`]        |
//! | header len   | 4    | `u32` byte length of the JSON header           |
//! | header       | n    | UTF-8 JSON [`CheckpointHeader`]                |
//! | blobs        | 4·Σ  | every parameter as row-major f32 LE, header order |
//! | checksum     | 32   | SHA-256 of all preceding bytes                 |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::model::{Clip3dModel, ModelConfig};
use crate::nn::ParamGroup;
use crate::render::RenderConfig;
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"C3DCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Includes the encoder configuration and its weight seed.
    pub model: ModelConfig,
    pub encoder_checksum: String,
    pub class_name: String,
    /// Present exactly when the model has multi-view fusion.
    pub render: Option<RenderConfig>,
    pub train: Option<TrainConfig>,
    pub params: Vec<ParamEntry>,
}

/// Trainable parameters stored at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Clip3dModel,
        encoder: &FrozenEncoder,
        class_name: &str,
        render: Option<&RenderConfig>,
        train: Option<&TrainConfig>,
    ) -> Self {
        let (params, data) = model
            .store()
            .iter()
            .map(|p| {
                let entry = ParamEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: [p.value.nrows(), p.value.ncols()],
                };
                (entry, p.value.iter().map(|&v| v as f32).collect())
            })
            .unzip();
        Self {
            header: CheckpointHeader {
                model: model.config().clone(),
                encoder_checksum: encoder.checksum(),
                class_name: class_name.to_string(),
                render: render.cloned(),
                train: train.cloned(),
                params,
            },
            data,
        }
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn to_model(&self) -> Result<Clip3dModel> {
        let mut model = Clip3dModel::new(self.header.model.clone())?;
        let params = self
            .header
            .params
            .iter()
            .zip(&self.data)
            .map(|(e, d)| {
                let m = Matrix::from_shape_vec((e.shape[0], e.shape[1]), d.iter().map(|&v| v as f64).collect())
                    .map_err(|_| Error::invalid(format!("parameter {} does not match its shape", e.name)))?;
                Ok((e.name.clone(), m))
            })
            .collect::<Result<Vec<_>>>()?;
        model.load_params(&params)?;
        if model.has_fusion() != self.header.render.is_some() {
            return Err(Error::invalid(
                "checkpoint must carry a render configuration exactly when fusion is on",
            ));
        }
        Ok(model)
    }

    /// The encoder described by the header, checked against the recorded weights.
    pub fn encoder(&self) -> Result<FrozenEncoder> {
        let encoder = FrozenEncoder::new(self.header.model.encoder.clone())?;
        if encoder.checksum() != self.header.encoder_checksum {
            return Err(Error::invalid(
                "encoder weights differ from the ones the checkpoint was trained with",
            ));
        }
        Ok(encoder)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for blob in &self.data {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Magic and version are checked before the checksum. A file too short to
    /// hold them counts as a checksum failure.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "bad magic, not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let header_bytes = body
            .get(16..16 + header_len)
            .ok_or_else(|| Error::format(path, 12, "header length exceeds the file"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::format(path, 16, format!("header: {e}")))?;
        let mut offset = 16 + header_len;
        let mut data = Vec::with_capacity(header.params.len());
        for e in &header.params {
            let n = e.shape[0] * e.shape[1];
            let blob = body
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::format(path, offset as u64, format!("blob of {} is truncated", e.name)))?;
            data.push(
                blob.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            );
            offset += 4 * n;
        }
        if offset != body.len() {
            return Err(Error::format(path, offset as u64, "trailing bytes after the last blob"));
        }
        Ok(Self { header, data })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
