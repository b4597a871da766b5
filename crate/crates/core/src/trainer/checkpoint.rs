//! Checkpoint container: magic `AMCK`, `u32` version, `u64` header length,
//! a JSON header, then parameters, first moments and second moments as
//! 64-bit matrix blobs in tensor visiting order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{decode_matrix_prefix, encode_matrix, read_bytes, write_atomic, Precision, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{tensor_names, ModelParams};
use crate::numerics::DenseMatrix;

use super::{MinedLists, ModelState, OptimizerKind, OptimizerState, Phase, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMCK";
const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// fingerprint of the dataset the state was trained on
    pub dataset_fingerprint: String,
    pub state: ModelState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    vocab: Vocabulary,
    dataset_fingerprint: String,
    phase: Phase,
    epoch: usize,
    step: usize,
    optimizer: OptimizerKind,
    optimizer_steps: u64,
    tensors: Vec<TensorInfo>,
    mined: Option<MinedLists>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ckpt.state;
    let tensors = s.params.tensors();
    let header = Header {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        dataset_fingerprint: ckpt.dataset_fingerprint.clone(),
        phase: s.phase,
        epoch: s.epoch,
        step: s.step,
        optimizer: s.optimizer.kind,
        optimizer_steps: s.optimizer.t,
        tensors: tensor_names()
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorInfo {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        mined: s.mined.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.iter().copied().chain(&s.optimizer.m).chain(&s.optimizer.v) {
        out.extend_from_slice(&encode_matrix(t, Precision::F64));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            expected: PREFIX_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::BadVersion {
            path: origin.to_path_buf(),
            version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or(Error::Truncated {
            path: origin.to_path_buf(),
            expected: PREFIX_LEN as u64 + header_len,
            actual: bytes.len() as u64,
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])?;
    header.config.validate()?;

    let names = tensor_names();
    if header.tensors.len() != names.len() || header.tensors.iter().zip(&names).any(|(t, n)| &t.name != n) {
        return Err(Error::Malformed(format!(
            "{}: checkpoint tensor list does not match the model layout",
            origin.display()
        )));
    }
    let mut offset = header_end;
    let mut blobs = Vec::with_capacity(3 * names.len());
    for i in 0..3 * names.len() {
        let (m, used) = decode_matrix_prefix(&bytes[offset..], origin)?;
        let info = &header.tensors[i % names.len()];
        if m.shape() != (info.rows, info.cols) {
            return Err(Error::Malformed(format!(
                "{}: tensor {} is {:?}, header says {}×{}",
                origin.display(),
                info.name,
                m.shape(),
                info.rows,
                info.cols
            )));
        }
        blobs.push(m);
        offset += used;
    }
    if offset != bytes.len() {
        return Err(Error::Malformed(format!(
            "{}: {} trailing bytes after checkpoint",
            origin.display(),
            bytes.len() - offset
        )));
    }
    let v: Vec<DenseMatrix> = blobs.split_off(2 * names.len());
    let m: Vec<DenseMatrix> = blobs.split_off(names.len());

    let feature_dim = header.tensors[0].rows;
    // shapes come from the config; values are overwritten below
    let mut params = ModelParams::init(
        &mut ChaCha8Rng::seed_from_u64(0),
        &header.config.model_config(),
        feature_dim,
        header.vocab.len(),
    )?;
    for (slot, (blob, name)) in params.tensors_mut().into_iter().zip(blobs.into_iter().zip(&names)) {
        if slot.shape() != blob.shape() {
            return Err(Error::Malformed(format!(
                "{}: tensor {name} is {:?} but the config implies {:?}",
                origin.display(),
                blob.shape(),
                slot.shape()
            )));
        }
        *slot = blob;
    }
    Ok(Checkpoint {
        config: header.config,
        vocab: header.vocab,
        dataset_fingerprint: header.dataset_fingerprint,
        state: ModelState {
            params,
            optimizer: OptimizerState {
                kind: header.optimizer,
                m,
                v,
                t: header.optimizer_steps,
            },
            phase: header.phase,
            epoch: header.epoch,
            step: header.step,
            mined: header.mined,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}
