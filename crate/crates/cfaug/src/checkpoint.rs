//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `CFAUGCK1`, a little-endian u64 header length,
//! a JSON header (config, vocabulary, tensor names and shapes), every tensor
//! as little-endian f64 in header order, then a SHA-256 digest of all
//! preceding bytes.

use std::path::{Path, PathBuf};

use cfaug_core::autograd::{ParamStore, Tensor};
use cfaug_core::corpus::Vocabulary;
use cfaug_core::model::{DisAeConfig, DisAeModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"CFAUGCK1";
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: not a checkpoint (bad magic)", .0.display())]
    BadMagic(PathBuf),
    #[error("{}: truncated checkpoint ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("{}: checksum mismatch", .0.display())]
    Checksum(PathBuf),
    #[error("{}: malformed header: {message}", path.display())]
    Header { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Model { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Os {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DisAeConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorShape>,
}

#[derive(Serialize, Deserialize)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn to_bytes(model: &DisAeModel) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        vocab: model.vocab().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| TensorShape {
                name: name.into(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + model.params().scalar_count() * 8 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in model.params().iter() {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<DisAeModel, CheckpointError> {
    let truncated = |detail: &str| CheckpointError::Truncated {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if bytes.len() < MAGIC.len() {
        return Err(truncated("shorter than the magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(truncated("no header"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len() - DIGEST_LEN)
        .ok_or_else(|| truncated("header extends past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CheckpointError::Header {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let expected = header_end + scalars * 8 + DIGEST_LEN;
    if bytes.len() < expected {
        return Err(truncated(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(CheckpointError::Header {
            path: path.to_path_buf(),
            message: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let body_end = expected - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::Checksum(path.to_path_buf()));
    }
    let mut store = ParamStore::new();
    let mut chunks = bytes[header_end..body_end].chunks_exact(8);
    for shape in header.tensors {
        let mut t = Tensor::zeros(shape.rows, shape.cols);
        for (x, c) in t.data.iter_mut().zip(chunks.by_ref()) {
            *x = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        store.add(shape.name, t);
    }
    DisAeModel::from_parts(header.config, header.vocab, store).map_err(|e| CheckpointError::Model {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save(model: &DisAeModel, path: &Path) -> Result<(), CheckpointError> {
    let os = |source| CheckpointError::Os {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(os)?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model)).map_err(os)?;
    std::fs::rename(&tmp, path).map_err(os)
}

pub fn load(path: &Path) -> Result<DisAeModel, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CheckpointError::Missing(path.to_path_buf())
        } else {
            CheckpointError::Os {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    from_bytes(&bytes, path)
}
