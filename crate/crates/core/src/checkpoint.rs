//! Versioned checkpoint container: a magic header, the config digest, then
//! named tensor records (UTF-8 name, rank, dims, little-endian f64 payload).

use crate::encoder::{EncoderParams, EncoderStats};
use crate::gbls::GblsParams;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"GBLSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("config digest mismatch: checkpoint {found}, config {expected}")]
    DigestMismatch { expected: String, found: String },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: String,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn check_digest(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.digest != expected {
            return Err(CheckpointError::DigestMismatch {
                expected: expected.to_string(),
                found: self.digest.clone(),
            });
        }
        Ok(())
    }
}

pub fn save(
    path: &Path,
    digest: &str,
    records: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    {
        let mut seen = HashMap::new();
        for (name, _) in records {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor name {name}")));
            }
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    buf.extend_from_slice(digest.as_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated record".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let digest_len = r.u32()? as usize;
    let digest = String::from_utf8(r.take(digest_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("digest is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    let mut index = HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} overflows")))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
        if index.insert(name.clone(), tensors.len()).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor name {name}")));
        }
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { version, digest, tensors, index })
}

/// Clones the encoder's parameters and running statistics into named records.
pub fn encoder_records(params: &EncoderParams, stats: &EncoderStats) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        params.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (i, bn) in stats.bn.iter().enumerate() {
        out.push((
            format!("encoder.reduce{i}.bn.mean"),
            Tensor::vector(bn.mean.clone()).expect("finite stats"),
        ));
        out.push((
            format!("encoder.reduce{i}.bn.var"),
            Tensor::vector(bn.var.clone()).expect("finite stats"),
        ));
    }
    out
}

pub fn gbls_records(params: &GblsParams) -> Vec<(String, Tensor)> {
    params.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn fill_tensor(dst: &mut Tensor, name: &str, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let src = ckpt.require(name)?;
    if src.shape() != dst.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: dst.shape().to_vec(),
            found: src.shape().to_vec(),
        });
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Overwrites freshly initialized encoder parameters and stats from records.
pub fn fill_encoder(
    params: &mut EncoderParams,
    stats: &mut EncoderStats,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (dst, name) in params.tensors_mut().into_iter().zip(&names) {
        fill_tensor(dst, name, ckpt)?;
    }
    for (i, bn) in stats.bn.iter_mut().enumerate() {
        let mean = ckpt.require(&format!("encoder.reduce{i}.bn.mean"))?;
        let var = ckpt.require(&format!("encoder.reduce{i}.bn.var"))?;
        if mean.numel() != bn.mean.len() || var.numel() != bn.var.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: format!("encoder.reduce{i}.bn"),
                expected: vec![bn.mean.len()],
                found: vec![mean.numel()],
            });
        }
        bn.mean.copy_from_slice(mean.data());
        bn.var.copy_from_slice(var.data());
    }
    Ok(())
}

pub fn fill_gbls(params: &mut GblsParams, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (dst, name) in params.tensors_mut().into_iter().zip(&names) {
        fill_tensor(dst, name, ckpt)?;
    }
    Ok(())
}
