//! Self-describing binary checkpoints.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"VUSFACKP"
//! 8       4     format version, u32 (currently 1)
//! 12      8     training step count, u64
//! 20      4     parameter tensor count N, u32
//! ...           N tensor records (parameter values, in layout order)
//! ...     4     optimizer tensor count M, u32 (M = N; RMSProp squared-
//!               gradient averages, names match the parameters)
//! ...           M tensor records
//!
//! tensor record:
//!   4           name length L, u32
//!   L           name, UTF-8
//!   4           rank R, u32
//!   8 * R       dimensions, u64 each
//!   8 * prod    data, f64 little-endian, row-major
//! ```
//!
//! The model configuration is stored alongside the checkpoint as key-value
//! text (same `<path>.cfg` stem), not inside it, so the binary stays a pure
//! tensor container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"VUSFACKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("optimizer stats misaligned with parameters: {0}")]
    Misaligned(String),
}

pub struct Checkpoint {
    pub params: ParamSet,
    pub opt_sq: Vec<Tensor>,
    pub step: u64,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), CheckpointError> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor), CheckpointError> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(CheckpointError::Corrupt(format!(
            "implausible name length {name_len}"
        )));
    }
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|e| CheckpointError::Corrupt(format!("name not UTF-8: {e}")))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(CheckpointError::Corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let t = Tensor::new(shape, data)
        .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

pub fn save(
    path: &Path,
    params: &ParamSet,
    opt_sq: &[Tensor],
    step: u64,
) -> Result<(), CheckpointError> {
    if opt_sq.len() != params.len() {
        return Err(CheckpointError::Misaligned(format!(
            "{} stats for {} params",
            opt_sq.len(),
            params.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_tensor(&mut w, name, t)?;
    }
    w.write_all(&(opt_sq.len() as u32).to_le_bytes())?;
    for ((name, _), t) in params.iter().zip(opt_sq) {
        write_tensor(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let step = read_u64(&mut r)?;

    let n_params = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let (name, t) = read_tensor(&mut r)?;
        params
            .insert(&name, t)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }

    let n_opt = read_u32(&mut r)? as usize;
    if n_opt != n_params {
        return Err(CheckpointError::Misaligned(format!(
            "{n_opt} optimizer tensors for {n_params} params"
        )));
    }
    let mut opt_sq = Vec::with_capacity(n_opt);
    for i in 0..n_opt {
        let (name, t) = read_tensor(&mut r)?;
        let (expect_name, expect) = params.by_index(i);
        if name != expect_name || t.shape() != expect.shape() {
            return Err(CheckpointError::Misaligned(format!(
                "optimizer tensor {name} does not match parameter {expect_name}"
            )));
        }
        opt_sq.push(t);
    }

    Ok(Checkpoint {
        params,
        opt_sq,
        step,
    })
}

/// SHA-256 of a file's bytes, as lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex_string(&hasher.finalize()))
}

/// SHA-256 over a parameter set's values (names, shapes, data), for
/// in-memory purity checks.
pub fn params_sha256(params: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in params.iter() {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
