//! Binary checkpoints: little-endian, versioned, one length-prefixed block per tensor.
//!
//! ```text
//! magic "ICVFCKPT" | u64 version | u64 kind | u64 n_states | u64 dim | u64 n_tensors
//! then per tensor: u64 len | len × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelKind, MonolithicIcvf, MultilinearIcvf, Parameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICVFCKPT";
const VERSION: u64 = 1;

fn corrupt(message: impl Into<String>) -> Error {
    Error::Format {
        line: 0,
        message: message.into(),
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, model: &Model) -> Result<()> {
    let n_states = super::IcvfModel::n_states(model) as u64;
    let tensors = model.tensors();
    out.write_all(CHECKPOINT_MAGIC)?;
    for x in [
        VERSION,
        model.kind().code(),
        n_states,
        model.dim() as u64,
        tensors.len() as u64,
    ] {
        out.write_all(&x.to_le_bytes())?;
    }
    for t in tensors {
        out.write_all(&(t.len() as u64).to_le_bytes())?;
        for x in t {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input
        .read_exact(&mut buf)
        .map_err(|_| corrupt("checkpoint truncated"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor<R: Read>(input: &mut R, expected: usize) -> Result<Vec<f64>> {
    let len = read_u64(input)? as usize;
    if len != expected {
        return Err(corrupt(format!("tensor has {len} entries, expected {expected}")));
    }
    let mut bytes = vec![0u8; len * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|_| corrupt("checkpoint truncated"))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| corrupt("checkpoint truncated"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = read_u64(&mut input)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let kind = read_u64(&mut input)?;
    let kind = ModelKind::from_code(kind).ok_or_else(|| corrupt(format!("unknown model kind code {kind}")))?;
    let n = read_u64(&mut input)? as usize;
    let d = read_u64(&mut input)? as usize;
    let n_tensors = read_u64(&mut input)?;
    if n == 0 || d == 0 || n > 1 << 20 || d > 1 << 12 {
        return Err(corrupt(format!("implausible shape n_states={n}, d={d}")));
    }
    let expected_tensors = if kind == ModelKind::Monolithic { 4 } else { 3 };
    if n_tensors != expected_tensors {
        return Err(corrupt(format!(
            "{kind} checkpoint must hold {expected_tensors} tensors"
        )));
    }
    let model = match kind {
        ModelKind::Multilinear | ModelKind::SingleIntent => {
            let phi = read_tensor(&mut input, n * d)?;
            let psi = read_tensor(&mut input, n * d)?;
            let tcore = read_tensor(&mut input, d * d * d)?;
            Model::Multilinear(MultilinearIcvf::from_parts(
                n,
                d,
                kind == ModelKind::SingleIntent,
                phi,
                psi,
                tcore,
            )?)
        }
        ModelKind::Monolithic => {
            let phi = read_tensor(&mut input, n * d)?;
            let w = read_tensor(&mut input, d * d)?;
            let b = read_tensor(&mut input, d)?;
            let head = read_tensor(&mut input, n * n * d)?;
            Model::Monolithic(MonolithicIcvf::from_parts(n, d, phi, w, b, head)?)
        }
    };
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes after checkpoint"));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
