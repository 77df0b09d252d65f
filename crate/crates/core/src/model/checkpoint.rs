//! Parameter checkpoints: versioned header then tensors as little-endian
//! 64-bit floats in a fixed order, byte-exact across round trips.
//!
//! Layout: magic `FQCKPT01`, u32 version, six u64 config fields
//! (vocab_size, embed_dim, context_window, hidden_dim, adapter_rank, seed),
//! then row-major tensor data in the order embedding, input_proj,
//! hidden_bias, base_output, adapter_down, adapter_up.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::experiment::atomic_write;
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"FQCKPT01";
const VERSION: u32 = 1;

fn push_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let c = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for field in [
        c.vocab_size as u64,
        c.embed_dim as u64,
        c.context_window as u64,
        c.hidden_dim as u64,
        c.adapter_rank as u64,
        c.seed,
    ] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    push_matrix(&mut buf, &params.embedding);
    push_matrix(&mut buf, &params.input_proj);
    for x in params.hidden_bias.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    push_matrix(&mut buf, &params.base_output);
    push_matrix(&mut buf, &params.adapter_down);
    push_matrix(&mut buf, &params.adapter_up);
    atomic_write(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!(
                "checkpoint {} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::data(format!(
            "{} is not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let config = ModelConfig {
        vocab_size: r.u64()? as usize,
        embed_dim: r.u64()? as usize,
        context_window: r.u64()? as usize,
        hidden_dim: r.u64()? as usize,
        adapter_rank: r.u64()? as usize,
        seed: r.u64()?,
    };
    config.validate()?;
    let (v, d, k, h, rank) = (
        config.vocab_size,
        config.embed_dim,
        config.context_window,
        config.hidden_dim,
        config.adapter_rank,
    );
    let embedding = r.matrix(v, d)?;
    let input_proj = r.matrix(k * d, h)?;
    let mut hidden_bias = DVector::zeros(h);
    for i in 0..h {
        hidden_bias[i] = r.f64()?;
    }
    let base_output = r.matrix(h, v)?;
    let adapter_down = r.matrix(h, rank)?;
    let adapter_up = r.matrix(rank, v)?;
    if r.pos != bytes.len() {
        return Err(Error::data(format!(
            "checkpoint {} has {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(ModelParams {
        config,
        embedding,
        input_proj,
        hidden_bias,
        base_output,
        adapter_down,
        adapter_up,
    })
}
