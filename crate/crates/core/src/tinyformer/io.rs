//! Versioned binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "MAPE"
//! version      u32      1
//! config       8 x u64  num_layers, num_heads, d_model, d_ff,
//!                       vocab_size, num_classes, max_seq_len, seed
//! param_count  u64
//! params       param_count x f64, row-major, in ParamLayout field order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::state::ModelState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAPE";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_model<W: Write>(state: &ModelState, mut w: W) -> Result<()> {
    let c = &state.config;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        c.num_layers as u64,
        c.num_heads as u64,
        c.d_model as u64,
        c.d_ff as u64,
        c.vocab_size as u64,
        c.num_classes as u64,
        c.max_seq_len as u64,
        c.seed,
        state.params.len() as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(state.params.len() * 8);
    for p in &state.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let mut fields = [0u64; 9];
    let mut b8 = [0u8; 8];
    for f in fields.iter_mut() {
        r.read_exact(&mut b8)?;
        *f = u64::from_le_bytes(b8);
    }
    let config = ModelConfig {
        num_layers: fields[0] as usize,
        num_heads: fields[1] as usize,
        d_model: fields[2] as usize,
        d_ff: fields[3] as usize,
        vocab_size: fields[4] as usize,
        num_classes: fields[5] as usize,
        max_seq_len: fields[6] as usize,
        seed: fields[7],
    };
    config.validate()?;
    let count = fields[8] as usize;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != count * 8 {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            count * 8,
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ModelState::from_params(config, params)
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(state, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    read_model(fs::File::open(path)?)
}
