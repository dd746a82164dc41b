//! Versioned binary checkpoint: parameters, AdamW moments and step counter.
//!
//! Layout (version 1, little-endian):
//!
//! ```text
//! magic        "PGCK"
//! version      u32
//! scoring      u8 (0 = csd, 1 = neg_cosine)
//! image_in     u32
//! text_in      u32
//! n_hidden     u32, then n_hidden x u32 hidden sizes
//! embed_dim    u32
//! step         u64
//! n_params     u64
//! params       n_params x f64   (DualEncoder::to_flat order)
//! m            n_params x f64
//! v            n_params x f64
//! ```

use std::fs;
use std::path::Path;

use crate::store::{ByteReader, ByteWriter};
use crate::trainer::{AdamW, DualEncoder, Scoring, TrainConfig, TrainState};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_to_bytes(state: &TrainState) -> Vec<u8> {
    let model = &state.model;
    let params = model.to_flat();
    let mut w = ByteWriter::with_capacity(64 + params.len() * 24);
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(match model.scoring {
        Scoring::Csd => 0,
        Scoring::NegCosine => 1,
    });
    w.u32(model.image.input_dim() as u32);
    w.u32(model.text.input_dim() as u32);
    let hidden = model.image.hidden_sizes();
    w.u32(hidden.len() as u32);
    for h in &hidden {
        w.u32(*h as u32);
    }
    w.u32(model.image.embed_dim() as u32);
    w.u64(state.optimizer.step);
    w.u64(params.len() as u64);
    w.f64s(&params);
    w.f64s(&state.optimizer.m);
    w.f64s(&state.optimizer.v);
    w.finish()
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.format(format!("unsupported version {version}")));
    }
    let scoring = match r.u8()? {
        0 => Scoring::Csd,
        1 => Scoring::NegCosine,
        other => return Err(r.format(format!("unknown scoring flag {other}"))),
    };
    let image_in = r.u32()? as usize;
    let text_in = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let hidden = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    let embed_dim = r.u32()? as usize;
    let step = r.u64()?;
    let n_params = r.u64()? as usize;
    let cfg = TrainConfig { hidden, embed_dim, ..Default::default() };
    let mut model = DualEncoder::init(image_in, text_in, &cfg, scoring);
    if model.num_params() != n_params {
        return Err(r.format(format!("architecture implies {} parameters, header says {n_params}", model.num_params())));
    }
    let params = r.f64s(n_params)?;
    let m = r.f64s(n_params)?;
    let v = r.f64s(n_params)?;
    r.expect_end()?;
    if params.iter().chain(&m).chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::Validation { path: path.to_path_buf(), reason: "non-finite parameter".into() });
    }
    model.load_flat(&params)?;
    Ok(TrainState { model, optimizer: AdamW { m, v, step } })
}

pub fn write_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_bytes(state)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    checkpoint_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let cfg = TrainConfig { hidden: vec![5, 4], embed_dim: 3, seed: 8, ..Default::default() };
        let mut state = TrainState::new(DualEncoder::init(7, 5, &cfg, Scoring::NegCosine));
        state.optimizer.step = 12;
        state.optimizer.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.5);
        state.model.scalars.b = -0.75;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&state, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), state);

        let bytes = fs::read(&path).unwrap();
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 8], &path), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad, &path), Err(Error::Format { .. })));
    }
}
