//! Binary containers: embedding stores (`PGES`) and synthetic datasets (`PGDS`).
//!
//! All integers and reals are little-endian.
//!
//! Embedding store, version 1:
//!
//! ```text
//! magic    "PGES"                      4 bytes
//! version  u32                         4
//! dim      u32                         4
//! count    u64                         8
//! dtype    u8 (0 = f32)                1
//! ids      count x (u32 len, UTF-8)    4 + len each
//! mu       count x dim f32, row-major
//! log_var  count x dim f32, row-major
//! ```
//!
//! Dataset file, version 1, shares the header and id block (`dim` is the
//! report feature length, `dtype` is 1 = f64) followed by a payload:
//!
//! ```text
//! config     u32 len + JSON of SynthConfig
//! height     u32, width u32, classes u32
//! per study  class u32, text_class u32, ambiguity f64, has_view2 u8,
//!            view1 (h*w f64), [view2 (h*w f64)], sect1 (dim f64), sect2 (dim f64)
//! prototypes classes x dim f64 (text), classes x h*w f64 (image)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::gaussian::{GaussianEmbedding, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::perturb::Grid;
use crate::synth::{SynthConfig, SynthDataset, SynthStudy};
use crate::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"PGES";
pub const DATASET_MAGIC: &[u8; 4] = b"PGDS";
pub const STORE_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
/// Slack on the log-variance range accepted when reading.
pub const LOG_VAR_READ_TOLERANCE: f64 = 1e-6;
/// Bytes before the id block.
pub const HEADER_LEN: usize = 21;

/// Ordered ids and Gaussian embeddings of one modality, stored at 32 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    mu: Vec<f32>,
    log_var: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), mu: Vec::new(), log_var: Vec::new() }
    }

    pub fn from_embeddings(ids: Vec<String>, embeddings: &[GaussianEmbedding]) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::dims(ids.len(), embeddings.len()));
        }
        let dim = embeddings.first().map(|z| z.dim()).unwrap_or(0);
        let mut store = Self::new(dim);
        for (id, z) in ids.into_iter().zip(embeddings) {
            store.push(id, z)?;
        }
        Ok(store)
    }

    /// Raw constructor; validates every invariant.
    pub fn from_parts(dim: usize, ids: Vec<String>, mu: Vec<f32>, log_var: Vec<f32>) -> Result<Self> {
        let store = Self { dim, ids, mu, log_var };
        store.validate().map_err(Error::InvalidInput)?;
        Ok(store)
    }

    pub fn push(&mut self, id: String, z: &GaussianEmbedding) -> Result<()> {
        if z.dim() != self.dim {
            return Err(Error::dims(self.dim, z.dim()));
        }
        if self.ids.contains(&id) {
            return Err(Error::invalid(format!("duplicate id {id:?}")));
        }
        self.ids.push(id);
        self.mu.extend(z.mu().iter().map(|&v| v as f32));
        self.log_var.extend(z.log_var().iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn mu_raw(&self) -> &[f32] {
        &self.mu
    }

    pub fn log_var_raw(&self) -> &[f32] {
        &self.log_var
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Entry `i` upcast to 64 bits.
    pub fn get(&self, i: usize) -> GaussianEmbedding {
        let row = i * self.dim..(i + 1) * self.dim;
        let mu = self.mu[row.clone()].iter().map(|&v| v as f64).collect();
        let lv = self.log_var[row].iter().map(|&v| v as f64).collect();
        GaussianEmbedding::new(mu, lv).expect("store invariants checked on insert and read")
    }

    pub fn embeddings(&self) -> Vec<GaussianEmbedding> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.ids.len();
        if self.mu.len() != n * self.dim || self.log_var.len() != n * self.dim {
            return Err(format!("array lengths do not match {n} x {}", self.dim));
        }
        if n > 0 && self.dim == 0 {
            return Err("non-empty store with dimension 0".into());
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(format!("duplicate id {id:?}"));
            }
        }
        if let Some(v) = self.mu.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite mean {v}"));
        }
        let lo = LOG_VAR_MIN - LOG_VAR_READ_TOLERANCE;
        let hi = LOG_VAR_MAX + LOG_VAR_READ_TOLERANCE;
        if let Some(v) = self.log_var.iter().find(|&&v| !(lo..=hi).contains(&(v as f64))) {
            return Err(format!("log-variance {v} outside [{LOG_VAR_MIN}, {LOG_VAR_MAX}]"));
        }
        Ok(())
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.ids.iter().map(|s| 4 + s.len()).sum::<usize>() + 2 * self.mu.len() * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(self.encoded_len());
        w.bytes(STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.ids.len() as u64);
        w.u8(DTYPE_F32);
        for id in &self.ids {
            w.string(id);
        }
        for &v in self.mu.iter().chain(&self.log_var) {
            w.bytes(&v.to_le_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let (dim, count, dtype) = r.header(STORE_MAGIC, STORE_VERSION)?;
        if dtype != DTYPE_F32 {
            return Err(r.format(format!("unsupported dtype flag {dtype}")));
        }
        let ids = r.ids(count)?;
        let values = count.checked_mul(dim).ok_or_else(|| r.format("record count overflows".into()))?;
        let mu = r.f32s(values)?;
        let log_var = r.f32s(values)?;
        r.expect_end()?;
        let store = Self { dim, ids, mu, log_var };
        store.validate().map_err(|reason| Error::Validation { path: path.to_path_buf(), reason })?;
        Ok(store)
    }
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    store.validate().map_err(|reason| Error::Validation { path: path.to_path_buf(), reason })?;
    fs::write(path, store.to_bytes()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    EmbeddingStore::from_bytes(&bytes, path)
}

pub fn dataset_to_bytes(ds: &SynthDataset) -> Vec<u8> {
    let cfg = &ds.config;
    let mut w = ByteWriter::with_capacity(1024);
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(cfg.text_dim as u32);
    w.u64(ds.studies.len() as u64);
    w.u8(DTYPE_F64);
    for s in &ds.studies {
        w.string(&s.id);
    }
    let json = serde_json::to_string(cfg).expect("config serializes");
    w.string(&json);
    w.u32(cfg.height as u32);
    w.u32(cfg.width as u32);
    w.u32(ds.text_prototypes.len() as u32);
    for s in &ds.studies {
        w.u32(s.class_label as u32);
        w.u32(s.text_class as u32);
        w.f64s(&[s.ambiguity]);
        w.u8(u8::from(s.view2.is_some()));
        w.f64s(s.view1.as_slice());
        if let Some(v2) = &s.view2 {
            w.f64s(v2.as_slice());
        }
        w.f64s(&s.sect1);
        w.f64s(&s.sect2);
    }
    for p in &ds.text_prototypes {
        w.f64s(p);
    }
    for g in &ds.image_prototypes {
        w.f64s(g.as_slice());
    }
    w.finish()
}

pub fn dataset_from_bytes(bytes: &[u8], path: &Path) -> Result<SynthDataset> {
    let mut r = ByteReader::new(bytes, path);
    let (dim, count, dtype) = r.header(DATASET_MAGIC, DATASET_VERSION)?;
    if dtype != DTYPE_F64 {
        return Err(r.format(format!("unsupported dtype flag {dtype}")));
    }
    let ids = r.ids(count)?;
    let json = r.string()?;
    let config: SynthConfig = serde_json::from_str(&json).map_err(|e| r.format(format!("bad config block: {e}")))?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if config.text_dim != dim || config.height != height || config.width != width || config.n_classes != classes {
        return Err(r.format("payload shape disagrees with config block".into()));
    }
    let grid = |r: &mut ByteReader| -> Result<Grid> {
        let data = r.f64s(height * width)?;
        Grid::new(height, width, data).map_err(|e| r.format(e.to_string()))
    };
    let mut studies = Vec::with_capacity(count);
    for id in ids {
        let class_label = r.u32()? as usize;
        let text_class = r.u32()? as usize;
        let ambiguity = r.f64s(1)?[0];
        let has_view2 = r.u8()?;
        let view1 = grid(&mut r)?;
        let view2 = match has_view2 {
            0 => None,
            1 => Some(grid(&mut r)?),
            other => return Err(r.format(format!("bad view flag {other}"))),
        };
        let sect1 = r.f64s(dim)?;
        let sect2 = r.f64s(dim)?;
        if class_label >= classes || text_class >= classes {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                reason: format!("study {id}: class out of range"),
            });
        }
        studies.push(SynthStudy { id, view1, view2, sect1, sect2, class_label, text_class, ambiguity });
    }
    let text_prototypes = (0..classes).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
    let image_prototypes = (0..classes).map(|_| grid(&mut r)).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    Ok(SynthDataset { config, studies, text_prototypes, image_prototypes })
}

pub fn write_dataset(ds: &SynthDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_bytes(ds)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<SynthDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    dataset_from_bytes(&bytes, path)
}

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub(crate) fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub(crate) fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self { bytes, pos: 0, path: path.to_path_buf() }
    }

    pub(crate) fn format(&self, reason: String) -> Error {
        Error::Format { path: self.path.clone(), reason }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.path.clone(),
            reason: format!("needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| self.format("file too short for magic".into()))?;
        if got != expected {
            return Err(self.format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<(usize, usize, u8)> {
        self.magic(magic)?;
        let v = self.u32()?;
        if v != version {
            return Err(self.format(format!("unsupported version {v}")));
        }
        let dim = self.u32()? as usize;
        let count = usize::try_from(self.u64()?).map_err(|_| self.format("count overflows".into()))?;
        let dtype = self.u8()?;
        Ok((dim, count, dtype))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| self.format(format!("invalid UTF-8: {e}")))
    }

    fn ids(&mut self, count: usize) -> Result<Vec<String>> {
        // each id needs at least its 4-byte length prefix
        if count > (self.bytes.len() - self.pos) / 4 {
            return Err(Error::Truncated { path: self.path.clone(), reason: format!("{count} ids cannot fit") });
        }
        (0..count).map(|_| self.string()).collect()
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| self.format("length overflows".into()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.format("length overflows".into()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn sample_store() -> EmbeddingStore {
        let z1 = GaussianEmbedding::new(vec![0.25, -1.5, 3.0], vec![-6.0, 0.0, 6.0]).unwrap();
        let z2 = GaussianEmbedding::new(vec![1.0, 2.0, -0.5], vec![0.5, -1.0, 2.0]).unwrap();
        EmbeddingStore::from_embeddings(vec!["a".into(), "béta".into()], &[z1, z2]).unwrap()
    }

    #[test]
    fn roundtrip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pges");
        let store = sample_store();
        write_store(&store, &path).unwrap();
        let back = read_store(&path).unwrap();
        assert_eq!(back, store);
        let size = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, HEADER_LEN + (4 + 1) + (4 + "béta".len()) + 2 * 2 * 3 * 4);
        assert_eq!(size, store.encoded_len());
    }

    #[test]
    fn empty_store_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pges");
        write_store(&EmbeddingStore::new(8), &path).unwrap();
        let back = read_store(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 8);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, HEADER_LEN);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = sample_store().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = EmbeddingStore::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn truncation_is_length_error() {
        let bytes = sample_store().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 13, HEADER_LEN + 2] {
            let err = EmbeddingStore::from_bytes(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn out_of_range_log_var_is_validation_error() {
        let store = sample_store();
        let mut bytes = store.to_bytes();
        // last float is log_var[1][2]
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&6.5f32.to_le_bytes());
        let err = EmbeddingStore::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let z = GaussianEmbedding::new(vec![0.0], vec![0.0]).unwrap();
        assert!(EmbeddingStore::from_embeddings(vec!["a".into(), "a".into()], &[z.clone(), z]).is_err());
        assert!(EmbeddingStore::from_parts(1, vec!["a".into(), "a".into()], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let ds = generate_dataset(&SynthConfig { n_studies: 12, height: 4, width: 5, ..Default::default() }).unwrap();
        assert!(ds.studies.iter().any(|s| s.view2.is_none()) || ds.studies.iter().all(|s| s.view2.is_some()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgds");
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        let bytes = fs::read(&path).unwrap();
        assert!(dataset_from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
    }
}
