//! Precomputed embedding store: a `.embbin` file of little-endian f32 token
//! matrices plus a `.manifest.json` sidecar indexing blocks by text sha256.
//! This lets embeddings computed offline by a real backbone drive the toolkit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{EmbeddingProvider, TokenMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    /// text sha256 (hex) -> (byte offset, n_tokens, dim)
    entries: BTreeMap<String, (u64, usize, usize)>,
}

pub fn text_sha256(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Read-only store; misses name the text by sha and a short snippet.
pub struct PrecomputedStore {
    data: Vec<u8>,
    manifest: Manifest,
}

impl PrecomputedStore {
    pub fn open(data_path: &Path) -> Result<Self> {
        let data = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
        let mp = manifest_path(data_path);
        let raw = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        Ok(PrecomputedStore { data, manifest })
    }

    fn lookup(&self, text: &str) -> Result<TokenMatrix> {
        let id = text_sha256(text);
        let (offset, n_tokens, dim) = *self.manifest.entries.get(&id).ok_or_else(|| {
            let snippet: String = text.chars().take(40).collect();
            Error::PrecomputedMiss { id: id.clone(), snippet }
        })?;
        let start = offset as usize;
        let len = n_tokens * dim * 4;
        let slice = self
            .data
            .get(start..start + len)
            .ok_or_else(|| Error::Provider(format!("store block out of range for {id}")))?;
        let mut rows = Array2::zeros((n_tokens, dim));
        for t in 0..n_tokens {
            for c in 0..dim {
                let i = (t * dim + c) * 4;
                let v = f32::from_le_bytes(slice[i..i + 4].try_into().unwrap());
                rows[[t, c]] = f64::from(v);
            }
        }
        TokenMatrix::new(rows)
    }
}

impl EmbeddingProvider for PrecomputedStore {
    fn dim(&self) -> usize {
        self.manifest.dim
    }

    fn embed(&self, text: &str) -> Result<TokenMatrix> {
        self.lookup(text)
    }
}

/// Builds a store file pair from (text, matrix) pairs.
pub struct StoreWriter {
    data_path: PathBuf,
    buf: Vec<u8>,
    manifest: Manifest,
}

impl StoreWriter {
    pub fn new(data_path: impl Into<PathBuf>, dim: usize) -> Self {
        StoreWriter {
            data_path: data_path.into(),
            buf: Vec::new(),
            manifest: Manifest {
                dim,
                entries: BTreeMap::new(),
            },
        }
    }

    pub fn add(&mut self, text: &str, matrix: &TokenMatrix) -> Result<()> {
        if matrix.dim() != self.manifest.dim {
            return Err(Error::DimMismatch {
                expected: self.manifest.dim,
                got: matrix.dim(),
                context: "store writer".into(),
            });
        }
        let offset = self.buf.len() as u64;
        for v in matrix.rows().iter() {
            self.buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.manifest.entries.insert(
            text_sha256(text),
            (offset, matrix.token_count(), matrix.dim()),
        );
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let mut f =
            fs::File::create(&self.data_path).map_err(|e| Error::io(&self.data_path, e))?;
        f.write_all(&self.buf)
            .map_err(|e| Error::io(&self.data_path, e))?;
        let mp = manifest_path(&self.data_path);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{hash_embed, tokenize};

    #[test]
    fn round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.embbin");
        let m1 = hash_embed(&tokenize("first text"), 4, 0).unwrap();
        let m2 = hash_embed(&tokenize("second one"), 4, 0).unwrap();

        let mut w = StoreWriter::new(&path, 4);
        w.add("first text", &m1).unwrap();
        w.add("second one", &m2).unwrap();
        w.finish().unwrap();

        let store = PrecomputedStore::open(&path).unwrap();
        let got = store.embed("first text").unwrap();
        let diff = got.rows() - m1.rows();
        assert!(diff.iter().all(|v| v.abs() < 1e-6), "f32 round trip");

        match store.embed("never stored") {
            Err(Error::PrecomputedMiss { id, .. }) => {
                assert_eq!(id, text_sha256("never stored"));
            }
            other => panic!("expected miss, got {other:?}"),
        }
    }
}
