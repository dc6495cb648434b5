//! Encoder abstraction: tokenization, pluggable embedding providers, pooling,
//! and cosine similarity.
//!
//! Three providers are available behind [`EmbeddingProvider`]:
//!
//! - [`HashEmbedder`]: deterministic hash-based token embeddings for
//!   desk-scale runs. Bit-exact across platforms: each token row is derived
//!   from FNV-1a-64 over the token's UTF-8 bytes XOR the seed, expanded with a
//!   splitmix64 sequence into `d` doubles in (-1, 1), then L2-normalized.
//! - [`store::PrecomputedStore`]: token matrices computed offline by a real
//!   backbone, stored as little-endian f32 blocks with a JSON manifest.
//! - [`remote::RemoteEmbedder`]: a client for `POST {model, input: [...]}`
//!   embedding services; single-vector responses are wrapped as 1-token
//!   matrices.

mod remote;
mod store;

pub use remote::{RemoteConfig, RemoteEmbedder};
pub use store::{PrecomputedStore, StoreWriter};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Token-level embedding matrix, `n_tokens x d`, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: Array2<f64>,
}

impl TokenMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidInput("token matrix needs >= 1 row".into()));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "token matrix".into(),
            });
        }
        Ok(TokenMatrix { rows })
    }

    pub fn token_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

/// Unit-norm pooled embedding. `norm` records the pre-normalization norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    v: Array1<f64>,
    norm: f64,
}

impl PooledVector {
    /// Normalizes `v` to unit length. The zero vector is rejected.
    pub fn new(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                stage: "pooled vector".into(),
            });
        }
        if norm < 1e-12 {
            return Err(Error::DegeneratePooling);
        }
        Ok(PooledVector { v: v / norm, norm })
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// Pre-normalization Euclidean norm.
    pub fn original_norm(&self) -> f64 {
        self.norm
    }
}

/// Pooling mode for collapsing a token matrix to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "last" => Ok(Pooling::Last),
            other => Err(Error::InvalidConfig(format!(
                "unknown pooling `{other}` (expected mean|last)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::Mean => write!(f, "mean"),
            Pooling::Last => write!(f, "last"),
        }
    }
}

/// Lowercases, splits on maximal runs of non-alphanumeric characters, drops
/// empties. Deterministic; all-separator input yields an empty list.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Mean or last-row pooling followed by L2 normalization.
pub fn pool(m: &TokenMatrix, mode: Pooling) -> Result<PooledVector> {
    let v = match mode {
        Pooling::Mean => m.rows().mean_axis(Axis(0)).expect("n >= 1"),
        Pooling::Last => m.rows().row(m.token_count() - 1).to_owned(),
    };
    PooledVector::new(v)
}

/// Dot product of two unit vectors, clamped to [-1, 1].
pub fn cosine_sim(a: &PooledVector, b: &PooledVector) -> f64 {
    a.as_array().dot(b.as_array()).clamp(-1.0, 1.0)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64 over UTF-8 bytes.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in data {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 step; the mix function behind the hash embedder.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a u64 to a double in the open interval (-1, 1). Exact in IEEE f64.
fn to_open_unit(z: u64) -> f64 {
    let u = ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    2.0 * u - 1.0
}

/// One unit-normalized hash row for a token.
fn hash_row(token: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut state = fnv1a64(token.as_bytes()) ^ seed;
    let mut row: Vec<f64> = (0..d).map(|_| to_open_unit(splitmix64(&mut state))).collect();
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut row {
        *v /= norm;
    }
    row
}

/// Deterministic token-matrix embedding; identical token yields an identical
/// row, bit-exact across platforms.
pub fn hash_embed(tokens: &[String], d: usize, seed: u64) -> Result<TokenMatrix> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput(
            "hash_embed requires a non-empty token list".into(),
        ));
    }
    let mut rows = Array2::zeros((tokens.len(), d));
    for (t, token) in tokens.iter().enumerate() {
        let row = hash_row(token, d, seed);
        for (c, v) in row.into_iter().enumerate() {
            rows[[t, c]] = v;
        }
    }
    TokenMatrix::new(rows)
}

/// Pluggable encoder. Providers are read-only after construction and safe for
/// concurrent use.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<TokenMatrix>;

    /// Order-preserving batch embedding.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TokenMatrix>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Desk-scale deterministic provider over [`hash_embed`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TokenMatrix> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText { text: text.into() });
        }
        hash_embed(&tokens, self.dim, self.seed)
    }
}

/// Provider selection plus the knobs shared by every kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pooling: Pooling,
    /// Same provider instance for passages and instruction-aware queries.
    #[serde(default = "default_true")]
    pub share_encoder: bool,
    /// Precomputed store path (kind = precomputed).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Remote service settings (kind = remote).
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Hash,
    Precomputed,
    Remote,
}

impl ProviderConfig {
    pub fn hash(dim: usize, seed: u64) -> Self {
        ProviderConfig {
            kind: ProviderKind::Hash,
            dim,
            seed,
            pooling: Pooling::Mean,
            share_encoder: true,
            path: None,
            remote: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig("provider dim must be >= 2".into()));
        }
        match self.kind {
            ProviderKind::Precomputed if self.path.is_none() => Err(Error::InvalidConfig(
                "precomputed provider requires `path`".into(),
            )),
            ProviderKind::Remote if self.remote.is_none() => Err(Error::InvalidConfig(
                "remote provider requires `remote` settings".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Builds the provider for instruction-aware queries.
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        self.build_with_seed(self.seed)
    }

    /// Builds the passage-side provider. With `share_encoder` unset, the hash
    /// provider gets a derived seed so the two towers are distinct functions.
    pub fn build_passage_side(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        if self.share_encoder {
            self.build()
        } else {
            self.build_with_seed(self.seed ^ 0x5041_5353)
        }
    }

    fn build_with_seed(&self, seed: u64) -> Result<Arc<dyn EmbeddingProvider>> {
        self.validate()?;
        match self.kind {
            ProviderKind::Hash => Ok(Arc::new(HashEmbedder::new(self.dim, seed))),
            ProviderKind::Precomputed => {
                let path = self.path.as_ref().expect("validated");
                Ok(Arc::new(PrecomputedStore::open(path)?))
            }
            ProviderKind::Remote => {
                let cfg = self.remote.clone().expect("validated");
                Ok(Arc::new(RemoteEmbedder::new(cfg, self.dim)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("What is APR?"), vec!["what", "is", "apr"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("rev-2-beta"), vec!["rev", "2", "beta"]);
        assert_eq!(tokenize("--- ?? ---"), Vec::<String>::new());
    }

    #[test]
    fn hash_embed_is_deterministic() {
        let a = hash_embed(&tokenize("same text"), 8, 42).unwrap();
        let b = hash_embed(&tokenize("same text"), 8, 42).unwrap();
        assert_eq!(a.rows(), b.rows());
    }

    // Reference fixture generated once from an independent implementation of
    // the documented mix function (FNV-1a-64 xor seed, splitmix64, 53-bit
    // mantissa mapped to (-1,1), L2-normalized) and frozen.
    #[test]
    fn hash_embed_reference_fixture() {
        let m = hash_embed(&["a".to_string()], 4, 0).unwrap();
        let expected = [
            -0.1743388383346325,
            0.67703062856843,
            0.6688541544464219,
            0.2527243904100463,
        ];
        for (got, want) in m.rows().row(0).iter().zip(expected) {
            assert_eq!(*got, want, "bit-exact fixture mismatch");
        }

        let m7 = hash_embed(&["a".to_string()], 4, 7).unwrap();
        let expected7 = [
            0.7255505103734313,
            -0.5445314410272567,
            0.3238292718092089,
            0.2686941929948436,
        ];
        for (got, want) in m7.rows().row(0).iter().zip(expected7) {
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn hash_rows_are_unit_norm() {
        let m = hash_embed(&tokenize("several words to embed here"), 16, 3).unwrap();
        for row in m.rows().rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hash_embed_rejects_empty() {
        assert!(hash_embed(&[], 4, 0).is_err());
        let p = HashEmbedder::new(4, 0);
        assert!(matches!(p.embed("?!"), Err(Error::EmptyText { .. })));
    }

    #[test]
    fn pool_single_row_both_modes() {
        let m = hash_embed(&["tok".to_string()], 6, 1).unwrap();
        let mean = pool(&m, Pooling::Mean).unwrap();
        let last = pool(&m, Pooling::Last).unwrap();
        assert_eq!(mean.as_array(), last.as_array());
    }

    #[test]
    fn pool_mean_two_rows_hand_value() {
        let rows = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let m = TokenMatrix::new(rows).unwrap();
        let v = pool(&m, Pooling::Mean).unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((v.as_array()[0] - inv_sqrt2).abs() < 1e-12);
        assert!((v.as_array()[1] - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn pool_last_takes_final_row() {
        let rows = ndarray::arr2(&[[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]]);
        let m = TokenMatrix::new(rows).unwrap();
        let v = pool(&m, Pooling::Last).unwrap();
        assert!((v.as_array()[0]).abs() < 1e-12);
        assert!((v.as_array()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_mean_degenerate_cancellation() {
        let rows = ndarray::arr2(&[[1.0, 0.0], [-1.0, 0.0]]);
        let m = TokenMatrix::new(rows).unwrap();
        assert!(matches!(
            pool(&m, Pooling::Mean),
            Err(Error::DegeneratePooling)
        ));
    }

    #[test]
    fn cosine_hand_values() {
        let a = PooledVector::new(ndarray::arr1(&[1.0, 1.0])).unwrap();
        let b = PooledVector::new(ndarray::arr1(&[1.0, 0.0])).unwrap();
        // (1,1)/sqrt(2) against (1,0).
        assert!((cosine_sim(&a, &b) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        assert!((cosine_sim(&a, &a) - 1.0).abs() < 1e-12);
        let c = PooledVector::new(ndarray::arr1(&[0.0, 1.0])).unwrap();
        assert!(cosine_sim(&b, &c).abs() < 1e-12);
    }

    #[test]
    fn embed_batch_preserves_order_and_duplicates() {
        let p = HashEmbedder::new(8, 0);
        let out = p.embed_batch(&["a", "a"]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].rows(), out[1].rows());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-z]{1,6}( [a-z]{1,6}){0,5}"
    }

    proptest! {
        #[test]
        fn hash_provider_pure_function(text in arb_text(), d in 2usize..12, seed in 0u64..50) {
            let a = hash_embed(&tokenize(&text), d, seed).unwrap();
            let b = hash_embed(&tokenize(&text), d, seed).unwrap();
            prop_assert_eq!(a.rows(), b.rows());
        }

        #[test]
        fn cosine_symmetric_and_self_unit(t1 in arb_text(), t2 in arb_text(), seed in 0u64..20) {
            let p = HashEmbedder::new(8, seed);
            let a = pool(&p.embed(&t1).unwrap(), Pooling::Mean);
            let b = pool(&p.embed(&t2).unwrap(), Pooling::Mean);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((cosine_sim(&a, &b) - cosine_sim(&b, &a)).abs() < 1e-15);
                prop_assert!((cosine_sim(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        // Ranking is invariant to a positive rescale of every token row.
        #[test]
        fn scale_invariance_of_cosine(t1 in arb_text(), t2 in arb_text(), scale in 0.1f64..10.0) {
            let p = HashEmbedder::new(8, 5);
            let m1 = p.embed(&t1).unwrap();
            let m2 = p.embed(&t2).unwrap();
            let s1 = TokenMatrix::new(m1.rows() * scale).unwrap();
            let s2 = TokenMatrix::new(m2.rows() * scale).unwrap();
            let base = cosine_sim(
                &pool(&m1, Pooling::Mean).unwrap(),
                &pool(&m2, Pooling::Mean).unwrap(),
            );
            let scaled = cosine_sim(
                &pool(&s1, Pooling::Mean).unwrap(),
                &pool(&s2, Pooling::Mean).unwrap(),
            );
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        // Mean pooling ignores row order; last pooling is checked against its
        // counterexample separately.
        #[test]
        fn mean_pool_permutation_invariant(text in "[a-z]{1,4}( [a-z]{1,4}){1,4}", seed in 0u64..20) {
            let p = HashEmbedder::new(8, seed);
            let m = p.embed(&text).unwrap();
            let mut rev = m.rows().clone();
            rev.invert_axis(ndarray::Axis(0));
            let rev = TokenMatrix::new(rev).unwrap();
            if let (Ok(a), Ok(b)) = (pool(&m, Pooling::Mean), pool(&rev, Pooling::Mean)) {
                let d = a.as_array() - b.as_array();
                prop_assert!(d.iter().all(|x| x.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn last_pool_not_permutation_invariant_counterexample() {
        let rows = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let m = TokenMatrix::new(rows.clone()).unwrap();
        let mut rev = rows;
        rev.invert_axis(ndarray::Axis(0));
        let rev = TokenMatrix::new(rev).unwrap();
        let a = pool(&m, Pooling::Last).unwrap();
        let b = pool(&rev, Pooling::Last).unwrap();
        assert_ne!(a.as_array(), b.as_array());
    }
}
