//! The scoring model: a passage encoder, an instruction-query encoder, fusion
//! parameters, and a temperature. Scores are cosine similarities between the
//! pooled passage embedding and the instruction-aware query embedding,
//! divided by the temperature.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::embedding::{EmbeddingProvider, Pooling, PooledVector, ProviderConfig, TokenMatrix};
use crate::error::{Error, Result};
use crate::fusion::{
    concat_iq, cross_attention_forward, normalize_proj_backward, FusionCache, FusionParams,
};

/// Instruction-query interaction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    #[default]
    Concat,
    CrossAttention,
}

impl std::str::FromStr for Interaction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "concat" => Ok(Interaction::Concat),
            "cross_attention" => Ok(Interaction::CrossAttention),
            other => Err(Error::InvalidConfig(format!(
                "unknown interaction `{other}` (expected concat|cross_attention)"
            ))),
        }
    }
}

impl std::fmt::Display for Interaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Interaction::Concat => write!(f, "concat"),
            Interaction::CrossAttention => write!(f, "cross_attention"),
        }
    }
}

/// Intermediates for the passage side: `raw` pooled vector, projected and
/// normalized output.
#[derive(Debug, Clone)]
pub struct PassageCache {
    pub(crate) raw: Array1<f64>,
    pub(crate) out: Array1<f64>,
    pub(crate) z_norm: f64,
}

/// Intermediates for one instruction-aware query embedding.
#[derive(Debug, Clone)]
pub enum IqCache {
    Cross(Box<FusionCache>),
    Concat {
        raw: Array1<f64>,
        out: Array1<f64>,
        z_norm: f64,
    },
}

pub struct ScoringModel {
    pub params: FusionParams,
    pub interaction: Interaction,
    pub pooling: Pooling,
    pub tau: f64,
    passage_provider: Arc<dyn EmbeddingProvider>,
    iq_provider: Arc<dyn EmbeddingProvider>,
    provider_desc: String,
}

fn pool_raw(m: &TokenMatrix, mode: Pooling) -> Array1<f64> {
    match mode {
        Pooling::Mean => m.rows().mean_axis(ndarray::Axis(0)).expect("n >= 1"),
        Pooling::Last => m.rows().row(m.token_count() - 1).to_owned(),
    }
}

impl ScoringModel {
    pub fn new(
        params: FusionParams,
        interaction: Interaction,
        pooling: Pooling,
        tau: f64,
        passage_provider: Arc<dyn EmbeddingProvider>,
        iq_provider: Arc<dyn EmbeddingProvider>,
        provider_desc: impl Into<String>,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if passage_provider.dim() != params.dim() || iq_provider.dim() != params.dim() {
            return Err(Error::DimMismatch {
                expected: params.dim(),
                got: passage_provider.dim(),
                context: "scoring model providers".into(),
            });
        }
        Ok(ScoringModel {
            params,
            interaction,
            pooling,
            tau,
            passage_provider,
            iq_provider,
            provider_desc: provider_desc.into(),
        })
    }

    pub fn from_provider_config(
        params: FusionParams,
        interaction: Interaction,
        tau: f64,
        cfg: &ProviderConfig,
    ) -> Result<Self> {
        let iq = cfg.build()?;
        let passage = cfg.build_passage_side()?;
        let desc = format!(
            "{:?}/d{}/seed{}/share{}",
            cfg.kind, cfg.dim, cfg.seed, cfg.share_encoder
        );
        ScoringModel::new(params, interaction, cfg.pooling, tau, passage, iq, desc)
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn provider_desc(&self) -> &str {
        &self.provider_desc
    }

    pub fn iq_provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.iq_provider
    }

    pub fn passage_provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.passage_provider
    }

    /// Pool, apply the optional passage projection head, normalize.
    pub fn embed_passage(&self, text: &str) -> Result<(PooledVector, PassageCache)> {
        let tokens = self.passage_provider.embed(text)?;
        let raw = pool_raw(&tokens, self.pooling);
        let z = match &self.params.proj_p {
            Some(p) => raw.dot(p),
            None => raw.clone(),
        };
        let pooled = PooledVector::new(z)?;
        let cache = PassageCache {
            raw,
            out: pooled.as_array().clone(),
            z_norm: pooled.original_norm(),
        };
        Ok((pooled, cache))
    }

    /// Instruction-aware query embedding for (instruction j, query k) under
    /// the configured interaction.
    pub fn embed_iq(&self, instruction: &str, query: &str) -> Result<(PooledVector, IqCache)> {
        match self.interaction {
            Interaction::Concat => {
                let text = concat_iq(instruction, query)?;
                let tokens = self.iq_provider.embed(&text)?;
                let raw = pool_raw(&tokens, self.pooling);
                let z = match &self.params.proj_iq {
                    Some(p) => raw.dot(p),
                    None => raw.clone(),
                };
                let pooled = PooledVector::new(z)?;
                let cache = IqCache::Concat {
                    raw,
                    out: pooled.as_array().clone(),
                    z_norm: pooled.original_norm(),
                };
                Ok((pooled, cache))
            }
            Interaction::CrossAttention => {
                let e_i = self.iq_provider.embed(instruction)?;
                let e_q = self.iq_provider.embed(query)?;
                let (pooled, cache) = cross_attention_forward(&e_i, &e_q, &self.params)?;
                Ok((pooled, IqCache::Cross(Box::new(cache))))
            }
        }
    }

    /// `cos(p, iq) / tau`.
    pub fn score(&self, instruction: &str, query: &str, passage: &str) -> Result<f64> {
        let (p, _) = self.embed_passage(passage)?;
        let (iq, _) = self.embed_iq(instruction, query)?;
        Ok(crate::embedding::cosine_sim(&p, &iq) / self.tau)
    }

    /// Backward through the passage path; returns the proj_p gradient, if the
    /// head exists.
    pub(crate) fn passage_backward(
        &self,
        cache: &PassageCache,
        upstream: &Array1<f64>,
    ) -> Option<ndarray::Array2<f64>> {
        let (_, d_proj) = normalize_proj_backward(
            &cache.raw,
            self.params.proj_p.as_ref(),
            &cache.out,
            cache.z_norm,
            upstream,
        );
        d_proj
    }

    /// Deterministic fingerprint over configuration and parameter bytes.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.interaction.to_string().as_bytes());
        h.update(self.pooling.to_string().as_bytes());
        h.update(self.tau.to_le_bytes());
        h.update(self.provider_desc.as_bytes());
        for (name, m) in self.params.blocks() {
            h.update(name.as_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
