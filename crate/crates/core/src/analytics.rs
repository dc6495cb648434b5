//! Corpus-level diagnostics: average pairwise sample similarity, inter-sample
//! n-gram frequency, Cohen's kappa, train/eval overlap checking, and
//! embedding export for external projection tools.

use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::corpus::Corpus;
use crate::embedding::{pool, tokenize, EmbeddingProvider, Pooling, PooledVector};
use crate::error::{Error, Result};

/// Mean cosine similarity over all unordered pairs. Lower values indicate
/// fewer redundant samples.
pub fn aps(embeddings: &[PooledVector]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidInput(
            "aps needs at least 2 embeddings".into(),
        ));
    }
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += crate::embedding::cosine_sim(&embeddings[i], &embeddings[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Distinct token n-grams (n in `[n_low, n_high]`) across the corpus,
/// divided by the number of texts. Higher values indicate greater textual
/// diversity. This fixes a concrete definition for a statistic its source
/// only names; values are comparable within this toolkit only.
pub fn ingf(texts: &[String], n_low: usize, n_high: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidInput("ingf needs at least 1 text".into()));
    }
    if n_low < 1 || n_low > n_high {
        return Err(Error::InvalidConfig(
            "ingf requires 1 <= n_low <= n_high".into(),
        ));
    }
    let mut distinct: BTreeSet<Vec<String>> = BTreeSet::new();
    for text in texts {
        let tokens = tokenize(text);
        for n in n_low..=n_high {
            for window in tokens.windows(n) {
                distinct.insert(window.to_vec());
            }
        }
    }
    Ok(distinct.len() as f64 / texts.len() as f64)
}

/// Two label sequences of equal length over a shared label set.
#[derive(Debug, Clone)]
pub struct AgreementTable {
    rater_a: Vec<String>,
    rater_b: Vec<String>,
}

impl AgreementTable {
    pub fn new(rater_a: Vec<String>, rater_b: Vec<String>) -> Result<Self> {
        if rater_a.is_empty() || rater_a.len() != rater_b.len() {
            return Err(Error::InvalidInput(
                "agreement table needs equal-length non-empty label sequences".into(),
            ));
        }
        Ok(AgreementTable { rater_a, rater_b })
    }

    pub fn len(&self) -> usize {
        self.rater_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rater_a.is_empty()
    }
}

/// `kappa = (p_o - p_e) / (1 - p_e)` with chance agreement from the marginal
/// label frequencies. Perfect agreement with degenerate marginals is defined
/// as 1.
pub fn cohens_kappa(table: &AgreementTable) -> Result<f64> {
    let n = table.len() as f64;
    let observed = table
        .rater_a
        .iter()
        .zip(&table.rater_b)
        .filter(|(a, b)| a == b)
        .count() as f64
        / n;
    let mut freq_a: BTreeMap<&str, f64> = BTreeMap::new();
    let mut freq_b: BTreeMap<&str, f64> = BTreeMap::new();
    for label in &table.rater_a {
        *freq_a.entry(label).or_default() += 1.0 / n;
    }
    for label in &table.rater_b {
        *freq_b.entry(label).or_default() += 1.0 / n;
    }
    let chance: f64 = freq_a
        .iter()
        .map(|(label, pa)| pa * freq_b.get(label).copied().unwrap_or(0.0))
        .sum();
    if (1.0 - chance).abs() < 1e-12 {
        if (observed - 1.0).abs() < 1e-12 {
            return Ok(1.0);
        }
        return Err(Error::KappaUndefined);
    }
    Ok((observed - chance) / (1.0 - chance))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverlapMatch {
    pub train_id: String,
    pub eval_id: String,
}

fn normalize_for_overlap(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Casefold + whitespace-normalized exact-match intersection between two
/// id/text collections; an empty result means no contamination.
pub fn overlap_check(
    train_texts: &[(String, String)],
    eval_texts: &[(String, String)],
) -> Vec<OverlapMatch> {
    let mut eval_by_norm: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for (id, text) in eval_texts {
        eval_by_norm
            .entry(normalize_for_overlap(text))
            .or_default()
            .push(id);
    }
    let mut out = Vec::new();
    for (train_id, text) in train_texts {
        if let Some(eval_ids) = eval_by_norm.get(&normalize_for_overlap(text)) {
            for eval_id in eval_ids {
                out.push(OverlapMatch {
                    train_id: train_id.clone(),
                    eval_id: (*eval_id).to_string(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub aps: f64,
    pub ingf: f64,
    pub n_samples: usize,
    pub ngram_range: (usize, usize),
    /// Records the provider and the fixed statistic definitions used.
    pub note: String,
}

/// Samples are embedded as `instruction query passage` concatenations
/// pooled by the active provider.
pub fn corpus_sample_texts(corpus: &Corpus) -> Vec<String> {
    corpus
        .families()
        .iter()
        .map(|f| format!("{} {} {}", f.instruction_pos, f.query_pos, f.passage_pos))
        .collect()
}

pub fn diversity_report(
    corpus: &Corpus,
    provider: &Arc<dyn EmbeddingProvider>,
    pooling: Pooling,
    provider_desc: &str,
    ngram_range: (usize, usize),
) -> Result<DiversityReport> {
    let texts = corpus_sample_texts(corpus);
    let mut embeddings = Vec::with_capacity(texts.len());
    for t in &texts {
        embeddings.push(pool(&provider.embed(t)?, pooling)?);
    }
    Ok(DiversityReport {
        aps: aps(&embeddings)?,
        ingf: ingf(&texts, ngram_range.0, ngram_range.1)?,
        n_samples: texts.len(),
        ngram_range,
        note: format!(
            "aps: mean pairwise cosine of pooled instruction+query+passage embeddings ({provider_desc}); \
             ingf: distinct {}..{}-gram count per sample (toolkit-local definition)",
            ngram_range.0, ngram_range.1
        ),
    })
}

/// One exportable text with its role label.
#[derive(Debug, Clone)]
pub struct ExportItem {
    pub id: String,
    pub role: String,
    pub text: String,
}

/// Every text in the corpus with its role (`instruction_pos`, `query_neg`,
/// passage roles, ...), suitable for projection export.
pub fn corpus_export_items(corpus: &Corpus) -> Vec<ExportItem> {
    let mut out = Vec::new();
    for f in corpus.families() {
        let mut push = |role: &str, text: &str| {
            out.push(ExportItem {
                id: format!("{}#{}", f.id, role),
                role: role.to_string(),
                text: text.to_string(),
            })
        };
        push("instruction_pos", &f.instruction_pos);
        push("query_pos", &f.query_pos);
        push("passage_pos", &f.passage_pos);
        if let Some(t) = &f.instruction_neg {
            push("instruction_neg", t);
        }
        if let Some(t) = &f.query_neg {
            push("query_neg", t);
        }
        if let Some(t) = &f.passage_neg1 {
            push("passage_neg1", t);
        }
        if let Some(t) = &f.passage_neg2 {
            push("passage_neg2", t);
        }
    }
    out
}

fn sanitize_tsv(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Writes `embeddings.tsv` (full-precision vector rows) and `metadata.tsv`
/// (id, role, text) under `out_dir`; the pair is consumable by external
/// projection tools.
pub fn export_embeddings(
    items: &[ExportItem],
    provider: &Arc<dyn EmbeddingProvider>,
    pooling: Pooling,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vec_path = out_dir.join("embeddings.tsv");
    let meta_path = out_dir.join("metadata.tsv");
    let mut vectors = String::new();
    let mut metadata = String::from("id\trole\ttext\n");
    for item in items {
        let pooled = pool(&provider.embed(&item.text)?, pooling)?;
        let row: Vec<String> = pooled.as_array().iter().map(|v| format!("{v}")).collect();
        vectors.push_str(&row.join("\t"));
        vectors.push('\n');
        metadata.push_str(&format!(
            "{}\t{}\t{}\n",
            sanitize_tsv(&item.id),
            sanitize_tsv(&item.role),
            sanitize_tsv(&item.text)
        ));
    }
    std::fs::write(&vec_path, vectors).map_err(|e| Error::io(&vec_path, e))?;
    std::fs::write(&meta_path, metadata).map_err(|e| Error::io(&meta_path, e))?;
    Ok((vec_path, meta_path))
}
