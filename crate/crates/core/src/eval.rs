//! Retrieval evaluation: ranking a passage pool with the scoring model and
//! computing MAP, nDCG@k, and p-MRR over paired (original vs. changed
//! instruction) runs against a shared relevance-judgment set.
//!
//! Metric conventions: average precision uses binary relevance (grade > 0);
//! nDCG uses linear gain (the grade itself) with a log2(rank + 1) discount;
//! the paired score per query is `R_og / R_new - 1` when the first-relevant
//! rank improves (R_og > R_new) and `1 - R_new / R_og` otherwise, averaged
//! over queries. MAP and nDCG are reported on the original-instruction runs.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ScoringModel;

/// Graded relevance judgments: query id -> passage id -> grade >= 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, query_id: &str, passage_id: &str, grade: u32) {
        self.map
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> u32 {
        self.map
            .get(query_id)
            .and_then(|m| m.get(passage_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, passage_id: &str) -> bool {
        self.grade(query_id, passage_id) > 0
    }

    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.map.get(query_id)
    }

    pub fn has_relevant(&self, query_id: &str) -> bool {
        self.map
            .get(query_id)
            .is_some_and(|m| m.values().any(|g| *g > 0))
    }

    /// Loads a `query_id \t passage_id \t grade` file.
    pub fn load_tsv(path: &Path) -> Result<Qrels> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let path_str = path.display().to_string();
        let mut qrels = Qrels::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::DatasetSchema {
                    path: path_str,
                    line: idx + 1,
                    msg: format!("expected 3 tab-separated fields, got {}", parts.len()),
                });
            }
            let grade: u32 = parts[2].trim().parse().map_err(|e| Error::DatasetSchema {
                path: path_str.clone(),
                line: idx + 1,
                msg: format!("bad grade: {e}"),
            })?;
            qrels.insert(parts[0], parts[1], grade);
        }
        Ok(qrels)
    }
}

/// Ranked retrieval results: descending score, ties broken by ascending
/// passage id, no duplicate passages.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    pub query_id: String,
    ranking: Vec<(String, f64)>,
}

impl RankedRun {
    pub fn from_scores(query_id: &str, mut scored: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, _) in &scored {
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicatePassage {
                    query_id: query_id.to_string(),
                    passage_id: id.clone(),
                });
            }
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        Ok(RankedRun {
            query_id: query_id.to_string(),
            ranking: scored,
        })
    }

    pub fn ranking(&self) -> &[(String, f64)] {
        &self.ranking
    }

    /// 1-based rank of the highest-ranked relevant passage.
    pub fn first_relevant_rank(&self, qrels: &Qrels) -> Option<usize> {
        self.ranking
            .iter()
            .position(|(id, _)| qrels.is_relevant(&self.query_id, id))
            .map(|p| p + 1)
    }
}

/// A passage available for ranking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolEntry {
    pub passage_id: String,
    pub text: String,
}

/// Scores every pool passage for (instruction, query) and ranks them.
pub fn rank_passages(
    model: &ScoringModel,
    instruction: &str,
    query: &str,
    pool: &[PoolEntry],
) -> Result<RankedRun> {
    rank_passages_for(model, instruction, query, query, pool)
}

fn rank_passages_for(
    model: &ScoringModel,
    instruction: &str,
    query: &str,
    query_id: &str,
    pool: &[PoolEntry],
) -> Result<RankedRun> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("passage pool is empty".into()));
    }
    let (iq, _) = model.embed_iq(instruction, query)?;
    let mut scored = Vec::with_capacity(pool.len());
    for entry in pool {
        let (p, _) = model.embed_passage(&entry.text).map_err(|e| {
            Error::InvalidInput(format!(
                "scoring passage {} for query {}: {e}",
                entry.passage_id, query_id
            ))
        })?;
        scored.push((
            entry.passage_id.clone(),
            crate::embedding::cosine_sim(&p, &iq) / model.tau,
        ));
    }
    RankedRun::from_scores(query_id, scored)
}

/// AP over binary relevance; `None` when the query has no relevant passage
/// (such queries are excluded from MAP with a warning).
pub fn average_precision(run: &RankedRun, qrels: &Qrels) -> Option<f64> {
    let total_relevant = qrels
        .judged(&run.query_id)
        .map(|m| m.values().filter(|g| **g > 0).count())
        .unwrap_or(0);
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, (id, _)) in run.ranking.iter().enumerate() {
        if qrels.is_relevant(&run.query_id, id) {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Mean AP over queries with at least one relevant passage; the second value
/// counts excluded queries.
pub fn mean_average_precision(runs: &[RankedRun], qrels: &Qrels) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for run in runs {
        match average_precision(run, qrels) {
            Some(ap) => {
                total += ap;
                n += 1;
            }
            None => {
                tracing::warn!(query = %run.query_id, "query has no relevant passage; excluded from MAP");
                excluded += 1;
            }
        }
    }
    (if n > 0 { total / n as f64 } else { 0.0 }, excluded)
}

/// Linear-gain nDCG at cutoff `k`; 0 when no relevant passage is judged.
pub fn ndcg_at_k(run: &RankedRun, qrels: &Qrels, k: usize) -> f64 {
    assert!(k >= 1, "k must be >= 1");
    let dcg: f64 = run
        .ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank0, (id, _))| {
            f64::from(qrels.grade(&run.query_id, id)) / ((rank0 + 2) as f64).log2()
        })
        .sum();
    let mut grades: Vec<u32> = qrels
        .judged(&run.query_id)
        .map(|m| m.values().copied().filter(|g| *g > 0).collect())
        .unwrap_or_default();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank0, g)| f64::from(*g) / ((rank0 + 2) as f64).log2())
        .sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// The same query ranked under the original and the changed instruction.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub query_id: String,
    pub run_og: RankedRun,
    pub run_new: RankedRun,
}

/// Signed per-query paired score, clamped into [-1, 1]; `None` when neither
/// run ranks a relevant passage. A rank improvement of 2x or more saturates
/// at +1, a 2x regression at -1; clamping preserves exact antisymmetry under
/// swapping the two runs.
pub fn paired_query_score(pair: &PairedRun, qrels: &Qrels) -> Option<f64> {
    let r_og = pair.run_og.first_relevant_rank(qrels)?;
    let r_new = pair.run_new.first_relevant_rank(qrels)?;
    let (r_og, r_new) = (r_og as f64, r_new as f64);
    let raw = if r_og > r_new {
        r_og / r_new - 1.0
    } else {
        1.0 - r_new / r_og
    };
    Some(raw.clamp(-1.0, 1.0))
}

/// Mean paired score over queries; the second value counts excluded pairs.
pub fn p_mrr(pairs: &[PairedRun], qrels: &Qrels) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for pair in pairs {
        match paired_query_score(pair, qrels) {
            Some(s) => {
                total += s;
                n += 1;
            }
            None => {
                tracing::warn!(query = %pair.query_id, "pair has no relevant passage; excluded from p-MRR");
                excluded += 1;
            }
        }
    }
    (if n > 0 { total / n as f64 } else { 0.0 }, excluded)
}

/// One line of `queries.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub query: String,
    pub instruction_og: String,
    pub instruction_new: String,
}

/// An evaluation dataset directory: `queries.jsonl`, `pool.jsonl`, and
/// `qrels.tsv`.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub queries: Vec<QueryRecord>,
    pub pool: Vec<PoolEntry>,
    pub qrels: Qrels,
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::DatasetSchema {
            path: path_str.clone(),
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

impl EvalDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let queries: Vec<QueryRecord> = load_jsonl(&dir.join("queries.jsonl"))?;
        let pool: Vec<PoolEntry> = load_jsonl(&dir.join("pool.jsonl"))?;
        let qrels = Qrels::load_tsv(&dir.join("qrels.tsv"))?;
        if queries.is_empty() || pool.is_empty() {
            return Err(Error::EmptyDataset(dir.display().to_string()));
        }
        Ok(EvalDataset {
            queries,
            pool,
            qrels,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut q = String::new();
        for record in &self.queries {
            q.push_str(&serde_json::to_string(record)?);
            q.push('\n');
        }
        std::fs::write(dir.join("queries.jsonl"), q)
            .map_err(|e| Error::io(dir.join("queries.jsonl"), e))?;
        let mut p = String::new();
        for entry in &self.pool {
            p.push_str(&serde_json::to_string(entry)?);
            p.push('\n');
        }
        std::fs::write(dir.join("pool.jsonl"), p)
            .map_err(|e| Error::io(dir.join("pool.jsonl"), e))?;
        let mut t = String::new();
        for (qid, judged) in &self.qrels.map {
            for (pid, grade) in judged {
                t.push_str(&format!("{qid}\t{pid}\t{grade}\n"));
            }
        }
        std::fs::write(dir.join("qrels.tsv"), t)
            .map_err(|e| Error::io(dir.join("qrels.tsv"), e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// nDCG cutoffs to report.
    pub ndcg_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ndcg_ks: vec![5, 10] }
    }
}

/// Metric report; serialized as `report.json` with deterministic key order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub map: f64,
    pub ndcg: BTreeMap<String, f64>,
    pub p_mrr: f64,
    pub n_queries: usize,
    pub excluded_from_map: usize,
    pub excluded_from_p_mrr: usize,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
}

impl MetricReport {
    /// Aligned-columns text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("MAP".into(), format!("{:.4}", self.map))];
        for (name, value) in &self.ndcg {
            rows.push((name.clone(), format!("{value:.4}")));
        }
        rows.push(("p-MRR".into(), format!("{:+.4}", self.p_mrr)));
        rows.push(("queries".into(), self.n_queries.to_string()));
        rows.push((
            "excluded (MAP)".into(),
            self.excluded_from_map.to_string(),
        ));
        rows.push((
            "excluded (p-MRR)".into(),
            self.excluded_from_p_mrr.to_string(),
        ));
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<width$}  {value}\n"));
        }
        out.push_str(&format!("model   {}\n", self.model_fingerprint));
        out.push_str(&format!("config  {}\n", self.config_fingerprint));
        out
    }
}

/// Ranks every query under both instructions and assembles the metric
/// report. MAP and nDCG are computed on the original-instruction runs;
/// p-MRR compares the two runs pairwise.
pub fn evaluate_suite(
    model: &ScoringModel,
    dataset: &EvalDataset,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let mut runs_og = Vec::with_capacity(dataset.queries.len());
    let mut pairs = Vec::with_capacity(dataset.queries.len());
    for q in &dataset.queries {
        let run_og = rank_passages_for(model, &q.instruction_og, &q.query, &q.query_id, &dataset.pool)?;
        let run_new =
            rank_passages_for(model, &q.instruction_new, &q.query, &q.query_id, &dataset.pool)?;
        pairs.push(PairedRun {
            query_id: q.query_id.clone(),
            run_og: run_og.clone(),
            run_new,
        });
        runs_og.push(run_og);
    }
    let (map, excluded_from_map) = mean_average_precision(&runs_og, &dataset.qrels);
    let (pmrr, excluded_from_p_mrr) = p_mrr(&pairs, &dataset.qrels);
    let mut ndcg = BTreeMap::new();
    for &k in &cfg.ndcg_ks {
        let mean = runs_og
            .iter()
            .map(|r| ndcg_at_k(r, &dataset.qrels, k))
            .sum::<f64>()
            / runs_og.len() as f64;
        ndcg.insert(format!("ndcg@{k}"), mean);
    }
    let config_fingerprint = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(cfg)?);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    };
    Ok(MetricReport {
        map,
        ndcg,
        p_mrr: pmrr,
        n_queries: dataset.queries.len(),
        excluded_from_map,
        excluded_from_p_mrr,
        model_fingerprint: model.fingerprint(),
        config_fingerprint,
    })
}

/// Writes `report.json` and `report.txt` into `out_dir`.
pub fn write_report(report: &MetricReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let txt_path = out_dir.join("report.txt");
    std::fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(())
}
