//! The three-stage synthesis pipeline with bounded parallelism and an
//! on-disk progress journal keyed by family id.
//!
//! Layout of the output directory:
//!
//! - `corpus.partial.jsonl`: append-only progress store; one line per family
//!   that completed the gate (retained or not). Resume skips these ids.
//! - `rejects.jsonl`: families deterministically rejected before the gate
//!   (parse failure, empty after filtering, no-op poison), with stage and
//!   reason; rewritten sorted at the end of a run.
//! - `journal.jsonl`: append-only `{family_id, stage, status, timestamp}`
//!   audit log. Entry order depends on scheduling; everything else is
//!   canonical.
//! - `corpus.jsonl`: final corpus, sorted by family id. Gate-failed
//!   families are kept with `verdict.retained = false`.
//! - `report.json`: stage counters.
//!
//! Per-family failures never abort the run. Transport errors are journaled
//! but not written to the rejects file, so a resumed run retries them.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::client::ChatClient;
use super::{generate_instruction, poison_family, quality_check, Distractor};
use crate::corpus::{
    family_to_json, parse_family_line, save_corpus, validate_family, Corpus, TripletFamily,
};
use crate::embedding::fnv1a64;
use crate::error::{Error, Result};

pub const STAGE_INSTRUCTION: &str = "instruction";
pub const STAGE_POISON: &str = "poison";
pub const STAGE_GATE: &str = "quality_check";

/// One seed `<query, passage>` pair; the pipeline is source-agnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedPair {
    pub id: String,
    pub query: String,
    pub passage: String,
}

/// Loads `.jsonl` seed pairs; ids must be unique, texts non-empty.
pub fn load_seed_pairs(path: &Path) -> Result<Vec<SeedPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SeedPair = serde_json::from_str(&line).map_err(|e| Error::DatasetSchema {
            path: path_str.clone(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if pair.query.trim().is_empty() || pair.passage.trim().is_empty() {
            return Err(Error::DatasetSchema {
                path: path_str,
                line: idx + 1,
                msg: "seed pair query and passage must be non-empty".into(),
            });
        }
        if !seen.insert(pair.id.clone()) {
            return Err(Error::DuplicateId {
                path: path_str,
                line: idx + 1,
                id: pair.id,
            });
        }
        out.push(pair);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Distractors presented per judge scenario (one shared draw per family).
    #[serde(default = "default_k")]
    pub k_distractors: usize,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// Seed dataset name recorded on every family.
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_k() -> usize {
    3
}
fn default_parallel() -> usize {
    1
}
fn default_source() -> String {
    "seed".into()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct PipelineReport {
    pub n_seeds: usize,
    /// Families skipped because a previous run already finished them.
    pub resumed: usize,
    /// Families that reached and completed the quality gate.
    pub completed: usize,
    pub retained: usize,
    pub gate_failed: usize,
    pub rejected_by_stage: BTreeMap<String, usize>,
    /// Transport or provider errors; retried on resume.
    pub transport_failures: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RejectRecord {
    family_id: String,
    stage: String,
    reason: String,
}

#[derive(Serialize)]
struct JournalRecord<'a> {
    family_id: &'a str,
    stage: &'a str,
    status: &'a str,
    timestamp: u64,
}

struct LineSink {
    file: Mutex<File>,
}

impl LineSink {
    fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LineSink {
            file: Mutex::new(file),
        })
    }

    fn write_line(&self, line: &str) -> Result<()> {
        let mut f = self.file.lock().expect("sink poisoned");
        f.write_all(line.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io("line sink", e))
    }
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

enum Outcome {
    Completed(Box<TripletFamily>),
    Rejected(RejectRecord),
    TransportError,
}

fn process_family(
    seed: &SeedPair,
    all_seeds: &[SeedPair],
    gen_client: &dyn ChatClient,
    judge_client: &dyn ChatClient,
    cfg: &PipelineConfig,
    journal: &LineSink,
) -> Result<Outcome> {
    let log = |stage: &str, status: &str| -> Result<()> {
        journal.write_line(&serde_json::to_string(&JournalRecord {
            family_id: &seed.id,
            stage,
            status,
            timestamp: now_secs(),
        })?)
    };
    let reject = |stage: &str, reason: String| -> Outcome {
        Outcome::Rejected(RejectRecord {
            family_id: seed.id.clone(),
            stage: stage.into(),
            reason,
        })
    };

    let instruction_pos = match generate_instruction(seed, gen_client) {
        Ok(i) => {
            log(STAGE_INSTRUCTION, "ok")?;
            i
        }
        Err(e @ Error::ChatTransport { .. }) => {
            tracing::warn!(family = %seed.id, error = %e, "transport failure");
            log(STAGE_INSTRUCTION, "error")?;
            return Ok(Outcome::TransportError);
        }
        Err(e) => {
            log(STAGE_INSTRUCTION, "rejected")?;
            return Ok(reject(STAGE_INSTRUCTION, e.to_string()));
        }
    };

    let fields = match poison_family(&seed.id, &instruction_pos, &seed.query, &seed.passage, gen_client)
    {
        Ok(f) => {
            log(STAGE_POISON, "ok")?;
            f
        }
        Err(e @ Error::ChatTransport { .. }) => {
            tracing::warn!(family = %seed.id, error = %e, "transport failure");
            log(STAGE_POISON, "error")?;
            return Ok(Outcome::TransportError);
        }
        Err(e) => {
            log(STAGE_POISON, "rejected")?;
            return Ok(reject(STAGE_POISON, e.to_string()));
        }
    };

    let mut family = TripletFamily {
        id: seed.id.clone(),
        instruction_pos,
        query_pos: seed.query.clone(),
        passage_pos: seed.passage.clone(),
        instruction_neg: Some(fields.instruction_neg),
        query_neg: Some(fields.query_neg),
        passage_neg1: Some(fields.passage_neg1),
        passage_neg2: Some(fields.passage_neg2),
        source: cfg.source.clone(),
        verdict: None,
    };

    // One shared distractor draw per family, seeded from the family id.
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(seed.id.as_bytes()) ^ 0x00d1_57ac);
    let pool: Vec<&SeedPair> = all_seeds.iter().filter(|s| s.id != seed.id).collect();
    let k = cfg.k_distractors.min(pool.len());
    let distractors: Vec<Distractor> = sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| Distractor {
            passage_id: pool[i].id.clone(),
            text: pool[i].passage.clone(),
        })
        .collect();

    match quality_check(&family, judge_client, &distractors) {
        Ok(verdict) => {
            log(STAGE_GATE, if verdict.retained { "ok" } else { "failed" })?;
            family.verdict = Some(verdict);
            if family.is_retained() {
                debug_assert!(validate_family(&family).is_empty());
            }
            Ok(Outcome::Completed(Box::new(family)))
        }
        Err(e @ Error::ChatTransport { .. }) => {
            tracing::warn!(family = %seed.id, error = %e, "transport failure");
            log(STAGE_GATE, "error")?;
            Ok(Outcome::TransportError)
        }
        Err(e) => {
            log(STAGE_GATE, "rejected")?;
            Ok(reject(STAGE_GATE, e.to_string()))
        }
    }
}

fn load_partial(path: &Path) -> Result<BTreeMap<String, TripletFamily>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let path_str = path.display().to_string();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let family = parse_family_line(&line, &path_str, idx + 1)?;
        out.insert(family.id.clone(), family);
    }
    Ok(out)
}

fn load_rejects(path: &Path) -> Result<Vec<RejectRecord>> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Runs generate -> poison -> quality gate for every seed pair with bounded
/// parallelism, resumable via the progress store. Returns the corpus
/// (retained plus gate-failed families, sorted by id) and the stage report.
pub fn run_pipeline(
    seeds: &[SeedPair],
    gen_client: &dyn ChatClient,
    judge_client: &dyn ChatClient,
    cfg: &PipelineConfig,
) -> Result<(Corpus, PipelineReport)> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let partial_path = cfg.out_dir.join("corpus.partial.jsonl");
    let rejects_path = cfg.out_dir.join("rejects.jsonl");
    let journal_path = cfg.out_dir.join("journal.jsonl");
    let corpus_path = cfg.out_dir.join("corpus.jsonl");
    let report_path = cfg.out_dir.join("report.json");

    let done = load_partial(&partial_path)?;
    let mut prior_rejects = load_rejects(&rejects_path)?;
    let rejected_ids: BTreeSet<String> =
        prior_rejects.iter().map(|r| r.family_id.clone()).collect();

    let pending: Vec<&SeedPair> = seeds
        .iter()
        .filter(|s| !done.contains_key(&s.id) && !rejected_ids.contains(&s.id))
        .collect();
    let resumed = seeds.len() - pending.len();

    let journal = LineSink::append(&journal_path)?;
    let partial_sink = LineSink::append(&partial_path)?;

    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Outcome>> = Mutex::new(Vec::with_capacity(pending.len()));
    let first_io_error: Mutex<Option<Error>> = Mutex::new(None);

    let workers = cfg.max_parallel.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= pending.len() {
                    break;
                }
                let seed = pending[idx];
                match process_family(seed, seeds, gen_client, judge_client, cfg, &journal) {
                    Ok(outcome) => {
                        if let Outcome::Completed(family) = &outcome {
                            match family_to_json(family) {
                                Ok(line) => {
                                    if let Err(e) = partial_sink.write_line(&line) {
                                        first_io_error.lock().unwrap().get_or_insert(e);
                                        break;
                                    }
                                }
                                Err(e) => {
                                    first_io_error.lock().unwrap().get_or_insert(e);
                                    break;
                                }
                            }
                        }
                        outcomes.lock().unwrap().push(outcome);
                    }
                    Err(e) => {
                        first_io_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_io_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut families: BTreeMap<String, TripletFamily> = done;
    let mut report = PipelineReport {
        n_seeds: seeds.len(),
        resumed,
        ..Default::default()
    };
    for outcome in outcomes.into_inner().unwrap() {
        match outcome {
            Outcome::Completed(f) => {
                families.insert(f.id.clone(), *f);
            }
            Outcome::Rejected(r) => prior_rejects.push(r),
            Outcome::TransportError => report.transport_failures += 1,
        }
    }

    report.completed = families.len();
    for f in families.values() {
        if f.is_retained() {
            report.retained += 1;
        } else {
            report.gate_failed += 1;
        }
    }
    for r in &prior_rejects {
        *report.rejected_by_stage.entry(r.stage.clone()).or_default() += 1;
    }

    // Canonical outputs: sorted by family id regardless of completion order.
    let corpus = Corpus::new(families.into_values().collect());
    save_corpus(&corpus_path, &corpus)?;
    prior_rejects.sort_by(|a, b| a.family_id.cmp(&b.family_id));
    let mut rf = File::create(&rejects_path).map_err(|e| Error::io(&rejects_path, e))?;
    for r in &prior_rejects {
        rf.write_all(serde_json::to_string(r)?.as_bytes())
            .and_then(|_| rf.write_all(b"\n"))
            .map_err(|e| Error::io(&rejects_path, e))?;
    }
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )
    .map_err(|e| Error::io(&report_path, e))?;

    Ok((corpus, report))
}
