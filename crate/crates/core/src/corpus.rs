//! Triplet-family data model, line-delimited serialization, validation,
//! statistics, and flattening into training tuples.
//!
//! A family holds one positive triplet (instruction, query, passage) plus the
//! poisoned negatives: `instruction_neg` / `query_neg` and the two negative
//! passages `passage_neg1` (paired with the poisoned instruction and the
//! original query) and `passage_neg2` (paired with the original instruction
//! and the poisoned query).
//!
//! On disk, a corpus is one JSON object per line, UTF-8, with keys in a fixed
//! order (`schema`, `id`, `instruction_pos`, `query_pos`, `passage_pos`,
//! `instruction_neg`, `query_neg`, `passage_neg1`, `passage_neg2`, `source`,
//! `verdict`); absent optional fields are omitted. Every line carries
//! `"schema": "inf-ir/1"`. Families rejected by the quality gate are kept on
//! disk with `verdict.retained = false` for auditability rather than deleted.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::embedding::tokenize;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "inf-ir/1";

/// Outcome of one judge scenario: the passage the judge chose (if its answer
/// could be parsed) and whether it matched the designated relevant passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioResult {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chosen: Option<String>,
    pub matched: bool,
}

/// Judge-based quality gate outcome; retained iff all three scenarios
/// matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub scenario_results: Vec<ScenarioResult>,
    pub retained: bool,
    pub judge_model: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletFamily {
    pub id: String,
    pub instruction_pos: String,
    pub query_pos: String,
    pub passage_pos: String,
    pub instruction_neg: Option<String>,
    pub query_neg: Option<String>,
    pub passage_neg1: Option<String>,
    pub passage_neg2: Option<String>,
    pub source: String,
    pub verdict: Option<JudgeVerdict>,
}

impl TripletFamily {
    pub fn has_all_negatives(&self) -> bool {
        self.instruction_neg.is_some()
            && self.query_neg.is_some()
            && self.passage_neg1.is_some()
            && self.passage_neg2.is_some()
    }

    pub fn is_retained(&self) -> bool {
        self.verdict.as_ref().is_some_and(|v| v.retained)
    }
}

/// Wire format; field order here is the canonical key order on disk.
#[derive(Serialize, Deserialize)]
struct FamilyLine {
    schema: String,
    id: String,
    instruction_pos: String,
    query_pos: String,
    passage_pos: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    instruction_neg: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    query_neg: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    passage_neg1: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    passage_neg2: Option<String>,
    source: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    verdict: Option<JudgeVerdict>,
}

impl From<TripletFamily> for FamilyLine {
    fn from(f: TripletFamily) -> Self {
        FamilyLine {
            schema: SCHEMA_VERSION.to_string(),
            id: f.id,
            instruction_pos: f.instruction_pos,
            query_pos: f.query_pos,
            passage_pos: f.passage_pos,
            instruction_neg: f.instruction_neg,
            query_neg: f.query_neg,
            passage_neg1: f.passage_neg1,
            passage_neg2: f.passage_neg2,
            source: f.source,
            verdict: f.verdict,
        }
    }
}

impl From<FamilyLine> for TripletFamily {
    fn from(l: FamilyLine) -> Self {
        TripletFamily {
            id: l.id,
            instruction_pos: l.instruction_pos,
            query_pos: l.query_pos,
            passage_pos: l.passage_pos,
            instruction_neg: l.instruction_neg,
            query_neg: l.query_neg,
            passage_neg1: l.passage_neg1,
            passage_neg2: l.passage_neg2,
            source: l.source,
            verdict: l.verdict,
        }
    }
}

/// Immutable after load; safe to share across threads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    families: Vec<TripletFamily>,
}

impl Corpus {
    pub fn new(families: Vec<TripletFamily>) -> Self {
        Corpus { families }
    }

    pub fn families(&self) -> &[TripletFamily] {
        &self.families
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }
}

/// Best-effort extraction of a field name from a serde message like
/// "missing field `verdict`".
fn field_from_serde_msg(msg: &str) -> String {
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "record".to_string()
}

pub fn parse_family_line(line: &str, path: &str, line_no: usize) -> Result<TripletFamily> {
    let parsed: FamilyLine =
        serde_json::from_str(line).map_err(|e| Error::CorpusParse {
            path: path.to_string(),
            line: line_no,
            field: field_from_serde_msg(&e.to_string()),
            msg: e.to_string(),
        })?;
    if parsed.schema != SCHEMA_VERSION {
        return Err(Error::CorpusParse {
            path: path.to_string(),
            line: line_no,
            field: "schema".into(),
            msg: format!("expected \"{SCHEMA_VERSION}\", got \"{}\"", parsed.schema),
        });
    }
    Ok(parsed.into())
}

/// Parses a line-delimited corpus file; ids must be unique.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let path_str = path.display().to_string();
    let mut families = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let family = parse_family_line(&line, &path_str, idx + 1)?;
        if !seen.insert(family.id.clone()) {
            return Err(Error::DuplicateId {
                path: path_str,
                line: idx + 1,
                id: family.id,
            });
        }
        families.push(family);
    }
    Ok(Corpus::new(families))
}

pub fn family_to_json(f: &TripletFamily) -> Result<String> {
    Ok(serde_json::to_string(&FamilyLine::from(f.clone()))?)
}

/// Writes the canonical line-delimited form, one family per line in corpus
/// order.
pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for family in corpus.families() {
        f.write_all(family_to_json(family)?.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One broken invariant: the offending field and the rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

/// Checks the family invariants; an empty list means the family is valid.
/// Violations are data, not errors.
///
/// The newline rule covers the fields this pipeline synthesizes as single
/// lines (`instruction_pos`, `instruction_neg`, `query_neg`); seed-derived
/// fields and passages are exempt.
pub fn validate_family(f: &TripletFamily) -> Vec<Violation> {
    let mut out = Vec::new();
    for (name, value) in [
        ("instruction_pos", &f.instruction_pos),
        ("query_pos", &f.query_pos),
        ("passage_pos", &f.passage_pos),
    ] {
        if value.trim().is_empty() {
            out.push(Violation {
                field: name.into(),
                rule: "must be non-empty after whitespace trimming".into(),
            });
        }
    }
    if f.is_retained() {
        for (name, value) in [
            ("instruction_neg", &f.instruction_neg),
            ("query_neg", &f.query_neg),
            ("passage_neg1", &f.passage_neg1),
            ("passage_neg2", &f.passage_neg2),
        ] {
            if value.is_none() {
                out.push(Violation {
                    field: name.into(),
                    rule: "must be present when verdict.retained is true".into(),
                });
            }
        }
    }
    let mut newline_check = |name: &str, value: &str| {
        if value.contains('\n') {
            out.push(Violation {
                field: name.into(),
                rule: "synthetic field must not contain a newline after rule filtering".into(),
            });
        }
    };
    newline_check("instruction_pos", &f.instruction_pos);
    if let Some(v) = &f.instruction_neg {
        newline_check("instruction_neg", v);
    }
    if let Some(v) = &f.query_neg {
        newline_check("query_neg", v);
    }
    out
}

/// Counts of distinct texts per role (positives plus negatives) and mean
/// token counts under the toolkit tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_instructions: usize,
    pub n_queries: usize,
    pub n_passages: usize,
    pub avg_len_i: f64,
    pub avg_len_q: f64,
    pub avg_len_p: f64,
    pub n_positive_samples: usize,
    pub n_negative_samples: usize,
}

fn mean_token_count(texts: &BTreeSet<&str>) -> f64 {
    if texts.is_empty() {
        return 0.0;
    }
    texts.iter().map(|t| tokenize(t).len()).sum::<usize>() as f64 / texts.len() as f64
}

pub fn corpus_stats(c: &Corpus) -> CorpusStats {
    let mut instructions = BTreeSet::new();
    let mut queries = BTreeSet::new();
    let mut passages = BTreeSet::new();
    let mut negatives = 0usize;
    for f in c.families() {
        instructions.insert(f.instruction_pos.as_str());
        queries.insert(f.query_pos.as_str());
        passages.insert(f.passage_pos.as_str());
        if let Some(v) = &f.instruction_neg {
            instructions.insert(v);
        }
        if let Some(v) = &f.query_neg {
            queries.insert(v);
        }
        if let Some(v) = &f.passage_neg1 {
            passages.insert(v);
        }
        if let Some(v) = &f.passage_neg2 {
            passages.insert(v);
        }
        if f.instruction_neg.is_some() && f.passage_neg1.is_some() {
            negatives += 1;
        }
        if f.query_neg.is_some() && f.passage_neg2.is_some() {
            negatives += 1;
        }
    }
    CorpusStats {
        n_instructions: instructions.len(),
        n_queries: queries.len(),
        n_passages: passages.len(),
        avg_len_i: mean_token_count(&instructions),
        avg_len_q: mean_token_count(&queries),
        avg_len_p: mean_token_count(&passages),
        n_positive_samples: c.len(),
        n_negative_samples: negatives,
    }
}

/// Index triple into the flattened text tables. The positive tuple of family
/// ordinal `f` is `(f, f, f)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTuple {
    pub passage_idx: usize,
    pub instruction_idx: usize,
    pub query_idx: usize,
    pub is_positive: bool,
}

/// Text tables plus one positive tuple per family. Families are ordered by
/// id; table layout is positives first (index = family ordinal), negatives
/// appended after, so minibatch sampling can draw them as marginal negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlattenedCorpus {
    pub tuples: Vec<TrainTuple>,
    pub passages: Vec<String>,
    pub instructions: Vec<String>,
    pub queries: Vec<String>,
    pub family_ids: Vec<String>,
    pub skipped_missing_negatives: usize,
    pub skipped_not_retained: usize,
}

impl FlattenedCorpus {
    pub fn n_families(&self) -> usize {
        self.family_ids.len()
    }

    /// The two coherent poisoned rows of a family: (passage_neg1 with
    /// instruction_neg and the original query) and (passage_neg2 with the
    /// original instruction and query_neg).
    pub fn hard_negative_tuples(&self, family: usize) -> [TrainTuple; 2] {
        let n = self.n_families();
        [
            TrainTuple {
                passage_idx: n + 2 * family,
                instruction_idx: n + family,
                query_idx: family,
                is_positive: false,
            },
            TrainTuple {
                passage_idx: n + 2 * family + 1,
                instruction_idx: family,
                query_idx: n + family,
                is_positive: false,
            },
        ]
    }
}

/// Flattens retained families into training tuples and text tables,
/// deterministically ordered by family id. Families with missing negatives
/// or a negative gate verdict are skipped with warning counters.
pub fn flatten_training_tuples(c: &Corpus) -> FlattenedCorpus {
    let mut families: Vec<&TripletFamily> = Vec::new();
    let mut skipped_missing = 0usize;
    let mut skipped_not_retained = 0usize;
    for f in c.families() {
        if f.verdict.as_ref().is_some_and(|v| !v.retained) {
            skipped_not_retained += 1;
            continue;
        }
        if !f.has_all_negatives() {
            skipped_missing += 1;
            continue;
        }
        families.push(f);
    }
    if skipped_missing > 0 || skipped_not_retained > 0 {
        tracing::warn!(
            skipped_missing_negatives = skipped_missing,
            skipped_not_retained,
            "flatten skipped families"
        );
    }
    families.sort_by(|a, b| a.id.cmp(&b.id));
    let n = families.len();
    let mut out = FlattenedCorpus {
        tuples: Vec::with_capacity(n),
        passages: Vec::with_capacity(3 * n),
        instructions: Vec::with_capacity(2 * n),
        queries: Vec::with_capacity(2 * n),
        family_ids: Vec::with_capacity(n),
        skipped_missing_negatives: skipped_missing,
        skipped_not_retained,
    };
    for (f_idx, f) in families.iter().enumerate() {
        out.family_ids.push(f.id.clone());
        out.passages.push(f.passage_pos.clone());
        out.instructions.push(f.instruction_pos.clone());
        out.queries.push(f.query_pos.clone());
        out.tuples.push(TrainTuple {
            passage_idx: f_idx,
            instruction_idx: f_idx,
            query_idx: f_idx,
            is_positive: true,
        });
    }
    for f in &families {
        out.passages.push(f.passage_neg1.clone().expect("checked"));
        out.passages.push(f.passage_neg2.clone().expect("checked"));
        out.instructions.push(f.instruction_neg.clone().expect("checked"));
        out.queries.push(f.query_neg.clone().expect("checked"));
    }
    // Negative table layout: passage_neg1 of family f at n + 2f, passage_neg2
    // at n + 2f + 1, instruction_neg and query_neg at n + f.
    debug_assert_eq!(out.passages.len(), 3 * n);
    out
}

#[cfg(test)]
pub(crate) fn sample_family(id: &str, retained: bool) -> TripletFamily {
    TripletFamily {
        id: id.to_string(),
        instruction_pos: format!("focus on the history of {id}"),
        query_pos: format!("what is {id}"),
        passage_pos: format!("{id} has a long history of use"),
        instruction_neg: Some(format!("focus on the price of {id}")),
        query_neg: Some(format!("what replaced {id}")),
        passage_neg1: Some(format!("{id} pricing details and costs")),
        passage_neg2: Some(format!("the successor of {id} explained")),
        source: "fixture".into(),
        verdict: Some(JudgeVerdict {
            scenario_results: vec![
                ScenarioResult { chosen: Some(format!("{id}:p_pos")), matched: retained },
                ScenarioResult { chosen: Some(format!("{id}:p_neg1")), matched: retained },
                ScenarioResult { chosen: Some(format!("{id}:p_neg2")), matched: retained },
            ],
            retained,
            judge_model: "mock".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_empty_corpus_and_zero_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert!(corpus.is_empty());
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.n_instructions, 0);
        assert_eq!(stats.avg_len_p, 0.0);
    }

    #[test]
    fn malformed_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = family_to_json(&sample_family("a", true)).unwrap();
        let good2 = family_to_json(&sample_family("c", true)).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\": 12}}\n{good2}\n")).unwrap();
        match load_corpus(&path) {
            Err(Error::CorpusParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let line = family_to_json(&sample_family("a", true)).unwrap();
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        match load_corpus(&path) {
            Err(Error::DuplicateId { line, id, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "a");
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn schema_version_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.jsonl");
        let line = family_to_json(&sample_family("a", true)).unwrap();
        let wrong = line.replace("inf-ir/1", "inf-ir/2");
        std::fs::write(&path, format!("{wrong}\n")).unwrap();
        match load_corpus(&path) {
            Err(Error::CorpusParse { field, .. }) => assert_eq!(field, "schema"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1.jsonl");
        let p2 = dir.path().join("c2.jsonl");
        let mut families = vec![sample_family("beta", true), sample_family("alpha", false)];
        families[1].passage_neg2 = None;
        families[1].verdict = None;
        save_corpus(&p1, &Corpus::new(families)).unwrap();
        let loaded = load_corpus(&p1).unwrap();
        save_corpus(&p2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn validate_full_family_is_clean() {
        assert!(validate_family(&sample_family("x", true)).is_empty());
    }

    #[test]
    fn validate_retained_with_missing_negative() {
        let mut f = sample_family("x", true);
        f.passage_neg2 = None;
        let violations = validate_family(&f);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "passage_neg2");
    }

    #[test]
    fn validate_newline_in_synthetic_field() {
        let mut f = sample_family("x", true);
        f.instruction_pos = "keep\ndrop".into();
        let violations = validate_family(&f);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "instruction_pos");
        assert!(violations[0].rule.contains("newline"));

        // Passages are exempt.
        let mut g = sample_family("y", true);
        g.passage_neg1 = Some("line one\nline two".into());
        assert!(validate_family(&g).is_empty());
    }

    #[test]
    fn validate_blank_positive() {
        let mut f = sample_family("x", true);
        f.query_pos = "   ".into();
        let violations = validate_family(&f);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].field, "query_pos");
    }

    #[test]
    fn stats_single_family_token_counts() {
        let f = TripletFamily {
            id: "s".into(),
            instruction_pos: "a b".into(),
            query_pos: "a b".into(),
            passage_pos: "a b".into(),
            instruction_neg: None,
            query_neg: None,
            passage_neg1: None,
            passage_neg2: None,
            source: "fixture".into(),
            verdict: None,
        };
        let stats = corpus_stats(&Corpus::new(vec![f]));
        assert_eq!(stats.n_instructions, 1);
        assert_eq!(stats.n_queries, 1);
        assert_eq!(stats.n_passages, 1);
        assert_eq!(stats.avg_len_i, 2.0);
        assert_eq!(stats.avg_len_q, 2.0);
        assert_eq!(stats.avg_len_p, 2.0);
        assert_eq!(stats.n_positive_samples, 1);
        assert_eq!(stats.n_negative_samples, 0);
    }

    #[test]
    fn stats_count_distinct_texts_per_role() {
        let families = vec![sample_family("a", true), sample_family("b", true)];
        let stats = corpus_stats(&Corpus::new(families));
        assert_eq!(stats.n_instructions, 4);
        assert_eq!(stats.n_queries, 4);
        assert_eq!(stats.n_passages, 6);
        assert_eq!(stats.n_positive_samples, 2);
        assert_eq!(stats.n_negative_samples, 4);
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let a = vec![sample_family("a", true), sample_family("b", true), sample_family("c", false)];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            corpus_stats(&Corpus::new(a)),
            corpus_stats(&Corpus::new(b))
        );
    }

    #[test]
    fn flatten_single_family_table_sizes() {
        let flat = flatten_training_tuples(&Corpus::new(vec![sample_family("a", true)]));
        assert_eq!(flat.tuples.len(), 1);
        assert!(flat.tuples[0].is_positive);
        assert_eq!(flat.passages.len(), 3);
        assert_eq!(flat.instructions.len(), 2);
        assert_eq!(flat.queries.len(), 2);
        let [neg1, neg2] = flat.hard_negative_tuples(0);
        assert_eq!(flat.passages[neg1.passage_idx], flat.passages[1]);
        assert_eq!(flat.instructions[neg1.instruction_idx], flat.instructions[1]);
        assert_eq!(flat.queries[neg1.query_idx], flat.queries[0]);
        assert!(!neg2.is_positive);
    }

    #[test]
    fn flatten_empty_and_skipped() {
        let flat = flatten_training_tuples(&Corpus::new(vec![]));
        assert!(flat.tuples.is_empty());

        let mut missing = sample_family("m", true);
        missing.verdict = None;
        missing.query_neg = None;
        let rejected = sample_family("r", false);
        let flat = flatten_training_tuples(&Corpus::new(vec![missing, rejected]));
        assert!(flat.tuples.is_empty());
        assert_eq!(flat.skipped_missing_negatives, 1);
        assert_eq!(flat.skipped_not_retained, 1);
    }

    #[test]
    fn flatten_is_order_canonical() {
        let families: Vec<TripletFamily> =
            (0..10).map(|i| sample_family(&format!("fam-{i:03}"), true)).collect();
        let mut shuffled = families.clone();
        shuffled.swap(0, 7);
        shuffled.swap(3, 9);
        shuffled.swap(2, 5);
        let a = flatten_training_tuples(&Corpus::new(families));
        let b = flatten_training_tuples(&Corpus::new(shuffled));
        assert_eq!(a, b);
        assert_eq!(a.tuples.len(), 10);
        assert!(a.tuples.iter().all(|t| t.is_positive));
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn exactly_one_positive_tuple_per_family() {
        let families = vec![sample_family("a", true), sample_family("b", true)];
        let flat = flatten_training_tuples(&Corpus::new(families));
        let positives = flat.tuples.iter().filter(|t| t.is_positive).count();
        assert_eq!(positives, flat.n_families());
        for (f, t) in flat.tuples.iter().enumerate() {
            assert_eq!((t.passage_idx, t.instruction_idx, t.query_idx), (f, f, f));
        }
    }
}
