//! Deterministic offline mock: a seed-pair generator and a chat client that
//! fabricates consistent instruction/poison/judge responses from the family
//! id alone. Used for fully offline pipeline runs, fixtures, and the scaled
//! training experiments.
//!
//! Generated families have a two-facet structure: the query names a topic and
//! two aspects, the instruction picks one aspect, and each passage matches
//! the topic plus exactly one aspect. Whether a passage is the right answer
//! therefore depends on the instruction, not on the query alone.

use rand::prelude::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::client::{ChatClient, ChatRequest};
use super::pipeline::SeedPair;
use super::templates::{
    TEMPLATE_INSTRUCTION_NEG, TEMPLATE_INSTRUCTION_POS, TEMPLATE_JUDGE, TEMPLATE_PASSAGE_NEG1,
    TEMPLATE_PASSAGE_NEG2, TEMPLATE_QUERY_NEG,
};
use crate::embedding::fnv1a64;
use crate::error::{Error, Result};

const ASPECTS: [&str; 24] = [
    "history",
    "nutrition",
    "pricing",
    "safety",
    "maintenance",
    "reviews",
    "design",
    "travel",
    "biology",
    "economics",
    "weather",
    "climate",
    "chemistry",
    "logistics",
    "marketing",
    "geography",
    "politics",
    "folklore",
    "anatomy",
    "taxation",
    "astronomy",
    "linguistics",
    "architecture",
    "psychology",
];

const SYLLABLES: [&str; 12] = [
    "ba", "do", "ke", "li", "mu", "na", "po", "ri", "sa", "tu", "ve", "zo",
];

const INSTRUCTION_TEMPLATES: [(&str, &str); 4] = [
    ("prefer passages covering ", " angles"),
    ("emphasize ", " oriented results"),
    ("return ", " focused material"),
    ("favor the ", " treatment"),
];

/// Deterministic per-family vocabulary.
#[derive(Debug, Clone)]
pub struct MockTexts {
    pub topic_a: String,
    pub topic_b: String,
    pub topic_c: String,
    pub alt_topic_a: String,
    pub alt_topic_b: String,
    pub facet_pos: String,
    pub facet_neg: String,
    template: usize,
}

fn word(rng: &mut ChaCha8Rng, tag: &str) -> String {
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES.choose(rng).unwrap());
    }
    w.push_str(tag);
    w
}

pub fn mock_texts(seed: u64, family_id: &str) -> MockTexts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(family_id.as_bytes()));
    let suffix = format!("{:x}", fnv1a64(family_id.as_bytes()) & 0xffff);
    let topic_a = word(&mut rng, &suffix);
    let topic_b = word(&mut rng, &suffix);
    let topic_c = word(&mut rng, &suffix);
    let facet_pos = ASPECTS.choose(&mut rng).unwrap().to_string();
    let facet_neg = loop {
        let f = ASPECTS.choose(&mut rng).unwrap().to_string();
        if f != facet_pos {
            break f;
        }
    };
    let alt_topic_a = word(&mut rng, &suffix);
    let alt_topic_b = word(&mut rng, &suffix);
    let template = rng.random_range(0..INSTRUCTION_TEMPLATES.len());
    MockTexts {
        topic_a,
        topic_b,
        topic_c,
        alt_topic_a,
        alt_topic_b,
        facet_pos,
        facet_neg,
        template,
    }
}

impl MockTexts {
    pub fn seed_query(&self) -> String {
        format!(
            "looking for {} {} {} with {} and {}",
            self.topic_a, self.topic_b, self.topic_c, self.facet_pos, self.facet_neg
        )
    }

    pub fn seed_passage(&self) -> String {
        format!(
            "{} {} {} report with {} {} emphasis",
            self.topic_a, self.topic_b, self.topic_c, self.facet_pos, self.facet_pos
        )
    }

    pub fn instruction_pos(&self) -> String {
        let (head, tail) = INSTRUCTION_TEMPLATES[self.template];
        format!("{head}{} {}{tail}", self.facet_pos, self.facet_pos)
    }

    pub fn instruction_neg(&self) -> String {
        let (head, tail) = INSTRUCTION_TEMPLATES[self.template];
        format!("{head}{} {}{tail}", self.facet_neg, self.facet_neg)
    }

    pub fn query_neg(&self) -> String {
        format!(
            "looking for {} {} {} with {} and {}",
            self.alt_topic_a, self.alt_topic_b, self.topic_c, self.facet_pos, self.facet_neg
        )
    }

    pub fn passage_neg1(&self) -> String {
        format!(
            "{} {} {} report with {} {} emphasis",
            self.topic_a, self.topic_b, self.topic_c, self.facet_neg, self.facet_neg
        )
    }

    pub fn passage_neg2(&self) -> String {
        format!(
            "{} {} {} report with {} {} emphasis",
            self.alt_topic_a, self.alt_topic_b, self.topic_c, self.facet_pos, self.facet_pos
        )
    }
}

/// Deterministic synthetic seed pairs, ids `fam-00000` onward.
pub fn mock_seed_pairs(n: usize, seed: u64) -> Vec<SeedPair> {
    mock_seed_pairs_from(0, n, seed)
}

/// Seed pairs for family ordinals `start..start + n`; later ranges give
/// held-out families with fresh topics but the shared aspect vocabulary.
pub fn mock_seed_pairs_from(start: usize, n: usize, seed: u64) -> Vec<SeedPair> {
    (start..start + n)
        .map(|f| {
            let id = format!("fam-{f:05}");
            let texts = mock_texts(seed, &id);
            SeedPair {
                id,
                query: texts.seed_query(),
                passage: texts.seed_passage(),
            }
        })
        .collect()
}

/// A paired-instruction evaluation dataset over held-out mock families:
/// per family the query is ranked under both its instructions, the relevance
/// judgment follows the changed instruction, and the pair direction
/// alternates so shared biases cancel. The pool holds all three passages of
/// every family.
pub fn mock_eval_dataset(seed: u64, start: usize, n: usize) -> crate::eval::EvalDataset {
    use crate::eval::{PoolEntry, QueryRecord, Qrels};
    let mut queries = Vec::new();
    let mut pool = Vec::new();
    let mut qrels = Qrels::new();
    for (i, f) in (start..start + n).enumerate() {
        let id = format!("fam-{f:05}");
        let t = mock_texts(seed, &id);
        let (og, new, rel) = if i % 2 == 0 {
            (t.instruction_pos(), t.instruction_neg(), format!("{id}#p_neg1"))
        } else {
            (t.instruction_neg(), t.instruction_pos(), format!("{id}#p_pos"))
        };
        queries.push(QueryRecord {
            query_id: id.clone(),
            query: t.seed_query(),
            instruction_og: og,
            instruction_new: new,
        });
        pool.push(PoolEntry {
            passage_id: format!("{id}#p_pos"),
            text: t.seed_passage(),
        });
        pool.push(PoolEntry {
            passage_id: format!("{id}#p_neg1"),
            text: t.passage_neg1(),
        });
        pool.push(PoolEntry {
            passage_id: format!("{id}#p_neg2"),
            text: t.passage_neg2(),
        });
        qrels.insert(&id, &rel, 1);
    }
    crate::eval::EvalDataset {
        queries,
        pool,
        qrels,
    }
}

/// How the mock judge answers the three gate scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MockJudge {
    AlwaysCorrect,
    /// Answers every scenario correctly except the given 1-based one.
    AlwaysFailScenario(u8),
    /// Answers each scenario correctly with this probability, independently.
    Accuracy(f64),
}

/// Fully offline chat client; responses are a pure function of
/// (template, family id, seed).
pub struct SeededMockClient {
    seed: u64,
    judge: MockJudge,
}

impl SeededMockClient {
    pub fn new(seed: u64, judge: MockJudge) -> Self {
        SeededMockClient { seed, judge }
    }

    fn judge_answer(&self, req: &ChatRequest, scenario: u8) -> Result<String> {
        let hints = req.judge.as_ref().ok_or_else(|| Error::InvalidInput(
            "mock judge called without judge hints".into(),
        ))?;
        let wrong = hints
            .labels
            .iter()
            .find(|l| **l != hints.correct)
            .copied()
            .unwrap_or(hints.correct);
        let pick_correct = match self.judge {
            MockJudge::AlwaysCorrect => true,
            MockJudge::AlwaysFailScenario(s) => scenario != s,
            MockJudge::Accuracy(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed
                        ^ fnv1a64(req.family_id.as_bytes())
                        ^ (u64::from(scenario) << 32),
                );
                rng.random_range(0.0..1.0) < p
            }
        };
        let label = if pick_correct { hints.correct } else { wrong };
        Ok(format!("The most relevant passage is {label}."))
    }
}

impl ChatClient for SeededMockClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let texts = mock_texts(self.seed, &req.family_id);
        match req.template.as_str() {
            t if t == TEMPLATE_INSTRUCTION_POS => Ok(format!(
                "Here is a suitable instruction.\nInstruction: {}",
                texts.instruction_pos()
            )),
            t if t == TEMPLATE_INSTRUCTION_NEG => {
                Ok(format!("Instruction: {}", texts.instruction_neg()))
            }
            t if t == TEMPLATE_QUERY_NEG => Ok(format!("Query: {}", texts.query_neg())),
            t if t == TEMPLATE_PASSAGE_NEG1 => Ok(texts.passage_neg1()),
            t if t == TEMPLATE_PASSAGE_NEG2 => Ok(texts.passage_neg2()),
            t if t == TEMPLATE_JUDGE[0] => self.judge_answer(req, 1),
            t if t == TEMPLATE_JUDGE[1] => self.judge_answer(req, 2),
            t if t == TEMPLATE_JUDGE[2] => self.judge_answer(req, 3),
            other => Err(Error::InvalidInput(format!(
                "mock client has no handler for template `{other}`"
            ))),
        }
    }

    fn model_name(&self) -> &str {
        "mock-judge"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_texts_are_deterministic_and_structured() {
        let a = mock_texts(7, "fam-00003");
        let b = mock_texts(7, "fam-00003");
        assert_eq!(a.seed_query(), b.seed_query());
        assert_ne!(a.facet_pos, a.facet_neg);
        assert!(a.seed_passage().contains(&a.facet_pos));
        assert!(a.passage_neg1().contains(&a.facet_neg));
        assert!(!a.passage_neg1().contains(&format!(" {} ", a.facet_pos)));
        // Held-out families reuse the aspect vocabulary but not topics.
        let c = mock_texts(7, "fam-90000");
        assert_ne!(a.topic_a, c.topic_a);
    }

    #[test]
    fn seed_pairs_have_unique_ids() {
        let pairs = mock_seed_pairs(20, 1);
        let ids: std::collections::BTreeSet<_> = pairs.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), 20);
    }
}
