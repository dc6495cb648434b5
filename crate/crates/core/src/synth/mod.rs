//! Corpus synthesis: instruction generation for seed pairs, poisoning of
//! instructions and queries, negative-passage generation, judge-based
//! quality gating, and rule filtering.
//!
//! The pipeline runs three stages per seed pair: generate the positive
//! instruction, poison it (new instruction, new query, and the two negative
//! passages), then replay the retrieval task to a judge in three scenarios.
//! A family is retained only when the judge picks the designated passage in
//! all three.

mod client;
pub mod mock;
mod pipeline;
mod templates;

pub use client::{ChatClient, ChatClientConfig, ChatRequest, HttpChatClient, JudgeHints, ScriptedFileClient};
pub use pipeline::{
    load_seed_pairs, run_pipeline, PipelineConfig, PipelineReport, SeedPair, STAGE_GATE,
    STAGE_INSTRUCTION, STAGE_POISON,
};
pub use templates::{
    instruction_neg_template, instruction_pos_template, judge_template, passage_neg_template,
    query_neg_template, PromptTemplate, TEMPLATE_INSTRUCTION_NEG, TEMPLATE_INSTRUCTION_POS,
    TEMPLATE_JUDGE, TEMPLATE_PASSAGE_NEG1, TEMPLATE_PASSAGE_NEG2, TEMPLATE_QUERY_NEG,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::corpus::{JudgeVerdict, ScenarioResult, TripletFamily};
use crate::embedding::fnv1a64;
use crate::error::{Error, Result};

/// Truncates at the first newline, then trims surrounding whitespace.
/// Idempotent; an empty result is an error (the family is rejected).
pub fn rule_filter(s: &str) -> Result<String> {
    let cut = match s.find('\n') {
        Some(pos) => &s[..pos],
        None => s,
    };
    let trimmed = cut.trim();
    if trimmed.is_empty() {
        return Err(Error::FilteredToEmpty {
            context: "rule_filter".into(),
        });
    }
    Ok(trimmed.to_string())
}

/// Returns the content after the first line beginning `label:` (exact case),
/// trimmed. The raw response travels with the error for audit.
pub fn parse_labeled_line(response: &str, label: &str) -> Result<String> {
    let prefix = format!("{label}:");
    for line in response.lines() {
        if let Some(rest) = line.strip_prefix(&prefix) {
            return Ok(rest.trim().to_string());
        }
    }
    Err(Error::LabelNotFound {
        label: label.to_string(),
        raw: response.to_string(),
    })
}

fn casefold_trim(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Generates the positive instruction for a seed pair: prompt, parse the
/// `Instruction:` line, rule-filter.
pub fn generate_instruction(seed: &SeedPair, client: &dyn ChatClient) -> Result<String> {
    let template = instruction_pos_template();
    let mut slots = BTreeMap::new();
    slots.insert("document", seed.passage.as_str());
    slots.insert("query", seed.query.as_str());
    let prompt = template.render(&slots)?;
    let response = client.complete(&ChatRequest {
        template: template.name.clone(),
        family_id: seed.id.clone(),
        prompt,
        judge: None,
    })?;
    rule_filter(&parse_labeled_line(&response, "Instruction")?)
}

/// The four poisoned fields of a family.
#[derive(Debug, Clone)]
pub struct PoisonedFields {
    pub instruction_neg: String,
    pub query_neg: String,
    pub passage_neg1: String,
    pub passage_neg2: String,
}

/// Poisons a family: a new instruction and query from the synthesis prompts,
/// then the two negative passages generated against (poisoned instruction,
/// original query) and (original instruction, poisoned query). Instructions
/// and queries are rule-filtered; passages are only trimmed. A poison that
/// equals its positive counterpart after casefold and trim rejects the
/// family.
pub fn poison_family(
    family_id: &str,
    instruction_pos: &str,
    query_pos: &str,
    passage_pos: &str,
    client: &dyn ChatClient,
) -> Result<PoisonedFields> {
    let ask = |template: &PromptTemplate, slots: &BTreeMap<&str, &str>| -> Result<String> {
        let prompt = template.render(slots)?;
        client.complete(&ChatRequest {
            template: template.name.clone(),
            family_id: family_id.to_string(),
            prompt,
            judge: None,
        })
    };

    let mut poison_slots = BTreeMap::new();
    poison_slots.insert("document", passage_pos);
    poison_slots.insert("query_positive", query_pos);
    poison_slots.insert("instruction_positive", instruction_pos);

    let raw = ask(&instruction_neg_template(), &poison_slots)?;
    let instruction_neg = rule_filter(&parse_labeled_line(&raw, "Instruction")?)?;
    if casefold_trim(&instruction_neg) == casefold_trim(instruction_pos) {
        return Err(Error::NoOpPoison {
            family_id: family_id.to_string(),
            field: "instruction_neg".into(),
        });
    }

    let raw = ask(&query_neg_template(), &poison_slots)?;
    let query_neg = rule_filter(&parse_labeled_line(&raw, "Query")?)?;
    if casefold_trim(&query_neg) == casefold_trim(query_pos) {
        return Err(Error::NoOpPoison {
            family_id: family_id.to_string(),
            field: "query_neg".into(),
        });
    }

    let passage_for = |instruction: &str, query: &str, which: usize| -> Result<String> {
        let template = passage_neg_template(which);
        let mut slots = BTreeMap::new();
        slots.insert("instruction", instruction);
        slots.insert("query", query);
        let raw = ask(&template, &slots)?;
        let trimmed = raw.trim().to_string();
        if trimmed.is_empty() {
            return Err(Error::FilteredToEmpty {
                context: format!("{family_id}/passage_neg{which}"),
            });
        }
        Ok(trimmed)
    };
    let passage_neg1 = passage_for(&instruction_neg, query_pos, 1)?;
    let passage_neg2 = passage_for(instruction_pos, &query_neg, 2)?;

    Ok(PoisonedFields {
        instruction_neg,
        query_neg,
        passage_neg1,
        passage_neg2,
    })
}

/// A labeled passage presented to the judge.
#[derive(Debug, Clone)]
pub struct Distractor {
    pub passage_id: String,
    pub text: String,
}

const LABELS: [char; 26] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R',
    'S', 'T', 'U', 'V', 'W', 'X', 'Y', 'Z',
];

/// Replays the retrieval task to the judge in three scenarios:
/// (instruction_pos, query_pos) must select passage_pos; (instruction_neg,
/// query_pos) must select passage_neg1; (instruction_pos, query_neg) must
/// select passage_neg2. Each scenario presents the designated passage, the
/// family's other passages as close negatives, and the shared distractors,
/// shuffled with a seed derived from the family id and labeled A, B, C, ...
/// The family is retained only if all three scenarios match. A judge answer
/// that names no presented label counts as a failed scenario.
pub fn quality_check(
    family: &TripletFamily,
    judge_client: &dyn ChatClient,
    distractors: &[Distractor],
) -> Result<JudgeVerdict> {
    let (i_neg, q_neg, p_neg1, p_neg2) = match (
        &family.instruction_neg,
        &family.query_neg,
        &family.passage_neg1,
        &family.passage_neg2,
    ) {
        (Some(i), Some(q), Some(p1), Some(p2)) => (i, q, p1, p2),
        _ => {
            return Err(Error::InvalidInput(format!(
                "family {} is not fully populated for the quality gate",
                family.id
            )))
        }
    };
    let fid = &family.id;
    let own = |suffix: &str, text: &str| Distractor {
        passage_id: format!("{fid}#{suffix}"),
        text: text.to_string(),
    };
    let p_pos = own("p_pos", &family.passage_pos);
    let p1 = own("p_neg1", p_neg1);
    let p2 = own("p_neg2", p_neg2);

    let scenarios: [(&str, &str, &Distractor, [&Distractor; 2]); 3] = [
        (&family.instruction_pos, &family.query_pos, &p_pos, [&p1, &p2]),
        (i_neg, &family.query_pos, &p1, [&p_pos, &p2]),
        (&family.instruction_pos, q_neg, &p2, [&p_pos, &p1]),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(fid.as_bytes()));
    let mut results = Vec::with_capacity(3);
    for (idx, (instruction, query, designated, close)) in scenarios.iter().enumerate() {
        let scenario_no = idx + 1;
        let mut presented: Vec<&Distractor> = vec![designated, close[0], close[1]];
        presented.extend(distractors.iter());
        if presented.len() > LABELS.len() {
            return Err(Error::InvalidInput(format!(
                "{} passages exceed the {} available labels",
                presented.len(),
                LABELS.len()
            )));
        }
        presented.shuffle(&mut rng);
        let labels: Vec<char> = LABELS[..presented.len()].to_vec();
        let correct_pos = presented
            .iter()
            .position(|d| d.passage_id == designated.passage_id)
            .expect("designated passage is presented");
        let correct = labels[correct_pos];

        let block = presented
            .iter()
            .zip(&labels)
            .map(|(d, l)| format!("{l}. {}", d.text))
            .collect::<Vec<_>>()
            .join("\n");
        let template = judge_template(scenario_no);
        let mut slots = BTreeMap::new();
        slots.insert("instruction", *instruction);
        slots.insert("query", *query);
        slots.insert("passages", block.as_str());
        let prompt = template.render(&slots)?;
        let response = judge_client.complete(&ChatRequest {
            template: template.name.clone(),
            family_id: fid.clone(),
            prompt,
            judge: Some(JudgeHints {
                scenario: scenario_no as u8,
                labels: labels.clone(),
                correct,
            }),
        })?;

        // First capital letter in the response that names a presented label.
        let chosen_label = response.chars().find(|c| labels.contains(c));
        let (chosen, matched) = match chosen_label {
            Some(l) => {
                let pos = labels.iter().position(|x| *x == l).unwrap();
                let id = presented[pos].passage_id.clone();
                let matched = id == designated.passage_id;
                (Some(id), matched)
            }
            None => (None, false),
        };
        results.push(ScenarioResult { chosen, matched });
    }

    let retained = results.iter().all(|r| r.matched);
    Ok(JudgeVerdict {
        scenario_results: results,
        retained,
        judge_model: judge_client.model_name().to_string(),
    })
}
