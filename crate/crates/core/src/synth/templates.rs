//! Prompt templates. Rendering is byte-exact `{slot}` substitution; every
//! required slot must be supplied and nothing else.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(name: &str, body: &str, slots: &[&str]) -> Self {
        PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
            required_slots: slots.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Replaces each `{name}` with its value. No trimming inside the body.
    pub fn render(&self, slots: &BTreeMap<&str, &str>) -> Result<String> {
        for required in &self.required_slots {
            if !slots.contains_key(required.as_str()) {
                return Err(Error::MissingSlot {
                    template: self.name.clone(),
                    slot: required.clone(),
                });
            }
        }
        for supplied in slots.keys() {
            if !self.required_slots.contains(*supplied) {
                return Err(Error::UnknownSlot {
                    template: self.name.clone(),
                    slot: (*supplied).to_string(),
                });
            }
        }
        let mut out = self.body.clone();
        for (name, value) in slots {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        Ok(out)
    }
}

pub const TEMPLATE_INSTRUCTION_POS: &str = "instruction_synthesis_pos";
pub const TEMPLATE_INSTRUCTION_NEG: &str = "instruction_synthesis_neg";
pub const TEMPLATE_QUERY_NEG: &str = "query_synthesis_neg";
pub const TEMPLATE_PASSAGE_NEG1: &str = "passage_synthesis_neg1";
pub const TEMPLATE_PASSAGE_NEG2: &str = "passage_synthesis_neg2";
pub const TEMPLATE_JUDGE: [&str; 3] = ["judge_scenario_1", "judge_scenario_2", "judge_scenario_3"];

const QUERY_NEG_BODY: &str = "You are given a document along with a search query and an instruction that retrieves this document.

Document: {document}
Positive Query: {query_positive}
Positive Instruction: {instruction_positive}

Your task is to generate a NEW search query that will lead to the creation of DISTINCTLY DIFFERENT documents. The new query combined with the original instruction needs to create documents that are easily distinguishable from the original document when evaluated.

To create effective negative examples:
1. IDENTIFY KEY ELEMENTS: First, identify 2-3 core aspects/facts/claims of the original document.
2. CREATE SEMANTIC OPPOSITES:
  - Your new query should target information that contradicts or significantly diverges from these core aspects
3. MAINTAIN DOMAIN RELEVANCE: Stay in a similar subject area but with crucial differences:
  - Change time periods, locations, entities, or outcomes
  - Reverse cause-effect relationships
  - Switch perspective (e.g., benefits vs. drawbacks, support vs. opposition)
  - Modify the granularity or specificity level
4. ENSURE CLEAR DISTINCTION: A human evaluator should be able to easily determine which document is the original vs. synthetic based on these key distinctions.

The goal is that when your NEW query is used with the ORIGINAL instruction, they should produce documents that are clearly distinguishable from the original document (at least 3 significant differences).

Please provide your answer in the following format:
Query: <your new query>
Be concise but specific enough to ensure clear differentiation.";

const INSTRUCTION_NEG_BODY: &str = "You are given a document along with a search query and an instruction that retrieves this document.

Document: {document}

Positive Query: {query_positive}

Positive Instruction: {instruction_positive}

Your task is to generate a NEW instruction that will lead to the creation of DISTINCTLY DIFFERENT documents. The new instruction combined with the original query needs to create documents that are easily distinguishable from the original document when evaluated.

To create effective negative examples:

1. IDENTIFY KEY ELEMENTS: First, identify 2-3 core aspects/facts/claims of the original document.

2. CREATE SEMANTIC OPPOSITES:
  - Your new instruction should target information that contradicts or significantly diverges from these core aspects

3. MAINTAIN DOMAIN RELEVANCE: Stay in a similar subject area but with crucial differences:
  - Change time periods, locations, entities, or outcomes
  - Reverse cause-effect relationships
  - Switch perspective (e.g., benefits vs. drawbacks, support vs. opposition)
  - Modify the granularity or specificity level

4. ENSURE CLEAR DISTINCTION: A human evaluator should be able to easily determine which document is the original vs. synthetic based on these key distinctions.

The goal is that when your NEW instruction is used with the ORIGINAL query, they should produce documents that are clearly distinguishable from the original document (at least 3 significant differences).

Please provide your answer in the following format:

Instruction: <your new instruction>

Be concise but specific enough to ensure clear differentiation.";

// The corpus method defines only the poisoning prompts verbatim; the
// positive-instruction, passage-synthesis, and judge prompts below are this
// toolkit's own, kept to the same answer-format conventions.

const INSTRUCTION_POS_BODY: &str = "You are given a document and a search query that retrieves this document.

Document: {document}
Query: {query}

Your task is to write an instruction that adds specificity or stylistic context to the query, explicitly linking it to this document. Describe what kind of passage the searcher wants (scope, emphasis, style, or constraints) so that this document is clearly the best match.

Please provide your answer in the following format:
Instruction: <your new instruction>
Be concise but specific.";

const PASSAGE_NEG_BODY: &str = "Write a passage that a search engine should return for the query and instruction below.

Instruction: {instruction}
Query: {query}

The passage must directly satisfy both the query and the instruction. Reply with the passage text only, without any label or preamble.";

const JUDGE_BODY: &str = "You are evaluating search results. Given the instruction and query below, identify the most relevant passage.

Instruction: {instruction}
Query: {query}

Passages:
{passages}

Answer with the single letter of the most relevant passage.";

pub fn query_neg_template() -> PromptTemplate {
    PromptTemplate::new(
        TEMPLATE_QUERY_NEG,
        QUERY_NEG_BODY,
        &["document", "query_positive", "instruction_positive"],
    )
}

pub fn instruction_neg_template() -> PromptTemplate {
    PromptTemplate::new(
        TEMPLATE_INSTRUCTION_NEG,
        INSTRUCTION_NEG_BODY,
        &["document", "query_positive", "instruction_positive"],
    )
}

pub fn instruction_pos_template() -> PromptTemplate {
    PromptTemplate::new(
        TEMPLATE_INSTRUCTION_POS,
        INSTRUCTION_POS_BODY,
        &["document", "query"],
    )
}

pub fn passage_neg_template(which: usize) -> PromptTemplate {
    let name = if which == 1 {
        TEMPLATE_PASSAGE_NEG1
    } else {
        TEMPLATE_PASSAGE_NEG2
    };
    PromptTemplate::new(name, PASSAGE_NEG_BODY, &["instruction", "query"])
}

pub fn judge_template(scenario: usize) -> PromptTemplate {
    PromptTemplate::new(
        TEMPLATE_JUDGE[scenario - 1],
        JUDGE_BODY,
        &["instruction", "query", "passages"],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_byte_exact() {
        let t = PromptTemplate::new("t", "Q: {q}", &["q"]);
        let mut slots = BTreeMap::new();
        slots.insert("q", "x");
        assert_eq!(t.render(&slots).unwrap(), "Q: x");
    }

    #[test]
    fn missing_and_unknown_slots() {
        let t = PromptTemplate::new("t", "Q: {q}", &["q"]);
        match t.render(&BTreeMap::new()) {
            Err(Error::MissingSlot { slot, .. }) => assert_eq!(slot, "q"),
            other => panic!("expected missing slot, got {other:?}"),
        }
        let mut slots = BTreeMap::new();
        slots.insert("q", "x");
        slots.insert("extra", "y");
        match t.render(&slots) {
            Err(Error::UnknownSlot { slot, .. }) => assert_eq!(slot, "extra"),
            other => panic!("expected unknown slot, got {other:?}"),
        }
    }

    #[test]
    fn query_template_contains_answer_format() {
        let t = query_neg_template();
        let mut slots = BTreeMap::new();
        slots.insert("document", "doc body");
        slots.insert("query_positive", "q+");
        slots.insert("instruction_positive", "i+");
        let rendered = t.render(&slots).unwrap();
        assert!(rendered.contains("Query: <your new query>"));
        assert!(rendered.contains("Document: doc body"));
        assert!(!rendered.contains('{'));
    }

    #[test]
    fn instruction_template_contains_answer_format() {
        let t = instruction_neg_template();
        let mut slots = BTreeMap::new();
        slots.insert("document", "d");
        slots.insert("query_positive", "q");
        slots.insert("instruction_positive", "i");
        let rendered = t.render(&slots).unwrap();
        assert!(rendered.contains("Instruction: <your new instruction>"));
    }
}
