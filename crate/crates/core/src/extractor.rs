//! Extraction of input specifications, output rules, and task
//! specifications from a prompt under test, plus rule inversion and
//! groundedness checking. Everything here goes through the configured
//! meta-model; given a warm cache the results replay byte-for-byte.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evaluators::{parse_verdict, Decision, EvalError};
use crate::gateway::{Gateway, GatewayError, ModelSpec, RequestPolicy};
use crate::prompt_store::{templates, MetaPromptTemplate, PromptError, PromptUnderTest};

/// Whether an artifact is as extracted or has been hand-edited since.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Extracted,
    Edited,
}

/// Line-oriented constraints describing the valid input domain of a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub statements: Vec<String>,
    pub provenance: Provenance,
    pub source_put: String,
}

impl InputSpec {
    /// Plain-text file form: one statement per line.
    pub fn to_file_text(&self) -> String {
        let mut out = self.statements.join("\n");
        out.push('\n');
        out
    }

    pub fn from_file_text(text: &str, source_put: &str, provenance: Provenance) -> Self {
        InputSpec {
            statements: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            provenance,
            source_put: source_put.to_string(),
        }
    }

    pub fn joined(&self) -> String {
        self.statements.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Extracted,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Groundedness {
    Unknown,
    Grounded,
    NotGrounded,
}

/// A concrete, checkable constraint on prompt output — either extracted
/// from the prompt or a semantic inversion of an extracted rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRule {
    pub rule_id: u32,
    pub text: String,
    pub kind: RuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse_of: Option<u32>,
    pub grounded: Groundedness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundedness_explanation: Option<String>,
}

/// Ordered rules for one prompt: extracted rules first, then inverses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub put_id: String,
    pub rules: Vec<OutputRule>,
}

impl RuleSet {
    pub fn extracted(&self) -> impl Iterator<Item = &OutputRule> {
        self.rules.iter().filter(|r| r.kind == RuleKind::Extracted)
    }

    pub fn inverses(&self) -> impl Iterator<Item = &OutputRule> {
        self.rules.iter().filter(|r| r.kind == RuleKind::Inverse)
    }

    pub fn get(&self, rule_id: u32) -> Option<&OutputRule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    /// Structural invariants: unique ids, inverse_of present exactly on
    /// inverse rules and resolving to an extracted rule.
    pub fn validate(&self) -> Result<(), ExtractError> {
        let mut seen = std::collections::BTreeSet::new();
        for rule in &self.rules {
            if !seen.insert(rule.rule_id) {
                return Err(ExtractError::InvalidRuleSet(format!(
                    "duplicate rule_id {}",
                    rule.rule_id
                )));
            }
            match (rule.kind, rule.inverse_of) {
                (RuleKind::Extracted, Some(_)) => {
                    return Err(ExtractError::InvalidRuleSet(format!(
                        "extracted rule {} has inverse_of",
                        rule.rule_id
                    )))
                }
                (RuleKind::Inverse, None) => {
                    return Err(ExtractError::InvalidRuleSet(format!(
                        "inverse rule {} lacks inverse_of",
                        rule.rule_id
                    )))
                }
                (RuleKind::Inverse, Some(target)) => match self.get(target) {
                    Some(t) if t.kind == RuleKind::Extracted => {}
                    _ => {
                        return Err(ExtractError::InvalidRuleSet(format!(
                            "inverse rule {} points at missing/non-extracted rule {target}",
                            rule.rule_id
                        )))
                    }
                },
                (RuleKind::Extracted, None) => {}
            }
        }
        Ok(())
    }

    /// JSON array form used for the on-disk rules file.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("rule set serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, ExtractError> {
        let set: RuleSet =
            serde_json::from_str(text).map_err(|e| ExtractError::InvalidRuleSet(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    /// Numbered list of every rule, the form the test generator consumes.
    pub fn numbered_list(&self) -> String {
        self.rules
            .iter()
            .map(|r| format!("{}. {}", r.rule_id, r.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// What the prompt is for: the extracted intent, used to build the spec
/// prompt for agreement measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub intent_text: String,
    pub source_put: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("meta-model returned no usable content")]
    EmptyExtraction,
    #[error("inverse rule count mismatch: {expected} extracted rules, {got} reply lines")]
    CountMismatch { expected: usize, got: usize },
    #[error("rule set already contains inverse rules")]
    InversesAlreadyPresent,
    #[error("no extracted rules to work from")]
    NoExtractedRules,
    #[error("invalid rule set: {0}")]
    InvalidRuleSet(String),
    #[error("unparseable verdict for rule {rule_id}: {raw:?}")]
    UnparseableVerdict { rule_id: u32, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Render(#[from] PromptError),
}

/// Gateway + meta-model + policy bundle used by every meta operation.
#[derive(Clone, Copy)]
pub struct MetaContext<'a> {
    pub gateway: &'a Gateway,
    pub model: &'a ModelSpec,
    pub policy: &'a RequestPolicy,
}

impl<'a> MetaContext<'a> {
    pub fn new(gateway: &'a Gateway, model: &'a ModelSpec, policy: &'a RequestPolicy) -> Self {
        MetaContext {
            gateway,
            model,
            policy,
        }
    }

    pub(crate) fn ask(
        &self,
        template: &MetaPromptTemplate,
        bindings: &BTreeMap<String, String>,
    ) -> Result<String, ExtractError> {
        let messages = template.render(bindings)?;
        let exchange = self.gateway.complete(self.model, &messages, self.policy)?;
        Ok(exchange.response.text)
    }
}

pub(crate) fn bindings(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// Split a meta-model reply into statements: one per nonempty line, with
/// leading bullet glyphs and list numbering stripped. Models are told not
/// to emit bullets, but they drift.
pub fn normalize_lines(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(strip_list_markers)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn strip_list_markers(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        for glyph in ["- ", "* ", "+ ", "• ", "◦ ", "· "] {
            if let Some(rest) = s.strip_prefix(glyph) {
                s = rest.trim_start();
            }
        }
        // "1. " / "12) " style numbering
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let after = &s[digits..];
            if let Some(rest) = after
                .strip_prefix(". ")
                .or_else(|| after.strip_prefix(") "))
            {
                s = rest.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Extract the input specification from `put` via the meta-model.
pub fn extract_input_spec(
    ctx: MetaContext,
    put: &PromptUnderTest,
) -> Result<InputSpec, ExtractError> {
    let reply = ctx.ask(
        &templates::input_spec_extract(),
        &bindings(&[("context", put.spec_text())]),
    )?;
    let statements = normalize_lines(&reply);
    if statements.is_empty() {
        return Err(ExtractError::EmptyExtraction);
    }
    Ok(InputSpec {
        statements,
        provenance: Provenance::Extracted,
        source_put: put.id.clone(),
    })
}

/// Extract output rules. With `num_rules` set, the meta-model is asked for
/// at least that many crucial rules; otherwise for all of them.
pub fn extract_output_rules(
    ctx: MetaContext,
    put: &PromptUnderTest,
    num_rules: Option<u32>,
) -> Result<RuleSet, ExtractError> {
    let reply = match num_rules {
        None => ctx.ask(
            &templates::output_rules_all(),
            &bindings(&[("input_data", put.spec_text())]),
        )?,
        Some(n) => ctx.ask(
            &templates::output_rules_limited(),
            &bindings(&[
                ("input_data", put.spec_text()),
                ("num_rules", n.to_string()),
            ]),
        )?,
    };
    let lines = normalize_lines(&reply);
    if lines.is_empty() {
        return Err(ExtractError::EmptyExtraction);
    }
    let rules = lines
        .into_iter()
        .enumerate()
        .map(|(i, text)| OutputRule {
            rule_id: (i + 1) as u32,
            text,
            kind: RuleKind::Extracted,
            inverse_of: None,
            grounded: Groundedness::Unknown,
            groundedness_explanation: None,
        })
        .collect();
    Ok(RuleSet {
        put_id: put.id.clone(),
        rules,
    })
}

/// Ask the meta-model for one contradicting rule per extracted rule, in one
/// request, and append them to the set. The i-th reply line becomes the
/// inverse of the i-th extracted rule; any other arity is an error rather
/// than a silent truncation, since the rule↔inverse linkage feeds metrics.
pub fn invert_rules(ctx: MetaContext, rules: &RuleSet) -> Result<RuleSet, ExtractError> {
    if rules.inverses().next().is_some() {
        return Err(ExtractError::InversesAlreadyPresent);
    }
    let extracted: Vec<&OutputRule> = rules.extracted().collect();
    if extracted.is_empty() {
        return Err(ExtractError::NoExtractedRules);
    }
    let joined = extracted
        .iter()
        .map(|r| r.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let reply = ctx.ask(&templates::inverse_rules(), &bindings(&[("rule", joined)]))?;
    let lines = normalize_lines(&reply);
    if lines.len() != extracted.len() {
        return Err(ExtractError::CountMismatch {
            expected: extracted.len(),
            got: lines.len(),
        });
    }
    let next_id = rules.rules.iter().map(|r| r.rule_id).max().unwrap_or(0) + 1;
    let mut out = rules.clone();
    for (i, text) in lines.into_iter().enumerate() {
        out.rules.push(OutputRule {
            rule_id: next_id + i as u32,
            text,
            kind: RuleKind::Inverse,
            inverse_of: Some(extracted[i].rule_id),
            grounded: Groundedness::Unknown,
            groundedness_explanation: None,
        });
    }
    out.validate()?;
    Ok(out)
}

/// Judge each extracted rule for groundedness in the prompt text. Inverse
/// rules are contradictions by construction and are never judged.
pub fn check_groundedness(
    ctx: MetaContext,
    rules: &RuleSet,
    put: &PromptUnderTest,
) -> Result<RuleSet, ExtractError> {
    let template = templates::groundedness_judge();
    let mut out = rules.clone();
    for rule in out.rules.iter_mut() {
        if rule.kind != RuleKind::Extracted {
            continue;
        }
        let reply = ctx.ask(
            &template,
            &bindings(&[
                ("description", put.spec_text()),
                ("rule", rule.text.clone()),
            ]),
        )?;
        let verdict = parse_verdict(&reply).map_err(|e| match e {
            EvalError::UnparseableVerdict { raw } => ExtractError::UnparseableVerdict {
                rule_id: rule.rule_id,
                raw,
            },
            _ => ExtractError::UnparseableVerdict {
                rule_id: rule.rule_id,
                raw: reply.clone(),
            },
        })?;
        rule.grounded = match verdict.decision {
            Decision::Ok => Groundedness::Grounded,
            Decision::Err => Groundedness::NotGrounded,
        };
        rule.groundedness_explanation = if verdict.explanation.is_empty() {
            None
        } else {
            Some(verdict.explanation)
        };
    }
    Ok(out)
}

/// Extract the prompt's intent; the whole trimmed reply is the task spec.
pub fn extract_task_spec(
    ctx: MetaContext,
    put: &PromptUnderTest,
) -> Result<TaskSpec, ExtractError> {
    let reply = ctx.ask(
        &templates::task_spec_extract(),
        &bindings(&[("prompt", put.spec_text())]),
    )?;
    let intent_text = reply.trim().to_string();
    if intent_text.is_empty() {
        return Err(ExtractError::EmptyExtraction);
    }
    Ok(TaskSpec {
        intent_text,
        source_put: put.id.clone(),
    })
}

/// Deterministically synthesize the spec prompt: task intent followed by
/// the enumerated extracted rules (inverses excluded), with a single-input
/// user message.
pub fn build_spec_prompt(task: &TaskSpec, rules: &RuleSet) -> PromptUnderTest {
    let mut system = task.intent_text.clone();
    system.push_str("\n\nOutput rules:\n");
    for (i, rule) in rules.extracted().enumerate() {
        system.push_str(&format!("{}. {}\n", i + 1, rule.text));
    }
    let system = system.trim_end().to_string();
    PromptUnderTest::synthesize(
        format!("{}-spec", task.source_put),
        format!("{}-spec", task.source_put),
        "synthesized from extracted task and output rules",
        &system,
        "input",
    )
}
