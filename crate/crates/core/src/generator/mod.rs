//! Test-case generation: rule-targeted tests from the extracted
//! specification, and a zero-shot baseline from the prompt alone.

pub mod csv;

use serde::{Deserialize, Serialize};

use crate::extractor::{bindings, InputSpec, MetaContext, RuleKind, RuleSet};
use crate::gateway::GatewayError;
use crate::prompt_store::{templates, PromptError, PromptUnderTest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    RuleBased,
    Baseline,
}

impl GeneratorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GeneratorKind::RuleBased => "rule_based",
            GeneratorKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Unknown,
    Valid,
    Invalid,
}

impl Validity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Validity::Unknown => "unknown",
            Validity::Valid => "valid",
            Validity::Invalid => "invalid",
        }
    }
}

/// One generated test input, linked to the rule that motivated it when the
/// rule-based generator produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub test_uid: String,
    pub generator: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<u32>,
    pub seq: u32,
    pub test_input: String,
    /// Stored verbatim from the generator, never used for grading:
    /// evaluation checks compliance, not correctness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_output_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub validity: Validity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_explanation: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("no parseable CSV rows in generator reply ({issues} rejected)")]
    CsvUnparseable { issues: usize },
    #[error("baseline generator produced no tests")]
    EmptyGeneration,
    #[error("test {test_uid} references unknown rule {rule_id}")]
    DanglingRuleId { test_uid: String, rule_id: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Render(#[from] PromptError),
    #[error(transparent)]
    Extract(#[from] crate::extractor::ExtractError),
}

/// Outcome of one rule-based generation request. Under-delivery relative to
/// `expected_count` is recorded, not fatal; `skipped` carries per-row
/// diagnostics for malformed or unattributable rows.
#[derive(Debug, Clone)]
pub struct RuleTestGeneration {
    pub tests: Vec<TestCase>,
    pub skipped: Vec<csv::RowIssue>,
    pub expected_count: usize,
}

const CSV_HEADER: [&str; 5] = [
    "ruleid",
    "testid",
    "testinput",
    "expectedoutput",
    "reasoning",
];

fn is_header_row(fields: &[String]) -> bool {
    fields.len() == CSV_HEADER.len()
        && fields
            .iter()
            .zip(CSV_HEADER.iter())
            .all(|(f, h)| f.trim().trim_matches('"').eq_ignore_ascii_case(h))
}

fn none_if_empty(s: &str) -> Option<String> {
    let t = s.trim();
    if t.is_empty() {
        None
    } else {
        Some(t.to_string())
    }
}

/// Generate per-rule tests: one request carrying the input spec, the prompt
/// text, and every rule (extracted and inverse) as a numbered list; the
/// reply is the 5-column CSV contract.
pub fn generate_rule_tests(
    ctx: MetaContext,
    put: &PromptUnderTest,
    input_spec: &InputSpec,
    rules: &RuleSet,
    per_rule: u32,
) -> Result<RuleTestGeneration, GenerateError> {
    assert!(per_rule >= 1, "per_rule must be at least 1");
    let num_rules = rules.rules.len();
    let expected_count = num_rules * per_rule as usize;
    let reply = ctx.ask(
        &templates::rule_test_gen(),
        &bindings(&[
            ("num", per_rule.to_string()),
            ("input_spec", input_spec.joined()),
            ("context", put.spec_text()),
            ("rule", rules.numbered_list()),
            ("num_rules", num_rules.to_string()),
            ("total_tests", expected_count.to_string()),
        ]),
    )?;

    let body = csv::strip_code_fences(&reply);
    let (rows, mut skipped) = csv::parse_rows(body, 5);

    let mut tests = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if i == 0 && is_header_row(&row.fields) {
            continue;
        }
        let rule_id: u32 = match row.fields[0].trim().parse() {
            Ok(id) => id,
            Err(_) => {
                skipped.push(csv::RowIssue {
                    line: row.line,
                    reason: format!("ruleid {:?} is not an integer", row.fields[0]),
                });
                continue;
            }
        };
        if rules.get(rule_id).is_none() {
            skipped.push(csv::RowIssue {
                line: row.line,
                reason: format!("ruleid {rule_id} does not exist in the rule set"),
            });
            continue;
        }
        let seq: u32 = row.fields[1]
            .trim()
            .parse()
            .unwrap_or((tests.len() + 1) as u32);
        let test_input = row.fields[2].clone();
        if test_input.trim().is_empty() {
            skipped.push(csv::RowIssue {
                line: row.line,
                reason: "empty testinput".into(),
            });
            continue;
        }
        tests.push(TestCase {
            test_uid: format!("rb-{:03}", tests.len() + 1),
            generator: GeneratorKind::RuleBased,
            rule_id: Some(rule_id),
            seq,
            test_input,
            expected_output_hint: none_if_empty(&row.fields[3]),
            reasoning: none_if_empty(&row.fields[4]),
            validity: Validity::Unknown,
            validity_explanation: None,
        });
    }

    if tests.is_empty() {
        return Err(GenerateError::CsvUnparseable {
            issues: skipped.len(),
        });
    }
    Ok(RuleTestGeneration {
        tests,
        skipped,
        expected_count,
    })
}

/// Zero-shot baseline: the generator sees only the prompt and separates
/// test cases with `===` lines.
pub fn generate_baseline_tests(
    ctx: MetaContext,
    put: &PromptUnderTest,
    num: u32,
) -> Result<Vec<TestCase>, GenerateError> {
    assert!(num >= 1, "num must be at least 1");
    let reply = ctx.ask(
        &templates::baseline_test_gen(),
        &bindings(&[("num", num.to_string()), ("prompt", put.spec_text())]),
    )?;
    let body = csv::strip_code_fences(&reply);

    let mut tests = Vec::new();
    for chunk in split_on_delimiter(body) {
        let input = chunk.trim();
        if input.is_empty() {
            continue;
        }
        tests.push(TestCase {
            test_uid: format!("bl-{:03}", tests.len() + 1),
            generator: GeneratorKind::Baseline,
            rule_id: None,
            seq: (tests.len() + 1) as u32,
            test_input: input.to_string(),
            expected_output_hint: None,
            reasoning: None,
            validity: Validity::Unknown,
            validity_explanation: None,
        });
    }
    if tests.is_empty() {
        return Err(GenerateError::EmptyGeneration);
    }
    Ok(tests)
}

/// Split on lines that are exactly `===` (ignoring surrounding whitespace).
fn split_on_delimiter(text: &str) -> Vec<String> {
    let mut chunks = vec![String::new()];
    for line in text.lines() {
        if line.trim() == "===" {
            chunks.push(String::new());
        } else {
            let current = chunks.last_mut().expect("nonempty");
            if !current.is_empty() {
                current.push('\n');
            }
            current.push_str(line);
        }
    }
    chunks
}

/// Tests generated from extracted rules vs from inverse rules. Baseline
/// tests belong to neither side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleKindPartition<'a> {
    pub from_extracted: Vec<&'a TestCase>,
    pub from_inverse: Vec<&'a TestCase>,
}

/// Stable partition of rule-based tests by the kind of rule they target.
pub fn partition_by_rule_kind<'a>(
    tests: &'a [TestCase],
    rules: &RuleSet,
) -> Result<RuleKindPartition<'a>, GenerateError> {
    let mut from_extracted = Vec::new();
    let mut from_inverse = Vec::new();
    for test in tests {
        if test.generator != GeneratorKind::RuleBased {
            continue;
        }
        let rule_id = test.rule_id.expect("rule_based tests carry rule_id");
        match rules.get(rule_id) {
            Some(rule) if rule.kind == RuleKind::Extracted => from_extracted.push(test),
            Some(_) => from_inverse.push(test),
            None => {
                return Err(GenerateError::DanglingRuleId {
                    test_uid: test.test_uid.clone(),
                    rule_id,
                })
            }
        }
    }
    Ok(RuleKindPartition {
        from_extracted,
        from_inverse,
    })
}

/// The 5-column interchange CSV export of a test list.
pub fn tests_to_csv(tests: &[TestCase]) -> String {
    let mut out = String::from("ruleid,testid,testinput,expectedoutput,reasoning\n");
    for test in tests {
        let fields = vec![
            test.rule_id.map_or_else(String::new, |id| id.to_string()),
            test.seq.to_string(),
            test.test_input.clone(),
            test.expected_output_hint.clone().unwrap_or_default(),
            test.reasoning.clone().unwrap_or_default(),
        ];
        out.push_str(&csv::serialize_row(&fields));
        out.push('\n');
    }
    out
}
