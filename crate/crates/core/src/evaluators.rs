//! LLM-as-judge verdicts: output compliance against the prompt, and test
//! input validity against the input specification.
//!
//! The compliance judge never sees the test input — grading is compliance
//! with the prompt's stated constraints, not correctness for an input — and
//! its prompt carries no pipeline artifacts (no rules, no input spec), so
//! it grades rule-based and baseline tests identically.

use serde::{Deserialize, Serialize};

use crate::extractor::{bindings, InputSpec, MetaContext};
use crate::gateway::GatewayError;
use crate::generator::{TestCase, Validity};
use crate::prompt_store::{templates, Message, PromptError, PromptUnderTest};
use crate::runner::TestRunResult;

/// The judge's binary call, recovered from the terminal `OK`/`ERR` line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Ok,
    Err,
}

/// A parsed judge reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub explanation: String,
    pub judge_model: String,
    pub raw_text: String,
}

/// Decision and explanation before judge attribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictCore {
    pub decision: Decision,
    pub explanation: String,
}

/// One judged execution cell. `compliance` is absent when the run itself
/// errored or the judge reply was unusable; such cells count as
/// unevaluated, never as a guessed verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run: TestRunResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compliance: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<Verdict>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no terminal OK/ERR decision line in judge reply: {raw:?}")]
    UnparseableVerdict { raw: String },
    #[error("run has no output to judge")]
    MissingOutput,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Render(#[from] PromptError),
    #[error(transparent)]
    Extract(#[from] crate::extractor::ExtractError),
}

/// Recover the decision from a judge reply: the last line whose trimmed
/// content is exactly `OK` or `ERR` (case-sensitive) wins, which tolerates
/// verbose judges; everything else is the explanation. No decision line at
/// all is an error — never a guess.
pub fn parse_verdict(raw: &str) -> Result<VerdictCore, EvalError> {
    let lines: Vec<&str> = raw.lines().collect();
    let decision_idx = lines.iter().rposition(|line| {
        let t = line.trim();
        t == "OK" || t == "ERR"
    });
    let Some(idx) = decision_idx else {
        return Err(EvalError::UnparseableVerdict {
            raw: raw.to_string(),
        });
    };
    let decision = if lines[idx].trim() == "OK" {
        Decision::Ok
    } else {
        Decision::Err
    };
    let explanation = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    Ok(VerdictCore {
        decision,
        explanation,
    })
}

/// The messages the compliance judge sees: the prompt text and the output,
/// deliberately not the test input.
pub fn render_compliance_messages(
    put: &PromptUnderTest,
    output_text: &str,
) -> Result<Vec<Message>, PromptError> {
    templates::compliance_judge().render(&bindings(&[
        ("system", put.spec_text()),
        ("result", output_text.to_string()),
    ]))
}

/// Judge whether `run`'s output complies with the prompt.
pub fn judge_compliance(
    ctx: MetaContext,
    put: &PromptUnderTest,
    run: &TestRunResult,
) -> Result<Verdict, EvalError> {
    let output = run.output_text.as_deref().ok_or(EvalError::MissingOutput)?;
    let messages = render_compliance_messages(put, output)?;
    let exchange = ctx.gateway.complete(ctx.model, &messages, ctx.policy)?;
    let core = parse_verdict(&exchange.response.text)?;
    Ok(Verdict {
        decision: core.decision,
        explanation: core.explanation,
        judge_model: ctx.model.id.clone(),
        raw_text: exchange.response.text,
    })
}

/// Judge whether a test input is valid under the input specification.
pub fn judge_validity(
    ctx: MetaContext,
    input_spec: &InputSpec,
    test: &TestCase,
) -> Result<Verdict, EvalError> {
    let messages = templates::input_validity_judge().render(&bindings(&[
        ("input_spec", input_spec.joined()),
        ("test", test.test_input.clone()),
    ]))?;
    let exchange = ctx.gateway.complete(ctx.model, &messages, ctx.policy)?;
    let core = parse_verdict(&exchange.response.text)?;
    Ok(Verdict {
        decision: core.decision,
        explanation: core.explanation,
        judge_model: ctx.model.id.clone(),
        raw_text: exchange.response.text,
    })
}

/// Fold a validity verdict into the test case.
pub fn apply_validity(test: &mut TestCase, verdict: &Verdict) {
    test.validity = match verdict.decision {
        Decision::Ok => Validity::Valid,
        Decision::Err => Validity::Invalid,
    };
    test.validity_explanation = if verdict.explanation.is_empty() {
        None
    } else {
        Some(verdict.explanation.clone())
    };
}
