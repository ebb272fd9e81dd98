//! Render run metrics as tables and documents. Markdown is the human
//! format; CSV and JSON are machine formats (chart data goes out as CSV
//! for external tools). Rendering is deterministic: identical inputs
//! produce identical bytes, and every number comes from the metrics
//! payload with only display rounding applied here.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::evaluators::{Decision, EvalRecord};
use crate::extractor::RuleSet;
use crate::generator::{GeneratorKind, TestCase};
use crate::metrics::{mean, Ratio, RunMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSection {
    NoncomplianceTable,
    RulekindTable,
    ValidityChartData,
    GroundednessTable,
    SpecAgreement,
    PerTestDrilldown,
}

impl ReportSection {
    pub const ALL: [ReportSection; 6] = [
        ReportSection::NoncomplianceTable,
        ReportSection::RulekindTable,
        ReportSection::ValidityChartData,
        ReportSection::GroundednessTable,
        ReportSection::SpecAgreement,
        ReportSection::PerTestDrilldown,
    ];
}

/// What to render.
#[derive(Debug, Clone)]
pub struct ReportSpec {
    pub run_id: String,
    pub formats: BTreeSet<ReportFormat>,
    pub sections: BTreeSet<ReportSection>,
}

impl ReportSpec {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.formats.is_empty() || self.sections.is_empty() {
            return Err(ReportError::EmptySpec);
        }
        Ok(())
    }
}

/// Everything known about one prompt's run, as rendering input.
#[derive(Debug, Clone)]
pub struct PromptRunData {
    pub put_id: String,
    pub metrics: RunMetrics,
    pub tests: Vec<TestCase>,
    pub rules: Option<RuleSet>,
    pub records: Vec<EvalRecord>,
}

/// One rendered file, relative to the report directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFile {
    pub path: String,
    pub content: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("report spec needs at least one format and one section")]
    EmptySpec,
    #[error("section {section:?} has no data for prompt {put_id}")]
    MissingSectionData {
        section: ReportSection,
        put_id: String,
    },
}

fn fmt_pct(pct: Option<f64>) -> String {
    match pct {
        Some(v) => format!("{v:.1}"),
        None => "-".to_string(),
    }
}

fn fmt_ratio(r: Option<Ratio>) -> String {
    fmt_pct(r.map(Ratio::to_f64))
}

/// Render the requested sections/formats. Returns files keyed by relative
/// path; the caller owns writing them under `report/`.
pub fn render_report(
    spec: &ReportSpec,
    data: &[PromptRunData],
) -> Result<Vec<ReportFile>, ReportError> {
    spec.validate()?;
    check_section_data(spec, data)?;

    let mut files = Vec::new();

    if spec.formats.contains(&ReportFormat::Markdown) {
        files.push(ReportFile {
            path: "report.md".into(),
            content: render_markdown(spec, data),
        });
    }
    if spec.formats.contains(&ReportFormat::Csv) {
        for section in &spec.sections {
            if let Some(file) = render_csv_section(*section, data) {
                files.push(file);
            }
        }
    }
    if spec.formats.contains(&ReportFormat::Json) {
        let all: Vec<&RunMetrics> = data.iter().map(|d| &d.metrics).collect();
        let mut content = serde_json::to_string_pretty(&all).expect("metrics serialize");
        content.push('\n');
        files.push(ReportFile {
            path: "report.json".into(),
            content,
        });
    }
    Ok(files)
}

fn check_section_data(spec: &ReportSpec, data: &[PromptRunData]) -> Result<(), ReportError> {
    for section in &spec.sections {
        for prompt in data {
            let missing = match section {
                ReportSection::NoncomplianceTable => prompt.metrics.noncompliance.is_empty(),
                ReportSection::RulekindTable => prompt.metrics.rule_kind_noncompliance.is_empty(),
                ReportSection::ValidityChartData => prompt.tests.is_empty(),
                ReportSection::GroundednessTable => prompt.metrics.groundedness.is_none(),
                ReportSection::SpecAgreement => prompt.metrics.spec_agreement.is_none(),
                ReportSection::PerTestDrilldown => prompt.tests.is_empty(),
            };
            if missing {
                return Err(ReportError::MissingSectionData {
                    section: *section,
                    put_id: prompt.put_id.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Sorted model ids appearing in any prompt's noncompliance entries.
fn model_columns(data: &[PromptRunData]) -> Vec<String> {
    let mut ids: BTreeSet<String> = BTreeSet::new();
    for prompt in data {
        for entry in &prompt.metrics.noncompliance {
            ids.insert(entry.model_id.clone());
        }
        for entry in &prompt.metrics.rule_kind_noncompliance {
            ids.insert(entry.model_id.clone());
        }
    }
    ids.into_iter().collect()
}

fn noncompliance_cell(
    prompt: &PromptRunData,
    model: &str,
    generator: GeneratorKind,
) -> Option<Ratio> {
    prompt
        .metrics
        .noncompliance
        .iter()
        .find(|e| e.model_id == model && e.generator == generator && e.n_evaluated > 0)
        .map(|e| Ratio::percent(e.n_noncompliant, e.n_evaluated))
}

fn rulekind_cell(
    prompt: &PromptRunData,
    model: &str,
    kind: crate::extractor::RuleKind,
) -> Option<Ratio> {
    prompt
        .metrics
        .rule_kind_noncompliance
        .iter()
        .find(|e| e.model_id == model && e.rule_kind == kind && e.n_evaluated > 0)
        .map(|e| Ratio::percent(e.n_noncompliant, e.n_evaluated))
}

fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str("|---");
    for _ in 1..header.len() {
        out.push_str("|---:");
    }
    out.push_str("|\n");
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// Prompts × (model × generator) percentage table with a trailing exact
/// mean row.
fn noncompliance_markdown(data: &[PromptRunData]) -> String {
    let models = model_columns(data);
    let mut header = vec!["Prompt".to_string()];
    for model in &models {
        header.push(format!("{model} method"));
        header.push(format!("{model} baseline"));
    }
    let mut rows = Vec::new();
    for prompt in data {
        let mut row = vec![prompt.put_id.clone()];
        for model in &models {
            row.push(fmt_ratio(noncompliance_cell(
                prompt,
                model,
                GeneratorKind::RuleBased,
            )));
            row.push(fmt_ratio(noncompliance_cell(
                prompt,
                model,
                GeneratorKind::Baseline,
            )));
        }
        rows.push(row);
    }
    let mut avg_row = vec!["Average".to_string()];
    for model in &models {
        for generator in [GeneratorKind::RuleBased, GeneratorKind::Baseline] {
            let cells: Vec<Ratio> = data
                .iter()
                .filter_map(|p| noncompliance_cell(p, model, generator))
                .collect();
            avg_row.push(fmt_ratio(mean(&cells)));
        }
    }
    rows.push(avg_row);
    markdown_table(&header, &rows)
}

/// Prompts × (model × {RL, Inv}) table: tests targeting extracted rules
/// vs tests targeting their inverses.
fn rulekind_markdown(data: &[PromptRunData]) -> String {
    use crate::extractor::RuleKind;
    let models = model_columns(data);
    let mut header = vec!["Prompt".to_string()];
    for model in &models {
        header.push(format!("{model} RL"));
        header.push(format!("{model} Inv"));
    }
    let mut rows = Vec::new();
    for prompt in data {
        let mut row = vec![prompt.put_id.clone()];
        for model in &models {
            row.push(fmt_ratio(rulekind_cell(prompt, model, RuleKind::Extracted)));
            row.push(fmt_ratio(rulekind_cell(prompt, model, RuleKind::Inverse)));
        }
        rows.push(row);
    }
    let mut avg_row = vec!["Average".to_string()];
    for model in &models {
        for kind in [RuleKind::Extracted, RuleKind::Inverse] {
            let cells: Vec<Ratio> = data
                .iter()
                .filter_map(|p| rulekind_cell(p, model, kind))
                .collect();
            avg_row.push(fmt_ratio(mean(&cells)));
        }
    }
    rows.push(avg_row);
    markdown_table(&header, &rows)
}

fn validity_markdown(data: &[PromptRunData]) -> String {
    let header = vec![
        "Prompt".to_string(),
        "valid".to_string(),
        "invalid".to_string(),
        "unknown".to_string(),
    ];
    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|p| {
            vec![
                p.put_id.clone(),
                p.metrics.validity.n_valid.to_string(),
                p.metrics.validity.n_invalid.to_string(),
                p.metrics.validity.n_unknown.to_string(),
            ]
        })
        .collect();
    markdown_table(&header, &rows)
}

fn groundedness_markdown(data: &[PromptRunData]) -> String {
    let header = vec![
        "Prompt".to_string(),
        "grounded".to_string(),
        "not grounded".to_string(),
        "unjudged".to_string(),
        "rate".to_string(),
    ];
    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|p| {
            let g = p.metrics.groundedness.as_ref().expect("checked");
            vec![
                p.put_id.clone(),
                g.n_grounded.to_string(),
                g.n_not_grounded.to_string(),
                g.n_unjudged.to_string(),
                fmt_pct(g.pct),
            ]
        })
        .collect();
    markdown_table(&header, &rows)
}

fn spec_agreement_markdown(data: &[PromptRunData]) -> String {
    let header = vec![
        "Prompt".to_string(),
        "agreement".to_string(),
        "cells".to_string(),
        "dropped".to_string(),
    ];
    let rows: Vec<Vec<String>> = data
        .iter()
        .map(|p| {
            let a = p.metrics.spec_agreement.as_ref().expect("checked");
            vec![
                p.put_id.clone(),
                format!("{:.3}", a.score),
                a.n_cells.to_string(),
                a.n_dropped.to_string(),
            ]
        })
        .collect();
    markdown_table(&header, &rows)
}

fn drilldown_markdown(data: &[PromptRunData]) -> String {
    let mut out = String::new();
    for prompt in data {
        for test in &prompt.tests {
            out.push_str(&format!(
                "### {} / {}\n\n- generator: {}\n",
                prompt.put_id,
                test.test_uid,
                test.generator.as_str()
            ));
            if let (Some(rule_id), Some(rules)) = (test.rule_id, prompt.rules.as_ref()) {
                if let Some(rule) = rules.get(rule_id) {
                    out.push_str(&format!("- rule {}: {}\n", rule_id, rule.text));
                }
            }
            out.push_str(&format!("- validity: {}\n", test.validity.as_str()));
            out.push_str(&format!(
                "- input: `{}`\n",
                test.test_input.replace('`', "'")
            ));
            for record in prompt
                .records
                .iter()
                .filter(|r| r.run.test_uid == test.test_uid)
            {
                let verdict = match (&record.compliance, &record.run.error) {
                    (Some(v), _) => match v.decision {
                        Decision::Ok => "compliant".to_string(),
                        Decision::Err => "non-compliant".to_string(),
                    },
                    (None, Some(e)) => format!("run error: {e}"),
                    (None, None) => "unevaluated".to_string(),
                };
                out.push_str(&format!(
                    "- {} [{}] -> {}",
                    record.run.model_id,
                    record.run.target.as_str(),
                    verdict
                ));
                if let Some(output) = &record.run.output_text {
                    out.push_str(&format!("; output: `{}`", output.replace('`', "'")));
                }
                if let Some(v) = &record.compliance {
                    if !v.explanation.is_empty() {
                        out.push_str(&format!(
                            "; explanation: {}",
                            v.explanation.replace('\n', " ")
                        ));
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    out
}

fn render_markdown(spec: &ReportSpec, data: &[PromptRunData]) -> String {
    let mut out = format!("# Run report: {}\n", spec.run_id);
    for section in &spec.sections {
        let (title, body) = match section {
            ReportSection::NoncomplianceTable => (
                "Test non-compliance (%) by prompt, model, and generator",
                noncompliance_markdown(data),
            ),
            ReportSection::RulekindTable => (
                "Test non-compliance (%) for rule (RL) vs inverse-rule (Inv) tests",
                rulekind_markdown(data),
            ),
            ReportSection::ValidityChartData => ("Test validity", validity_markdown(data)),
            ReportSection::GroundednessTable => ("Rule groundedness", groundedness_markdown(data)),
            ReportSection::SpecAgreement => ("Spec agreement", spec_agreement_markdown(data)),
            ReportSection::PerTestDrilldown => ("Per-test drilldown", drilldown_markdown(data)),
        };
        out.push_str(&format!("\n## {title}\n\n"));
        out.push_str(&body);
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    fields
        .iter()
        .map(|f| csv_escape(f))
        .collect::<Vec<_>>()
        .join(",")
}

fn render_csv_section(section: ReportSection, data: &[PromptRunData]) -> Option<ReportFile> {
    let (path, header, rows): (&str, &[&str], Vec<Vec<String>>) = match section {
        ReportSection::NoncomplianceTable => {
            let mut rows = Vec::new();
            for prompt in data {
                for entry in &prompt.metrics.noncompliance {
                    rows.push(vec![
                        prompt.put_id.clone(),
                        entry.model_id.clone(),
                        entry.generator.as_str().to_string(),
                        entry.n_noncompliant.to_string(),
                        entry.n_evaluated.to_string(),
                        entry.n_unevaluated.to_string(),
                        fmt_pct(entry.pct),
                    ]);
                }
            }
            (
                "noncompliance.csv",
                &[
                    "prompt",
                    "model",
                    "generator",
                    "n_noncompliant",
                    "n_evaluated",
                    "n_unevaluated",
                    "pct",
                ],
                rows,
            )
        }
        ReportSection::RulekindTable => {
            let mut rows = Vec::new();
            for prompt in data {
                for entry in &prompt.metrics.rule_kind_noncompliance {
                    let kind = match entry.rule_kind {
                        crate::extractor::RuleKind::Extracted => "rule",
                        crate::extractor::RuleKind::Inverse => "inverse",
                    };
                    rows.push(vec![
                        prompt.put_id.clone(),
                        entry.model_id.clone(),
                        kind.to_string(),
                        entry.n_noncompliant.to_string(),
                        entry.n_evaluated.to_string(),
                        entry.n_unevaluated.to_string(),
                        fmt_pct(entry.pct),
                    ]);
                }
            }
            (
                "rulekind.csv",
                &[
                    "prompt",
                    "model",
                    "rule_kind",
                    "n_noncompliant",
                    "n_evaluated",
                    "n_unevaluated",
                    "pct",
                ],
                rows,
            )
        }
        ReportSection::ValidityChartData => {
            let rows = data
                .iter()
                .map(|p| {
                    vec![
                        p.put_id.clone(),
                        p.metrics.validity.n_valid.to_string(),
                        p.metrics.validity.n_invalid.to_string(),
                        p.metrics.validity.n_unknown.to_string(),
                    ]
                })
                .collect();
            (
                "validity.csv",
                &["prompt", "n_valid", "n_invalid", "n_unknown"],
                rows,
            )
        }
        ReportSection::GroundednessTable => {
            let rows = data
                .iter()
                .map(|p| {
                    let g = p.metrics.groundedness.as_ref().expect("checked");
                    vec![
                        p.put_id.clone(),
                        g.n_grounded.to_string(),
                        g.n_not_grounded.to_string(),
                        g.n_unjudged.to_string(),
                        fmt_pct(g.pct),
                    ]
                })
                .collect();
            (
                "groundedness.csv",
                &[
                    "prompt",
                    "n_grounded",
                    "n_not_grounded",
                    "n_unjudged",
                    "pct",
                ],
                rows,
            )
        }
        ReportSection::SpecAgreement => {
            let rows = data
                .iter()
                .map(|p| {
                    let a = p.metrics.spec_agreement.as_ref().expect("checked");
                    vec![
                        p.put_id.clone(),
                        format!("{:.6}", a.score),
                        a.n_cells.to_string(),
                        a.n_dropped.to_string(),
                    ]
                })
                .collect();
            (
                "spec_agreement.csv",
                &["prompt", "score", "n_cells", "n_dropped"],
                rows,
            )
        }
        ReportSection::PerTestDrilldown => return None, // markdown-only section
    };
    let mut content = header.join(",");
    content.push('\n');
    for row in rows {
        content.push_str(&csv_line(&row));
        content.push('\n');
    }
    Some(ReportFile {
        path: path.to_string(),
        content,
    })
}
