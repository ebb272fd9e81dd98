//! The four quantitative measures over eval records: % non-compliance,
//! test validity, rule groundedness, and spec agreement. Percentages are
//! exact rationals internally; rounding happens only at display time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evaluators::{Decision, EvalRecord};
use crate::extractor::{Groundedness, RuleKind, RuleSet};
use crate::generator::{GeneratorKind, TestCase, Validity};
use crate::runner::RunTarget;

/// An exact non-negative rational, always stored reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Ratio {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    /// `100 · part / whole` as an exact rational.
    pub fn percent(part: u64, whole: u64) -> Ratio {
        assert!(whole != 0, "zero denominator");
        // u64 arithmetic is safe: part ≤ whole ≤ u64::MAX / 100 in practice,
        // but go through u128 to be thorough.
        let num = 100u128 * part as u128;
        let den = whole as u128;
        let g = gcd_u128(num, den);
        Ratio {
            num: (num / g) as u64,
            den: (den / g) as u64,
        }
    }

    pub fn div_int(self, k: u64) -> Ratio {
        assert!(k != 0);
        Ratio::new(
            self.num,
            self.den.checked_mul(k).expect("denominator overflow"),
        )
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::ops::Add for Ratio {
    type Output = Ratio;

    fn add(self, other: Ratio) -> Ratio {
        let num = self.num as u128 * other.den as u128 + other.num as u128 * self.den as u128;
        let den = self.den as u128 * other.den as u128;
        let g = gcd_u128(num, den);
        Ratio {
            num: (num / g) as u64,
            den: (den / g) as u64,
        }
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}", self.to_f64())
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

fn gcd_u128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Mean of a nonempty list of ratios, exact.
pub fn mean(ratios: &[Ratio]) -> Option<Ratio> {
    if ratios.is_empty() {
        return None;
    }
    let sum = ratios.iter().copied().reduce(|a, b| a + b).unwrap();
    Some(sum.div_int(ratios.len() as u64))
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("slice selects no evaluated records")]
    EmptySlice,
    #[error("no extracted rules have been judged for groundedness")]
    NoJudgedRules,
    #[error("runs are misaligned: {0}")]
    MisalignedRuns(String),
}

/// Record filter. All populated fields must match; rule-kind and validity
/// slicing resolve each record's test through `tests` and `rules`.
#[derive(Debug, Clone, Default)]
pub struct Slice<'a> {
    pub model_id: Option<&'a str>,
    pub generator: Option<GeneratorKind>,
    pub rule_kind: Option<RuleKind>,
    pub target: Option<RunTarget>,
    pub validity: Option<Validity>,
}

/// Test-metadata lookup used when slicing records.
pub struct TestIndex<'a> {
    by_uid: BTreeMap<&'a str, &'a TestCase>,
    rules: Option<&'a RuleSet>,
}

impl<'a> TestIndex<'a> {
    pub fn new(tests: &'a [TestCase], rules: Option<&'a RuleSet>) -> Self {
        TestIndex {
            by_uid: tests.iter().map(|t| (t.test_uid.as_str(), t)).collect(),
            rules,
        }
    }

    pub fn test(&self, uid: &str) -> Option<&'a TestCase> {
        self.by_uid.get(uid).copied()
    }

    fn rule_kind_of(&self, uid: &str) -> Option<RuleKind> {
        let test = self.test(uid)?;
        let rule_id = test.rule_id?;
        self.rules.and_then(|rs| rs.get(rule_id)).map(|r| r.kind)
    }

    fn matches(&self, record: &EvalRecord, slice: &Slice) -> bool {
        if let Some(model) = slice.model_id {
            if record.run.model_id != model {
                return false;
            }
        }
        if let Some(target) = slice.target {
            if record.run.target != target {
                return false;
            }
        }
        if slice.generator.is_some() || slice.rule_kind.is_some() || slice.validity.is_some() {
            let Some(test) = self.test(&record.run.test_uid) else {
                return false;
            };
            if let Some(generator) = slice.generator {
                if test.generator != generator {
                    return false;
                }
            }
            if let Some(validity) = slice.validity {
                if test.validity != validity {
                    return false;
                }
            }
            if let Some(kind) = slice.rule_kind {
                if self.rule_kind_of(&record.run.test_uid) != Some(kind) {
                    return false;
                }
            }
        }
        true
    }
}

/// Evaluated / non-compliant / unevaluated counts within a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SliceCounts {
    pub n_evaluated: u64,
    pub n_noncompliant: u64,
    pub n_unevaluated: u64,
}

pub fn count_slice(records: &[EvalRecord], index: &TestIndex, slice: &Slice) -> SliceCounts {
    let mut counts = SliceCounts::default();
    for record in records {
        if !index.matches(record, slice) {
            continue;
        }
        match &record.compliance {
            Some(verdict) => {
                counts.n_evaluated += 1;
                if verdict.decision == Decision::Err {
                    counts.n_noncompliant += 1;
                }
            }
            None => counts.n_unevaluated += 1,
        }
    }
    counts
}

/// `100 · non-compliant / evaluated` within the slice. Unevaluated cells
/// (run errors, unusable judge replies) are excluded from the denominator.
pub fn noncompliance_pct(
    records: &[EvalRecord],
    index: &TestIndex,
    slice: &Slice,
) -> Result<Ratio, MetricsError> {
    let counts = count_slice(records, index, slice);
    if counts.n_evaluated == 0 {
        return Err(MetricsError::EmptySlice);
    }
    Ok(Ratio::percent(counts.n_noncompliant, counts.n_evaluated))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidityStats {
    pub n_valid: u64,
    pub n_invalid: u64,
    pub n_unknown: u64,
}

pub fn validity_stats(tests: &[TestCase]) -> ValidityStats {
    let mut stats = ValidityStats::default();
    for test in tests {
        match test.validity {
            Validity::Valid => stats.n_valid += 1,
            Validity::Invalid => stats.n_invalid += 1,
            Validity::Unknown => stats.n_unknown += 1,
        }
    }
    stats
}

/// Of all non-compliant evaluated cells, the fraction whose test is valid.
/// Cross-metric join reported alongside validity.
pub fn noncompliant_valid_pct(records: &[EvalRecord], index: &TestIndex) -> Option<Ratio> {
    let mut noncompliant = 0u64;
    let mut noncompliant_valid = 0u64;
    for record in records {
        let Some(verdict) = &record.compliance else {
            continue;
        };
        if verdict.decision != Decision::Err {
            continue;
        }
        noncompliant += 1;
        if index
            .test(&record.run.test_uid)
            .is_some_and(|t| t.validity == Validity::Valid)
        {
            noncompliant_valid += 1;
        }
    }
    if noncompliant == 0 {
        None
    } else {
        Some(Ratio::percent(noncompliant_valid, noncompliant))
    }
}

/// `100 · grounded / judged` over extracted rules only; inverse rules are
/// never judged and never counted.
pub fn groundedness_rate(rules: &RuleSet) -> Result<Ratio, MetricsError> {
    let mut grounded = 0u64;
    let mut judged = 0u64;
    for rule in rules.rules.iter().filter(|r| r.kind == RuleKind::Extracted) {
        match rule.grounded {
            Groundedness::Grounded => {
                grounded += 1;
                judged += 1;
            }
            Groundedness::NotGrounded => judged += 1,
            Groundedness::Unknown => {}
        }
    }
    if judged == 0 {
        return Err(MetricsError::NoJudgedRules);
    }
    Ok(Ratio::percent(grounded, judged))
}

/// Behavioral agreement between the original prompt and the spec prompt
/// over one shared test suite: cosine similarity of per-(test, model, repeat)
/// non-compliance vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecAgreement {
    pub put_id: String,
    pub vector_put: Vec<u8>,
    pub vector_spec: Vec<u8>,
    /// Cells dropped pairwise because either side was unevaluated.
    pub n_dropped: u64,
    pub score: f64,
}

/// Cosine similarity of two equal-length binary vectors. Two all-zero
/// vectors agree perfectly (1.0); zero against nonzero is 0.0.
pub fn binary_cosine(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "vector length mismatch");
    let dot: u64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as u64) * (*y as u64))
        .sum();
    let na: u64 = a.iter().map(|x| *x as u64).sum();
    let nb: u64 = b.iter().map(|x| *x as u64).sum();
    match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        // single sqrt over the integer product keeps perfect squares exact
        _ => dot as f64 / ((na as u128 * nb as u128) as f64).sqrt(),
    }
}

/// Align two record sets on (test_uid, model_id, repeat) cells and score
/// their agreement. Both sides must grade the same cell set; cells
/// unevaluated on either side are dropped pairwise.
pub fn spec_agreement(
    put_id: &str,
    put_records: &[EvalRecord],
    spec_records: &[EvalRecord],
) -> Result<SpecAgreement, MetricsError> {
    let collect = |records: &[EvalRecord]| -> BTreeMap<(String, String, u32), Option<bool>> {
        records
            .iter()
            .map(|r| {
                (
                    (r.run.test_uid.clone(), r.run.model_id.clone(), r.run.repeat),
                    r.compliance.as_ref().map(|v| v.decision == Decision::Err),
                )
            })
            .collect()
    };
    let put_cells = collect(put_records);
    let spec_cells = collect(spec_records);
    if put_cells.len() != put_records.len() || spec_cells.len() != spec_records.len() {
        return Err(MetricsError::MisalignedRuns(
            "duplicate (test, model, repeat) cells".into(),
        ));
    }
    if put_cells.keys().ne(spec_cells.keys()) {
        return Err(MetricsError::MisalignedRuns(
            "the two runs grade different (test, model, repeat) cells".into(),
        ));
    }
    let mut vector_put = Vec::new();
    let mut vector_spec = Vec::new();
    let mut n_dropped = 0u64;
    for (key, put_value) in &put_cells {
        match (put_value, spec_cells[key]) {
            (Some(p), Some(s)) => {
                vector_put.push(*p as u8);
                vector_spec.push(s as u8);
            }
            _ => n_dropped += 1,
        }
    }
    let score = binary_cosine(&vector_put, &vector_spec);
    Ok(SpecAgreement {
        put_id: put_id.to_string(),
        vector_put,
        vector_spec,
        n_dropped,
        score,
    })
}

// --- aggregate run metrics (the metrics.json payload) ---

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoncomplianceEntry {
    pub model_id: String,
    pub generator: GeneratorKind,
    pub n_noncompliant: u64,
    pub n_evaluated: u64,
    pub n_unevaluated: u64,
    /// Convenience float of the exact counts above.
    pub pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleKindEntry {
    pub model_id: String,
    pub rule_kind: RuleKind,
    pub n_noncompliant: u64,
    pub n_evaluated: u64,
    pub n_unevaluated: u64,
    pub pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundednessSummary {
    pub n_grounded: u64,
    pub n_not_grounded: u64,
    pub n_unjudged: u64,
    pub pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecAgreementSummary {
    pub score: f64,
    pub n_cells: u64,
    pub n_dropped: u64,
}

/// Everything `metrics.json` holds for one run. Non-compliance appears in
/// two denominators: over all tests and over judged-valid tests only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub put_id: String,
    pub noncompliance: Vec<NoncomplianceEntry>,
    pub noncompliance_valid_only: Vec<NoncomplianceEntry>,
    pub rule_kind_noncompliance: Vec<RuleKindEntry>,
    pub validity: ValidityStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noncompliant_valid_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundedness: Option<GroundednessSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_agreement: Option<SpecAgreementSummary>,
}

/// Compute the full metrics payload. Model ids are emitted in sorted order
/// so the payload is deterministic.
pub fn compute_run_metrics(
    put_id: &str,
    tests: &[TestCase],
    rules: Option<&RuleSet>,
    records: &[EvalRecord],
    agreement: Option<&SpecAgreement>,
) -> RunMetrics {
    let index = TestIndex::new(tests, rules);
    let mut model_ids: Vec<String> = records
        .iter()
        .filter(|r| r.run.target == RunTarget::Put)
        .map(|r| r.run.model_id.clone())
        .collect();
    model_ids.sort();
    model_ids.dedup();

    let noncompliance_entries = |validity: Option<Validity>| {
        let mut entries = Vec::new();
        for model_id in &model_ids {
            for generator in [GeneratorKind::RuleBased, GeneratorKind::Baseline] {
                let slice = Slice {
                    model_id: Some(model_id),
                    generator: Some(generator),
                    rule_kind: None,
                    target: Some(RunTarget::Put),
                    validity,
                };
                let counts = count_slice(records, &index, &slice);
                if counts.n_evaluated == 0 && counts.n_unevaluated == 0 {
                    continue;
                }
                entries.push(NoncomplianceEntry {
                    model_id: model_id.clone(),
                    generator,
                    n_noncompliant: counts.n_noncompliant,
                    n_evaluated: counts.n_evaluated,
                    n_unevaluated: counts.n_unevaluated,
                    pct: (counts.n_evaluated > 0).then(|| {
                        Ratio::percent(counts.n_noncompliant, counts.n_evaluated).to_f64()
                    }),
                });
            }
        }
        entries
    };
    let noncompliance = noncompliance_entries(None);
    let noncompliance_valid_only = noncompliance_entries(Some(Validity::Valid));

    let mut rule_kind_noncompliance = Vec::new();
    if rules.is_some() {
        for model_id in &model_ids {
            for kind in [RuleKind::Extracted, RuleKind::Inverse] {
                let slice = Slice {
                    model_id: Some(model_id),
                    generator: Some(GeneratorKind::RuleBased),
                    rule_kind: Some(kind),
                    target: Some(RunTarget::Put),
                    validity: None,
                };
                let counts = count_slice(records, &index, &slice);
                if counts.n_evaluated == 0 && counts.n_unevaluated == 0 {
                    continue;
                }
                rule_kind_noncompliance.push(RuleKindEntry {
                    model_id: model_id.clone(),
                    rule_kind: kind,
                    n_noncompliant: counts.n_noncompliant,
                    n_evaluated: counts.n_evaluated,
                    n_unevaluated: counts.n_unevaluated,
                    pct: (counts.n_evaluated > 0).then(|| {
                        Ratio::percent(counts.n_noncompliant, counts.n_evaluated).to_f64()
                    }),
                });
            }
        }
    }

    let groundedness = rules.map(|rs| {
        let mut summary = GroundednessSummary {
            n_grounded: 0,
            n_not_grounded: 0,
            n_unjudged: 0,
            pct: None,
        };
        for rule in rs.rules.iter().filter(|r| r.kind == RuleKind::Extracted) {
            match rule.grounded {
                Groundedness::Grounded => summary.n_grounded += 1,
                Groundedness::NotGrounded => summary.n_not_grounded += 1,
                Groundedness::Unknown => summary.n_unjudged += 1,
            }
        }
        let judged = summary.n_grounded + summary.n_not_grounded;
        if judged > 0 {
            summary.pct = Some(Ratio::percent(summary.n_grounded, judged).to_f64());
        }
        summary
    });

    RunMetrics {
        put_id: put_id.to_string(),
        noncompliance,
        noncompliance_valid_only,
        rule_kind_noncompliance,
        validity: validity_stats(tests),
        noncompliant_valid_pct: noncompliant_valid_pct(records, &index).map(Ratio::to_f64),
        groundedness,
        spec_agreement: agreement.map(|a| SpecAgreementSummary {
            score: a.score,
            n_cells: a.vector_put.len() as u64,
            n_dropped: a.n_dropped,
        }),
    }
}
