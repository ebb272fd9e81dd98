//! Execute every test case against every model under test.
//!
//! Per-cell failures become error records, never aborts, and the result
//! list is always ordered (test, model, repeat) regardless of how cells
//! were scheduled.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::gateway::{cache_key, Gateway, ModelSpec, RequestPolicy, TokenUsage};
use crate::generator::TestCase;
use crate::prompt_store::PromptUnderTest;

/// Which prompt a result was produced against. The spec prompt target
/// exists for agreement measurement; everything else runs against the PUT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunTarget {
    #[default]
    Put,
    Spec,
}

impl RunTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunTarget::Put => "put",
            RunTarget::Spec => "spec",
        }
    }
}

/// One (test, model, repeat) execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRunResult {
    pub test_uid: String,
    pub model_id: String,
    #[serde(default)]
    pub target: RunTarget,
    pub repeat: u32,
    /// Digest of the rendered messages actually sent.
    pub rendered_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_us: u64,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub repeats: u32,
    pub policy: RequestPolicy,
    pub target: RunTarget,
    /// Concurrent cells; 1 executes sequentially.
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            repeats: 1,
            policy: RequestPolicy::default(),
            target: RunTarget::Put,
            workers: 1,
        }
    }
}

/// Run `tests × muts × repeats`. The returned list always has exactly that
/// many entries, in (test, model, repeat) order.
pub fn run_matrix(
    gateway: &Gateway,
    put: &PromptUnderTest,
    tests: &[TestCase],
    muts: &[ModelSpec],
    options: &RunOptions,
) -> Vec<TestRunResult> {
    assert!(options.repeats >= 1, "repeats must be at least 1");
    let mut cells = Vec::new();
    for test in tests {
        for model in muts {
            for repeat in 1..=options.repeats {
                cells.push((test, model, repeat));
            }
        }
    }

    let slots: Mutex<Vec<Option<TestRunResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = options.workers.clamp(1, cells.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= cells.len() {
                    break;
                }
                let (test, model, repeat) = cells[idx];
                let result = run_cell(gateway, put, test, model, repeat, options);
                slots.lock().unwrap()[idx] = Some(result);
            });
        }
    });

    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every cell filled"))
        .collect()
}

fn run_cell(
    gateway: &Gateway,
    put: &PromptUnderTest,
    test: &TestCase,
    model: &ModelSpec,
    repeat: u32,
    options: &RunOptions,
) -> TestRunResult {
    let mut policy = options.policy.clone();
    if repeat > 1 {
        // distinct repeats must not collapse onto one cache entry
        policy.cache_salt = Some(format!("repeat-{repeat}"));
    }
    let base = TestRunResult {
        test_uid: test.test_uid.clone(),
        model_id: model.id.clone(),
        target: options.target,
        repeat,
        rendered_digest: String::new(),
        output_text: None,
        error: None,
        latency_us: 0,
        usage: TokenUsage::default(),
    };
    let messages = match put.render_with_input(&test.test_input) {
        Ok(messages) => messages,
        Err(e) => {
            return TestRunResult {
                error: Some(format!("render failed: {e}")),
                ..base
            }
        }
    };
    let digest = cache_key(&model.model_name, &model.sampling, &messages, None);
    match gateway.complete(model, &messages, &policy) {
        Ok(exchange) => TestRunResult {
            rendered_digest: digest,
            output_text: Some(exchange.response.text),
            latency_us: exchange.response.latency_us,
            usage: exchange.response.usage,
            ..base
        },
        Err(e) => TestRunResult {
            rendered_digest: digest,
            error: Some(e.to_string()),
            ..base
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{GeneratorKind, Validity};
    use crate::prompt_store::PromptUnderTest;

    fn echo_setup(dir: &std::path::Path) -> (Gateway, PromptUnderTest, Vec<ModelSpec>) {
        let script = dir.join("echo.mock");
        std::fs::write(&script, "repeat .* => <echo>\n").unwrap();
        let gateway = Gateway::new(None, 4).unwrap();
        let put = PromptUnderTest::parse("system:\nEcho the input.\nuser:\n{{x}}\n").unwrap();
        let muts = vec![
            ModelSpec::mock("mut-a", &script),
            ModelSpec::mock("mut-b", &script),
        ];
        (gateway, put, muts)
    }

    fn test_case(uid: &str, input: &str) -> TestCase {
        TestCase {
            test_uid: uid.into(),
            generator: GeneratorKind::Baseline,
            rule_id: None,
            seq: 1,
            test_input: input.into(),
            expected_output_hint: None,
            reasoning: None,
            validity: Validity::Unknown,
            validity_explanation: None,
        }
    }

    #[test]
    fn matrix_cardinality_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let (gateway, put, muts) = echo_setup(dir.path());
        let tests = vec![
            test_case("t1", "a"),
            test_case("t2", "b"),
            test_case("t3", "c"),
        ];
        let options = RunOptions {
            repeats: 2,
            ..Default::default()
        };
        let results = run_matrix(&gateway, &put, &tests, &muts, &options);
        assert_eq!(results.len(), 3 * 2 * 2);
        // (test, model, repeat) ordering
        assert_eq!(results[0].test_uid, "t1");
        assert_eq!(results[0].model_id, "mut-a");
        assert_eq!(results[0].repeat, 1);
        assert_eq!(results[1].repeat, 2);
        assert_eq!(results[2].model_id, "mut-b");
        assert_eq!(results[4].test_uid, "t2");
    }

    #[test]
    fn echo_model_reflects_input() {
        let dir = tempfile::tempdir().unwrap();
        let (gateway, put, muts) = echo_setup(dir.path());
        let tests = vec![test_case("t1", "x")];
        let results = run_matrix(&gateway, &put, &tests, &muts[..1], &RunOptions::default());
        assert_eq!(results[0].output_text.as_deref(), Some("x"));
        assert!(results[0].error.is_none());
    }

    #[test]
    fn provider_failure_stays_in_its_cells() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.mock");
        std::fs::write(&good, "repeat .* => <echo>\n").unwrap();
        let bad = dir.path().join("bad.mock");
        std::fs::write(&bad, "repeat .* => !503 down\n").unwrap();

        let gateway = Gateway::new(None, 4).unwrap().without_backoff_sleep();
        let put = PromptUnderTest::parse("system:\ns\nuser:\n{{x}}\n").unwrap();
        let muts = vec![ModelSpec::mock("ok", &good), ModelSpec::mock("down", &bad)];
        let tests = vec![test_case("t1", "a"), test_case("t2", "b")];
        let mut options = RunOptions::default();
        options.policy.retries = 1;
        options.policy.backoff_base = std::time::Duration::from_millis(1);

        let results = run_matrix(&gateway, &put, &tests, &muts, &options);
        assert_eq!(results.len(), 4);
        for r in &results {
            if r.model_id == "ok" {
                assert!(r.output_text.is_some(), "healthy cell failed: {r:?}");
                assert!(r.error.is_none());
            } else {
                assert!(r.output_text.is_none());
                assert!(r.error.as_deref().unwrap_or("").contains("503"));
            }
        }
    }

    #[test]
    fn results_have_exactly_one_of_output_or_error() {
        let dir = tempfile::tempdir().unwrap();
        let (gateway, put, muts) = echo_setup(dir.path());
        let tests = vec![test_case("t1", "a")];
        let results = run_matrix(&gateway, &put, &tests, &muts, &RunOptions::default());
        for r in results {
            assert_ne!(r.output_text.is_some(), r.error.is_some());
        }
    }

    #[test]
    fn concurrent_workers_preserve_output_order() {
        let dir = tempfile::tempdir().unwrap();
        let (gateway, put, muts) = echo_setup(dir.path());
        let tests: Vec<TestCase> = (0..10)
            .map(|i| test_case(&format!("t{i}"), &format!("in{i}")))
            .collect();
        let options = RunOptions {
            workers: 4,
            ..Default::default()
        };
        let strip_latency = |mut results: Vec<TestRunResult>| {
            for r in &mut results {
                r.latency_us = 0;
            }
            results
        };
        let results = strip_latency(run_matrix(&gateway, &put, &tests, &muts, &options));
        let sequential = strip_latency(run_matrix(
            &gateway,
            &put,
            &tests,
            &muts,
            &RunOptions::default(),
        ));
        assert_eq!(results, sequential);
    }
}
