//! Full-pipeline behavior over the part-of-speech fixture with a scripted
//! meta-model, echo models under test, and a scripted judge.

use std::path::{Path, PathBuf};

use specprobe_cli::config::Config;
use specprobe_cli::{
    cmd_eval, cmd_extract, cmd_generate, cmd_metrics, cmd_pipeline, cmd_report, cmd_run, CliError,
    EvalOpts, ExtractOpts, GenerateOpts, PipelineOpts, ReportOpts, RunCmdOpts,
};
use specprobe_core::metrics::RunMetrics;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

fn pos_prompt() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks/speech-tag.prompt")
}

fn load_config() -> Config {
    Config::load(&fixture_dir().join("config.json")).unwrap()
}

const ARTIFACTS: [&str; 10] = [
    "manifest.json",
    "put.prompt",
    "is.txt",
    "rules.json",
    "taskspec.txt",
    "specprompt.prompt",
    "tests.jsonl",
    "results.jsonl",
    "evals.jsonl",
    "metrics.json",
];

#[test]
fn pipeline_produces_the_full_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();
    cmd_pipeline(
        &pos_prompt(),
        &run_dir,
        &config,
        &PipelineOpts {
            cache_dir: Some(dir.path().join("cache")),
            run_id: Some("e2e".into()),
            dry_run: false,
        },
    )
    .unwrap();

    for name in ARTIFACTS {
        assert!(run_dir.join(name).is_file(), "missing artifact {name}");
    }
    for name in [
        "report/report.md",
        "report/noncompliance.csv",
        "report/report.json",
    ] {
        assert!(run_dir.join(name).is_file(), "missing report file {name}");
    }

    // IS normalization stripped the bullets
    let is = std::fs::read_to_string(run_dir.join("is.txt")).unwrap();
    assert_eq!(
        is.lines().next().unwrap(),
        "The input consists of a sentence combined with a specific word from that sentence."
    );
    assert_eq!(is.lines().count(), 3);

    // the rule set carries 2 extracted + 2 inverse rules with linkage and
    // the scripted groundedness verdicts (first ERR, then OK)
    let rules: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("rules.json")).unwrap())
            .unwrap();
    let rule_list = rules["rules"].as_array().unwrap();
    assert_eq!(rule_list.len(), 4);
    assert_eq!(rule_list[0]["grounded"], "not_grounded");
    assert_eq!(
        rule_list[0]["groundedness_explanation"],
        "The prompt never states this."
    );
    assert_eq!(rule_list[1]["grounded"], "grounded");
    assert_eq!(rule_list[2]["kind"], "inverse");
    assert_eq!(rule_list[2]["inverse_of"], 1);
    assert_eq!(rule_list[3]["inverse_of"], 2);

    // 8 tests ran on 2 models, plus 4 baseline tests on the spec prompt
    let results = std::fs::read_to_string(run_dir.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 8 * 2 + 4 * 2);

    let metrics: RunMetrics =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics.put_id, "speech-tag");
    // rule-based: aura OK, blorptastic ERR, carefully OK, unfastly ERR -> 50%
    // baseline: quick OK, sells OK, riddle OK, 42 ERR -> 25%
    for entry in &metrics.noncompliance {
        match entry.generator {
            specprobe_core::generator::GeneratorKind::RuleBased => {
                assert_eq!((entry.n_noncompliant, entry.n_evaluated), (2, 4))
            }
            specprobe_core::generator::GeneratorKind::Baseline => {
                assert_eq!((entry.n_noncompliant, entry.n_evaluated), (1, 4))
            }
        }
    }
    // echo models behave identically on the PUT and the spec prompt, and
    // the judge keys on output text, so agreement is perfect
    assert_eq!(metrics.spec_agreement.as_ref().unwrap().score, 1.0);
    assert_eq!(metrics.spec_agreement.as_ref().unwrap().n_cells, 8);
    // groundedness: one of two extracted rules judged grounded
    let grounded = metrics.groundedness.as_ref().unwrap();
    assert_eq!((grounded.n_grounded, grounded.n_not_grounded), (1, 1));
    assert_eq!(grounded.pct, Some(50.0));
    // the riddle test is invalid, the other 7 valid
    assert_eq!(metrics.validity.n_valid, 7);
    assert_eq!(metrics.validity.n_invalid, 1);
    assert_eq!(metrics.validity.n_unknown, 0);

    // the drilldown lists each test with its rule, output, and verdict
    let report = std::fs::read_to_string(run_dir.join("report/report.md")).unwrap();
    assert!(report.contains("## Per-test drilldown"));
    assert!(report.contains("rule 1: The output must return only the part of speech tag"));
    assert!(report.contains("An aura of mystery surrounded them; aura"));
    assert!(report.contains("non-compliant"));
    assert!(report.contains("The output is prose, not a bare part of speech tag."));
}

#[test]
fn stage_gates_enforce_order() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();

    // run before anything exists
    let err = cmd_run(&run_dir, &RunCmdOpts::default()).unwrap_err();
    assert!(matches!(err, CliError::StageDependency(_)), "{err}");
    assert_eq!(err.exit_code(), 3);

    cmd_extract(&pos_prompt(), &run_dir, &config, &ExtractOpts::default()).unwrap();
    // run before generate
    let err = cmd_run(&run_dir, &RunCmdOpts::default()).unwrap_err();
    assert!(matches!(err, CliError::StageDependency(_)), "{err}");

    // eval before run
    cmd_generate(&run_dir, &GenerateOpts::default()).unwrap();
    let err = cmd_eval(&run_dir, &EvalOpts::default()).unwrap_err();
    assert!(matches!(err, CliError::StageDependency(_)), "{err}");

    // metrics before eval
    cmd_run(&run_dir, &RunCmdOpts::default()).unwrap();
    let err = cmd_metrics(&run_dir).unwrap_err();
    assert!(matches!(err, CliError::StageDependency(_)), "{err}");

    cmd_eval(&run_dir, &EvalOpts::default()).unwrap();
    cmd_metrics(&run_dir).unwrap();
    cmd_report(&run_dir, &ReportOpts::default()).unwrap();
}

#[test]
fn editing_the_input_spec_marks_provenance_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();
    cmd_extract(&pos_prompt(), &run_dir, &config, &ExtractOpts::default()).unwrap();
    cmd_generate(&run_dir, &GenerateOpts::default()).unwrap();

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest["stages"]["generate"]["notes"]["is_provenance"],
        "extracted"
    );

    // hand-edit the IS, then regenerate
    let is_path = run_dir.join("is.txt");
    let mut is = std::fs::read_to_string(&is_path).unwrap();
    is.push_str("The input is given as the sentence, a semicolon, then the word.\n");
    std::fs::write(&is_path, is).unwrap();

    cmd_generate(&run_dir, &GenerateOpts::default()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest["stages"]["generate"]["notes"]["is_provenance"],
        "edited"
    );
    assert!(run_dir.join("tests.jsonl").is_file());
}

#[test]
fn rerunning_a_stage_invalidates_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();
    let cache = Some(dir.path().join("cache"));
    cmd_pipeline(
        &pos_prompt(),
        &run_dir,
        &config,
        &PipelineOpts {
            cache_dir: cache.clone(),
            run_id: Some("e2e".into()),
            dry_run: false,
        },
    )
    .unwrap();

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["stages"]["report"]["completed"], true);

    cmd_generate(
        &run_dir,
        &GenerateOpts {
            cache_dir: cache,
            ..Default::default()
        },
    )
    .unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["stages"]["generate"]["completed"], true);
    assert_eq!(manifest["stages"]["run"]["completed"], false);
    assert_eq!(manifest["stages"]["eval"]["completed"], false);
    assert_eq!(manifest["stages"]["report"]["completed"], false);
}

#[test]
fn dry_run_performs_no_requests() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();

    // extract --dry-run against a run dir that never gets created
    cmd_extract(
        &pos_prompt(),
        &run_dir,
        &config,
        &ExtractOpts {
            dry_run: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        !run_dir.exists(),
        "dry run must not create the run directory"
    );

    // a real extract followed by dry-run generate/run/eval leaves the
    // tests/results files absent
    cmd_extract(&pos_prompt(), &run_dir, &config, &ExtractOpts::default()).unwrap();
    cmd_generate(
        &run_dir,
        &GenerateOpts {
            dry_run: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!run_dir.join("tests.jsonl").exists());
}

#[test]
fn baseline_only_generation_skips_rule_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();
    cmd_extract(&pos_prompt(), &run_dir, &config, &ExtractOpts::default()).unwrap();
    cmd_generate(
        &run_dir,
        &GenerateOpts {
            generator: specprobe_cli::GeneratorChoice::Baseline,
            ..Default::default()
        },
    )
    .unwrap();
    cmd_run(&run_dir, &RunCmdOpts::default()).unwrap();
    cmd_eval(&run_dir, &EvalOpts::default()).unwrap();
    cmd_metrics(&run_dir).unwrap();
    cmd_report(&run_dir, &ReportOpts::default()).unwrap();

    let metrics: RunMetrics =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics.rule_kind_noncompliance.is_empty());
    assert!(metrics
        .noncompliance
        .iter()
        .all(|e| e.generator == specprobe_core::generator::GeneratorKind::Baseline));
    // agreement still comes from the baseline suite on both prompts
    assert!(metrics.spec_agreement.is_some());
    let report = std::fs::read_to_string(run_dir.join("report/report.md")).unwrap();
    assert!(!report.contains("rule (RL) vs inverse-rule"));
    assert!(report.contains("## Spec agreement"));
}

#[test]
fn models_filter_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let config = load_config();
    cmd_extract(&pos_prompt(), &run_dir, &config, &ExtractOpts::default()).unwrap();
    cmd_generate(&run_dir, &GenerateOpts::default()).unwrap();
    let err = cmd_run(
        &run_dir,
        &RunCmdOpts {
            models: Some(vec!["nope".into()]),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}
