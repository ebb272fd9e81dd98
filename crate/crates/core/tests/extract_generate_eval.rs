//! Module-level pipeline behavior against scripted meta-models: spec
//! extraction, rule inversion, groundedness, test generation, and judging.

use std::path::{Path, PathBuf};
use std::time::Duration;

use specprobe_core::evaluators::{apply_validity, judge_compliance, judge_validity, Decision};
use specprobe_core::extractor::{
    build_spec_prompt, check_groundedness, extract_input_spec, extract_output_rules,
    extract_task_spec, invert_rules, ExtractError, Groundedness, MetaContext, Provenance, RuleKind,
};
use specprobe_core::gateway::{Gateway, ModelSpec, RequestPolicy};
use specprobe_core::generator::{
    generate_baseline_tests, generate_rule_tests, GenerateError, GeneratorKind, Validity,
};
use specprobe_core::prompt_store::benchmark;
use specprobe_core::runner::{run_matrix, RunOptions};

fn policy() -> RequestPolicy {
    RequestPolicy {
        retries: 1,
        timeout: Duration::from_secs(5),
        use_cache: false,
        cache_salt: None,
        backoff_base: Duration::from_millis(1),
    }
}

fn script(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn meta_model(dir: &Path, name: &str, content: &str) -> (Gateway, ModelSpec) {
    let path = script(dir, name, content);
    (
        Gateway::new(None, 4).unwrap(),
        ModelSpec::mock("meta", path),
    )
}

#[test]
fn input_spec_extraction_normalizes_bullets() {
    let dir = tempfile::tempdir().unwrap();
    let reply = "- The input consists of a sentence combined with a specific word from that sentence.\\n- The sentence must contain natural language text.\\n- The word must be a single word from the provided sentence.";
    let (gateway, meta) = meta_model(
        dir.path(),
        "meta.mock",
        &format!("repeat identifying the requirements for their inputs => {reply}\n"),
    );
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let is = extract_input_spec(ctx, &put).unwrap();
    assert_eq!(is.statements.len(), 3);
    assert!(is
        .statements
        .contains(&"The word must be a single word from the provided sentence.".to_string()));
    assert_eq!(is.provenance, Provenance::Extracted);
    assert_eq!(is.source_put, "speech-tag");
}

#[test]
fn empty_meta_reply_is_empty_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", "repeat .* => \\n  \\n\n");
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    assert!(matches!(
        extract_input_spec(ctx, &put),
        Err(ExtractError::EmptyExtraction)
    ));
    assert!(matches!(
        extract_task_spec(ctx, &put),
        Err(ExtractError::EmptyExtraction)
    ));
}

#[test]
fn rule_extraction_assigns_sequential_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (gateway, meta) = meta_model(
        dir.path(),
        "meta.mock",
        "repeat extracting rules and constrains => first rule\\nsecond rule\n",
    );
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let rules = extract_output_rules(ctx, &put, Some(2)).unwrap();
    assert_eq!(rules.rules.len(), 2);
    assert_eq!(rules.rules[0].rule_id, 1);
    assert_eq!(rules.rules[1].rule_id, 2);
    assert!(rules
        .rules
        .iter()
        .all(|r| r.kind == RuleKind::Extracted && r.grounded == Groundedness::Unknown));
}

#[test]
fn rule_extraction_branches_render_differently() {
    let dir = tempfile::tempdir().unwrap();
    // the limited branch (and only it) contains "at least N most crucial"
    let content = "once at least 3 most crucial => limited-branch-rule\nonce all the rules related => all-branch-rule\n";
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let limited = extract_output_rules(ctx, &put, Some(3)).unwrap();
    assert_eq!(limited.rules[0].text, "limited-branch-rule");
    let all = extract_output_rules(ctx, &put, None).unwrap();
    assert_eq!(all.rules[0].text, "all-branch-rule");
}

#[test]
fn inversion_links_rules_pairwise() {
    let dir = tempfile::tempdir().unwrap();
    let content = "repeat extracting rules and constrains => tag only\\nunknown maps to Unknown\nrepeat contradicts the given rules => tag plus name\\nunknown maps to prose\n";
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let rules = extract_output_rules(ctx, &put, None).unwrap();
    let full = invert_rules(ctx, &rules).unwrap();

    assert_eq!(full.rules.len(), 4);
    let inverses: Vec<_> = full.inverses().collect();
    assert_eq!(inverses.len(), 2);
    assert_eq!(inverses[0].inverse_of, Some(1));
    assert_eq!(inverses[0].text, "tag plus name");
    assert_eq!(inverses[1].inverse_of, Some(2));
    // bijection: each extracted rule has exactly one inverse
    for extracted in full.extracted() {
        let count = full
            .inverses()
            .filter(|inv| inv.inverse_of == Some(extracted.rule_id))
            .count();
        assert_eq!(count, 1);
    }
}

#[test]
fn inversion_arity_mismatch_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let content = "repeat extracting rules and constrains => a\\nb\\nc\\nd\nrepeat contradicts the given rules => only\\nthree\\nlines\n";
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let rules = extract_output_rules(ctx, &put, None).unwrap();
    match invert_rules(ctx, &rules) {
        Err(ExtractError::CountMismatch { expected, got }) => {
            assert_eq!(expected, 4);
            assert_eq!(got, 3);
        }
        other => panic!("expected CountMismatch, got {other:?}"),
    }
}

#[test]
fn double_inversion_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let content = "repeat extracting rules and constrains => a\nrepeat contradicts the given rules => not-a\n";
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let rules = extract_output_rules(ctx, &put, None).unwrap();
    let full = invert_rules(ctx, &rules).unwrap();
    assert!(matches!(
        invert_rules(ctx, &full),
        Err(ExtractError::InversesAlreadyPresent)
    ));
}

#[test]
fn groundedness_judges_extracted_rules_only() {
    let dir = tempfile::tempdir().unwrap();
    let content = concat!(
        "repeat extracting rules and constrains => solid rule\\nshaky rule\n",
        "repeat contradicts the given rules => inv one\\ninv two\n",
        "once grounded in the provided description => No support found.\\nERR\n",
        "repeat grounded in the provided description => OK\n",
    );
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let rules = invert_rules(ctx, &extract_output_rules(ctx, &put, None).unwrap()).unwrap();
    let judged = check_groundedness(ctx, &rules, &put).unwrap();

    // first judged rule hit the one-shot ERR, second the repeat OK
    assert_eq!(judged.rules[0].grounded, Groundedness::NotGrounded);
    assert_eq!(
        judged.rules[0].groundedness_explanation.as_deref(),
        Some("No support found.")
    );
    assert_eq!(judged.rules[1].grounded, Groundedness::Grounded);
    for inverse in judged.inverses() {
        assert_eq!(inverse.grounded, Groundedness::Unknown);
    }
}

#[test]
fn task_spec_is_whole_trimmed_reply() {
    let dir = tempfile::tempdir().unwrap();
    let (gateway, meta) = meta_model(
        dir.path(),
        "meta.mock",
        "repeat extract the intent => \\n Summarize text. \\n\n",
    );
    let put = benchmark("classify").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let task = extract_task_spec(ctx, &put).unwrap();
    assert_eq!(task.intent_text, "Summarize text.");
    assert_eq!(task.source_put, "classify");
}

#[test]
fn rule_test_generation_parses_the_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    let csv_reply = concat!(
        "ruleid, testid, testinput, expectedoutput, reasoning\\n",
        "1, 1, \"An aura of mystery surrounded them; aura\", \"NN\", \"noun target\"\\n",
        "1, 2, \"input, with comma\", \"exp\", \"quoted comma\"\\n",
        "2, 1, \"The researchers documented carefully; carefully\", \"RB\", \"adverb\"\\n",
        "9, 1, \"dangling rule reference\", \"x\", \"rejected row\"\\n",
        "2, 2, broken row with, too, many, unquoted, commas, here"
    );
    let content = format!("repeat structured CSV format => ```csv\\n{csv_reply}\\n```\n");
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", &content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);

    let rules = specprobe_core::extractor::RuleSet {
        put_id: "speech-tag".into(),
        rules: vec![
            rule(1, RuleKind::Extracted, None),
            rule(2, RuleKind::Extracted, None),
        ],
    };
    let is = specprobe_core::extractor::InputSpec {
        statements: vec!["sentence; word".into()],
        provenance: Provenance::Extracted,
        source_put: "speech-tag".into(),
    };
    let generation = generate_rule_tests(ctx, &put, &is, &rules, 2).unwrap();

    assert_eq!(generation.expected_count, 4);
    assert_eq!(generation.tests.len(), 3);
    assert_eq!(
        generation.tests[0].test_input,
        "An aura of mystery surrounded them; aura"
    );
    assert_eq!(generation.tests[1].test_input, "input, with comma");
    assert_eq!(generation.tests[0].rule_id, Some(1));
    assert_eq!(generation.tests[2].rule_id, Some(2));
    assert!(generation
        .tests
        .iter()
        .all(|t| t.generator == GeneratorKind::RuleBased && t.validity == Validity::Unknown));
    // the dangling-rule row and the arity-violating row were skipped
    assert_eq!(generation.skipped.len(), 2);
    assert!(generation
        .skipped
        .iter()
        .any(|i| i.reason.contains("ruleid 9")));
    assert!(generation
        .skipped
        .iter()
        .any(|i| i.reason.contains("expected 5 fields")));
}

fn rule(
    rule_id: u32,
    kind: RuleKind,
    inverse_of: Option<u32>,
) -> specprobe_core::extractor::OutputRule {
    specprobe_core::extractor::OutputRule {
        rule_id,
        text: format!("rule text {rule_id}"),
        kind,
        inverse_of,
        grounded: Groundedness::Unknown,
        groundedness_explanation: None,
    }
}

#[test]
fn all_rows_malformed_is_csv_unparseable() {
    let dir = tempfile::tempdir().unwrap();
    let content = "repeat structured CSV format => just prose, no table\n";
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let rules = specprobe_core::extractor::RuleSet {
        put_id: "speech-tag".into(),
        rules: vec![rule(1, RuleKind::Extracted, None)],
    };
    let is = specprobe_core::extractor::InputSpec {
        statements: vec!["s".into()],
        provenance: Provenance::Extracted,
        source_put: "speech-tag".into(),
    };
    assert!(matches!(
        generate_rule_tests(ctx, &put, &is, &rules, 1),
        Err(GenerateError::CsvUnparseable { .. })
    ));
}

#[test]
fn baseline_generation_splits_on_delimiter() {
    let dir = tempfile::tempdir().unwrap();
    let content =
        "repeat as the delimiter => The fox ran; fox\\n===\\nShe sang well; well\\n===\\nHe can swim; can\\n===\n";
    let (gateway, meta) = meta_model(dir.path(), "meta.mock", content);
    let put = benchmark("speech-tag").unwrap();
    let p = policy();
    let ctx = MetaContext::new(&gateway, &meta, &p);
    let tests = generate_baseline_tests(ctx, &put, 3).unwrap();
    assert_eq!(tests.len(), 3);
    assert_eq!(tests[0].test_input, "The fox ran; fox");
    assert_eq!(tests[2].test_input, "He can swim; can");
    assert!(tests
        .iter()
        .all(|t| t.generator == GeneratorKind::Baseline && t.rule_id.is_none()));
    assert_eq!(
        tests.iter().map(|t| t.seq).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
}

#[test]
fn compliance_judging_end_to_end_with_echo_mut() {
    let dir = tempfile::tempdir().unwrap();
    let mut_script = script(dir.path(), "mut.mock", "repeat .* => <echo>\n");
    let judge_script = script(
        dir.path(),
        "judge.mock",
        concat!(
            "repeat evaluate the given output.*aura => No violation.\\nOK\n",
            "repeat evaluate the given output => Extraneous text beyond the tag.\\nERR\n",
        ),
    );
    let gateway = Gateway::new(None, 4).unwrap();
    let put = benchmark("speech-tag").unwrap();
    let mut_model = ModelSpec::mock("echo-mut", mut_script);
    let judge_model = ModelSpec::mock("judge", judge_script);

    let tests = vec![
        baseline_test("t1", "An aura of mystery surrounded them; aura"),
        baseline_test("t2", "The researchers documented carefully; carefully"),
    ];
    let results = run_matrix(
        &gateway,
        &put,
        &tests,
        &[mut_model],
        &RunOptions {
            policy: policy(),
            ..Default::default()
        },
    );
    assert_eq!(results.len(), 2);

    let p = policy();
    let ctx = MetaContext::new(&gateway, &judge_model, &p);
    let v1 = judge_compliance(ctx, &put, &results[0]).unwrap();
    assert_eq!(v1.decision, Decision::Ok);
    assert_eq!(v1.explanation, "No violation.");
    assert_eq!(v1.judge_model, "judge");
    let v2 = judge_compliance(ctx, &put, &results[1]).unwrap();
    assert_eq!(v2.decision, Decision::Err);
    assert!(v2.raw_text.ends_with("ERR"));
}

fn baseline_test(uid: &str, input: &str) -> specprobe_core::generator::TestCase {
    specprobe_core::generator::TestCase {
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
fn validity_judging_updates_test_cases() {
    let dir = tempfile::tempdir().unwrap();
    let judge_script = script(
        dir.path(),
        "judge.mock",
        concat!(
            "repeat comply with its input specification.*sat; cat => No violation.\\nOK\n",
            "repeat comply with its input specification => Word not in sentence.\\nERR\n",
        ),
    );
    let gateway = Gateway::new(None, 4).unwrap();
    let judge_model = ModelSpec::mock("judge", judge_script);
    let is = specprobe_core::extractor::InputSpec {
        statements: vec!["The word must be a single word from the provided sentence.".into()],
        provenance: Provenance::Extracted,
        source_put: "speech-tag".into(),
    };
    let p = policy();
    let ctx = MetaContext::new(&gateway, &judge_model, &p);

    let mut valid_case = baseline_test("t1", "The cat sat; cat");
    let verdict = judge_validity(ctx, &is, &valid_case).unwrap();
    apply_validity(&mut valid_case, &verdict);
    assert_eq!(valid_case.validity, Validity::Valid);

    let mut invalid_case = baseline_test("t2", "The cat sat; dog");
    let verdict = judge_validity(ctx, &is, &invalid_case).unwrap();
    apply_validity(&mut invalid_case, &verdict);
    assert_eq!(invalid_case.validity, Validity::Invalid);
    assert_eq!(
        invalid_case.validity_explanation.as_deref(),
        Some("Word not in sentence.")
    );
}

#[test]
fn extraction_replays_identically_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let content = "once identifying the requirements => - only line\n";
    let path = script(dir.path(), "meta.mock", content);
    let cache_dir = dir.path().join("cache");
    let gateway = Gateway::new(Some(cache_dir), 4).unwrap();
    let meta = ModelSpec::mock("meta", path);
    let put = benchmark("speech-tag").unwrap();
    let cached_policy = RequestPolicy {
        use_cache: true,
        ..policy()
    };
    let ctx = MetaContext::new(&gateway, &meta, &cached_policy);

    let first = extract_input_spec(ctx, &put).unwrap();
    // script is one-shot: a second live request would exhaust it, so this
    // passing proves the replay came from the cache
    let second = extract_input_spec(ctx, &put).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.to_file_text(), second.to_file_text());
}

#[test]
fn spec_prompt_flows_through_runner() {
    let dir = tempfile::tempdir().unwrap();
    let mut_script = script(dir.path(), "mut.mock", "repeat .* => <echo>\n");
    let gateway = Gateway::new(None, 4).unwrap();
    let task = specprobe_core::extractor::TaskSpec {
        intent_text: "Determine the part of speech tag for a word in a sentence.".into(),
        source_put: "speech-tag".into(),
    };
    let rules = specprobe_core::extractor::RuleSet {
        put_id: "speech-tag".into(),
        rules: vec![rule(1, RuleKind::Extracted, None)],
    };
    let spec_prompt = build_spec_prompt(&task, &rules);
    assert_eq!(spec_prompt.id, "speech-tag-spec");

    let tests = vec![baseline_test("t1", "input text")];
    let results = run_matrix(
        &gateway,
        &spec_prompt,
        &tests,
        &[ModelSpec::mock("m", mut_script)],
        &RunOptions {
            target: specprobe_core::runner::RunTarget::Spec,
            policy: policy(),
            ..Default::default()
        },
    );
    assert_eq!(results[0].target, specprobe_core::runner::RunTarget::Spec);
    assert_eq!(results[0].output_text.as_deref(), Some("input text"));
}
