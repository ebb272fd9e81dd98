//! Pipeline commands over a persisted run directory. Each command is a
//! stage: it checks its prerequisites, does its work through the gateway,
//! rewrites its artifacts, and records completion (with digests) in the
//! run manifest. Re-running a stage with unchanged inputs and a warm cache
//! rewrites identical bytes.

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use specprobe_core::evaluators::{
    apply_validity, judge_compliance, judge_validity, EvalError, EvalRecord, Verdict,
};
use specprobe_core::extractor::{
    build_spec_prompt, check_groundedness, extract_input_spec, extract_output_rules,
    extract_task_spec, invert_rules, ExtractError, InputSpec, MetaContext, Provenance, RuleSet,
};
use specprobe_core::gateway::{Gateway, GatewayError, ModelSpec};
use specprobe_core::generator::{
    generate_baseline_tests, generate_rule_tests, GenerateError, GeneratorKind, TestCase,
};
use specprobe_core::metrics::{compute_run_metrics, spec_agreement, MetricsError, RunMetrics};
use specprobe_core::prompt_store::{PromptError, PromptUnderTest};
use specprobe_core::reporting::{
    render_report, PromptRunData, ReportError, ReportFormat, ReportSection, ReportSpec,
};
use specprobe_core::run_store::{
    read_jsonl, write_jsonl, RunDir, RunManifest, StageRecord, StoreError,
};
use specprobe_core::runner::{run_matrix, RunOptions, RunTarget, TestRunResult};

use config::Config;

/// Command failure, carrying the process exit code taxonomy:
/// 2 config, 3 stage dependency, 4 provider, 5 parse, 1 anything else.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    StageDependency(String),
    Provider(String),
    Parse(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::StageDependency(_) => 3,
            CliError::Provider(_) => 4,
            CliError::Parse(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::StageDependency(msg) => write!(f, "stage dependency error: {msg}"),
            CliError::Provider(msg) => write!(f, "provider error: {msg}"),
            CliError::Parse(msg) => write!(f, "parse error: {msg}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::MalformedScript { .. } | GatewayError::InvalidModelSpec(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Provider(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<ExtractError> for CliError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Gateway(g) => g.into(),
            ExtractError::Render(p) => p.into(),
            other => CliError::Parse(other.to_string()),
        }
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::Gateway(g) => g.into(),
            GenerateError::Render(p) => p.into(),
            GenerateError::Extract(x) => x.into(),
            other => CliError::Parse(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gateway(g) => g.into(),
            EvalError::Render(p) => p.into(),
            EvalError::Extract(x) => x.into(),
            other => CliError::Parse(other.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::StageDependencyMissing { .. } => CliError::StageDependency(e.to_string()),
            StoreError::MalformedManifest(_) | StoreError::MalformedRecord { .. } => {
                CliError::Parse(e.to_string())
            }
            StoreError::Locked(_) | StoreError::Io { .. } => CliError::Other(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Parse(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::EmptySpec => CliError::Config(e.to_string()),
            ReportError::MissingSectionData { .. } => CliError::StageDependency(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorChoice {
    RuleBased,
    Baseline,
    Both,
}

impl GeneratorChoice {
    fn wants_rules(&self) -> bool {
        matches!(self, GeneratorChoice::RuleBased | GeneratorChoice::Both)
    }
    fn wants_baseline(&self) -> bool {
        matches!(self, GeneratorChoice::Baseline | GeneratorChoice::Both)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExtractOpts {
    pub cache_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub num_rules: Option<u32>,
    pub skip_groundedness: bool,
    pub dry_run: bool,
}

#[derive(Debug, Clone)]
pub struct GenerateOpts {
    pub generator: GeneratorChoice,
    pub per_rule: Option<u32>,
    pub num: Option<u32>,
    pub export_csv: bool,
    pub cache_dir: Option<PathBuf>,
    pub dry_run: bool,
}

impl Default for GenerateOpts {
    fn default() -> Self {
        GenerateOpts {
            generator: GeneratorChoice::Both,
            per_rule: None,
            num: None,
            export_csv: false,
            cache_dir: None,
            dry_run: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunCmdOpts {
    pub models: Option<Vec<String>>,
    pub repeats: Option<u32>,
    pub cache_dir: Option<PathBuf>,
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOpts {
    pub judge: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOpts {
    pub formats: Option<BTreeSet<ReportFormat>>,
    pub sections: Option<BTreeSet<ReportSection>>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOpts {
    pub cache_dir: Option<PathBuf>,
    pub run_id: Option<String>,
    pub dry_run: bool,
}

/// An opened run directory with its manifest, frozen config, and gateway.
struct Stage {
    run: RunDir,
    manifest: RunManifest,
    config: Config,
    gateway: Gateway,
    _lock: specprobe_core::run_store::LockGuard,
}

fn open_stage(run_dir: &Path, cache_dir: Option<&Path>) -> Result<Stage, CliError> {
    let run = RunDir::open(run_dir).map_err(|_| {
        CliError::StageDependency(format!(
            "run directory {} does not exist; run `extract` first",
            run_dir.display()
        ))
    })?;
    if !run.manifest_path().is_file() {
        return Err(CliError::StageDependency(format!(
            "{} has no manifest; run `extract` first",
            run_dir.display()
        )));
    }
    let lock = run.lock()?;
    let manifest = run.read_manifest()?;
    let config = Config::from_snapshot(&manifest.config)?;
    let gateway = build_gateway(&run, &config, cache_dir)?;
    Ok(Stage {
        run,
        manifest,
        config,
        gateway,
        _lock: lock,
    })
}

fn build_gateway(
    run: &RunDir,
    config: &Config,
    cache_dir: Option<&Path>,
) -> Result<Gateway, CliError> {
    let dir = cache_dir
        .map(Path::to_path_buf)
        .or_else(|| config.cache_dir.clone())
        .unwrap_or_else(|| run.default_cache_dir());
    Ok(Gateway::new(Some(dir), config.max_inflight)?)
}

fn read_put(run: &RunDir) -> Result<PromptUnderTest, CliError> {
    run.require_artifact("generate", &run.put_prompt_path(), "extract")?;
    Ok(PromptUnderTest::parse(
        &run.read_text(&run.put_prompt_path())?,
    )?)
}

fn artifact_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string())
}

fn digest_artifacts(run: &RunDir, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    let mut artifacts = BTreeMap::new();
    for path in paths {
        artifacts.insert(artifact_name(path), run.artifact_digest(path)?);
    }
    Ok(artifacts)
}

/// Compare an artifact's current digest with the digest its producing stage
/// recorded; a mismatch means a human edited it since.
fn provenance_of(
    run: &RunDir,
    manifest: &RunManifest,
    producing_stage: &str,
    path: &Path,
) -> Result<Provenance, CliError> {
    let recorded = manifest
        .stage(producing_stage)
        .and_then(|s| s.artifacts.get(&artifact_name(path)));
    let current = run.artifact_digest(path)?;
    Ok(match recorded {
        Some(digest) if *digest == current => Provenance::Extracted,
        _ => Provenance::Edited,
    })
}

fn provenance_str(p: Provenance) -> &'static str {
    match p {
        Provenance::Extracted => "extracted",
        Provenance::Edited => "edited",
    }
}

// --- extract ---

pub fn cmd_extract(
    prompt_path: &Path,
    run_dir: &Path,
    config: &Config,
    opts: &ExtractOpts,
) -> Result<(), CliError> {
    let prompt_text = std::fs::read_to_string(prompt_path)
        .map_err(|e| CliError::Other(format!("cannot read {}: {e}", prompt_path.display())))?;
    let put = PromptUnderTest::parse(&prompt_text)?;

    if opts.dry_run {
        let groundedness = if config.groundedness && !opts.skip_groundedness {
            " + R groundedness checks (R = extracted rule count)"
        } else {
            ""
        };
        println!("extract: 4 meta-model requests (input spec, output rules, inverses, task spec){groundedness}");
        return Ok(());
    }

    let run = RunDir::create(run_dir)?;
    let _lock = run.lock()?;
    let gateway = build_gateway(&run, config, opts.cache_dir.as_deref())?;
    let policy = config.policy();
    let ctx = MetaContext::new(&gateway, &config.meta_model, &policy);

    run.write_text(&run.put_prompt_path(), &put.to_file_text())?;

    let input_spec = extract_input_spec(ctx, &put)?;
    run.write_text(&run.is_path(), &input_spec.to_file_text())?;

    let num_rules = opts.num_rules.or(config.num_rules);
    let mut rules = invert_rules(ctx, &extract_output_rules(ctx, &put, num_rules)?)?;
    if config.groundedness && !opts.skip_groundedness {
        rules = check_groundedness(ctx, &rules, &put)?;
    }
    run.write_text(&run.rules_path(), &rules.to_json())?;

    let task = extract_task_spec(ctx, &put)?;
    run.write_text(&run.taskspec_path(), &format!("{}\n", task.intent_text))?;

    let spec_prompt = build_spec_prompt(&task, &rules);
    run.write_text(&run.specprompt_path(), &spec_prompt.to_file_text())?;

    let run_id = opts.run_id.clone().unwrap_or_else(|| run.default_run_id());
    let mut manifest = RunManifest::new(
        &run_id,
        &prompt_path.display().to_string(),
        &prompt_text,
        config.snapshot(),
    );
    let artifacts = digest_artifacts(
        &run,
        &[
            run.put_prompt_path(),
            run.is_path(),
            run.rules_path(),
            run.taskspec_path(),
            run.specprompt_path(),
        ],
    )?;
    let notes = BTreeMap::from([
        ("is_provenance".to_string(), "extracted".to_string()),
        ("rules_provenance".to_string(), "extracted".to_string()),
        (
            "extracted_rules".to_string(),
            rules.extracted().count().to_string(),
        ),
    ]);
    manifest.complete_stage(
        "extract",
        StageRecord {
            completed: true,
            artifacts,
            notes,
        },
    );
    run.write_manifest(&manifest)?;
    eprintln!(
        "extracted {} input statements, {} rules (+{} inverses) from {}",
        input_spec.statements.len(),
        rules.extracted().count(),
        rules.inverses().count(),
        put.id
    );
    Ok(())
}

// --- generate ---

pub fn cmd_generate(run_dir: &Path, opts: &GenerateOpts) -> Result<(), CliError> {
    let mut stage = open_stage(run_dir, opts.cache_dir.as_deref())?;
    if opts.dry_run {
        let n = opts.generator.wants_rules() as u32 + opts.generator.wants_baseline() as u32;
        println!("generate: {n} meta-model request(s)");
        return Ok(());
    }
    let put = read_put(&stage.run)?;
    let policy = stage.config.policy();
    let ctx = MetaContext::new(&stage.gateway, &stage.config.meta_model, &policy);

    let mut tests: Vec<TestCase> = Vec::new();
    let mut notes = BTreeMap::new();

    let rules = if opts.generator.wants_rules() {
        stage
            .run
            .require_artifact("generate", &stage.run.rules_path(), "extract")?;
        let provenance = provenance_of(
            &stage.run,
            &stage.manifest,
            "extract",
            &stage.run.rules_path(),
        )?;
        notes.insert("rules_provenance".into(), provenance_str(provenance).into());
        Some(RuleSet::from_json(
            &stage.run.read_text(&stage.run.rules_path())?,
        )?)
    } else {
        None
    };

    if opts.generator.wants_rules() {
        stage
            .run
            .require_artifact("generate", &stage.run.is_path(), "extract")?;
        let is_provenance =
            provenance_of(&stage.run, &stage.manifest, "extract", &stage.run.is_path())?;
        notes.insert("is_provenance".into(), provenance_str(is_provenance).into());
        let input_spec = InputSpec::from_file_text(
            &stage.run.read_text(&stage.run.is_path())?,
            &put.id,
            is_provenance,
        );
        let rules = rules.as_ref().expect("loaded above");
        let per_rule = opts.per_rule.unwrap_or(stage.config.per_rule);
        let generation = generate_rule_tests(ctx, &put, &input_spec, rules, per_rule)?;
        for issue in &generation.skipped {
            eprintln!("generate: skipped CSV row, {issue}");
        }
        notes.insert(
            "expected_rule_tests".into(),
            generation.expected_count.to_string(),
        );
        notes.insert(
            "generated_rule_tests".into(),
            generation.tests.len().to_string(),
        );
        notes.insert("skipped_rows".into(), generation.skipped.len().to_string());
        tests.extend(generation.tests);
    }

    if opts.generator.wants_baseline() {
        let num = opts.num.or(stage.config.baseline_num).unwrap_or_else(|| {
            // equal budget with the rule-based side
            let rule_count = rules.as_ref().map(|r| r.rules.len() as u32).unwrap_or(2);
            opts.per_rule.unwrap_or(stage.config.per_rule) * rule_count.max(1)
        });
        let baseline = generate_baseline_tests(ctx, &put, num)?;
        notes.insert("baseline_num".into(), num.to_string());
        notes.insert(
            "generated_baseline_tests".into(),
            baseline.len().to_string(),
        );
        tests.extend(baseline);
    }

    write_jsonl(&stage.run.tests_path(), &tests)?;
    if opts.export_csv {
        stage.run.write_text(
            &stage.run.root().join("tests.csv"),
            &specprobe_core::generator::tests_to_csv(&tests),
        )?;
    }

    let artifacts = digest_artifacts(&stage.run, &[stage.run.tests_path()])?;
    stage.manifest.complete_stage(
        "generate",
        StageRecord {
            completed: true,
            artifacts,
            notes,
        },
    );
    stage.run.write_manifest(&stage.manifest)?;
    eprintln!("generated {} tests", tests.len());
    Ok(())
}

// --- run ---

fn selected_muts<'a>(
    config: &'a Config,
    filter: &Option<Vec<String>>,
) -> Result<Vec<&'a ModelSpec>, CliError> {
    match filter {
        None => Ok(config.muts.iter().collect()),
        Some(ids) => {
            ids.iter()
                .map(|id| {
                    config.muts.iter().find(|m| m.id == *id).ok_or_else(|| {
                        CliError::Config(format!("--models names unknown model {id:?}"))
                    })
                })
                .collect()
        }
    }
}

pub fn cmd_run(run_dir: &Path, opts: &RunCmdOpts) -> Result<(), CliError> {
    let mut stage = open_stage(run_dir, opts.cache_dir.as_deref())?;
    stage
        .run
        .require_artifact("run", &stage.run.tests_path(), "generate")?;
    let put = read_put(&stage.run)?;
    let tests: Vec<TestCase> = read_jsonl(&stage.run.tests_path())?;
    let muts: Vec<ModelSpec> = selected_muts(&stage.config, &opts.models)?
        .into_iter()
        .cloned()
        .collect();
    let repeats = opts.repeats.unwrap_or(stage.config.repeats);

    let baseline_tests: Vec<TestCase> = tests
        .iter()
        .filter(|t| t.generator == GeneratorKind::Baseline)
        .cloned()
        .collect();
    let spec_prompt = if stage.config.spec_agreement
        && stage.run.specprompt_path().is_file()
        && !baseline_tests.is_empty()
    {
        Some(PromptUnderTest::parse(
            &stage.run.read_text(&stage.run.specprompt_path())?,
        )?)
    } else {
        None
    };

    if opts.dry_run {
        let put_cells = tests.len() * muts.len() * repeats as usize;
        let spec_cells = spec_prompt
            .as_ref()
            .map(|_| baseline_tests.len() * muts.len() * repeats as usize)
            .unwrap_or(0);
        println!("run: {put_cells} prompt-under-test requests + {spec_cells} spec-prompt requests");
        return Ok(());
    }

    let mut options = RunOptions {
        repeats,
        policy: stage.config.policy(),
        target: RunTarget::Put,
        workers: stage.config.workers,
    };
    let mut results = run_matrix(&stage.gateway, &put, &tests, &muts, &options);

    if let Some(spec_prompt) = &spec_prompt {
        options.target = RunTarget::Spec;
        results.extend(run_matrix(
            &stage.gateway,
            spec_prompt,
            &baseline_tests,
            &muts,
            &options,
        ));
    }

    let n_errors = results.iter().filter(|r| r.error.is_some()).count();
    write_jsonl(&stage.run.results_path(), &results)?;
    let artifacts = digest_artifacts(&stage.run, &[stage.run.results_path()])?;
    let notes = BTreeMap::from([
        ("cells".to_string(), results.len().to_string()),
        ("errors".to_string(), n_errors.to_string()),
        ("repeats".to_string(), repeats.to_string()),
    ]);
    stage.manifest.complete_stage(
        "run",
        StageRecord {
            completed: true,
            artifacts,
            notes,
        },
    );
    stage.run.write_manifest(&stage.manifest)?;
    eprintln!("ran {} cells ({n_errors} errored)", results.len());
    Ok(())
}

// --- eval ---

pub fn cmd_eval(run_dir: &Path, opts: &EvalOpts) -> Result<(), CliError> {
    let mut stage = open_stage(run_dir, opts.cache_dir.as_deref())?;
    stage
        .run
        .require_artifact("eval", &stage.run.results_path(), "run")?;
    stage
        .run
        .require_artifact("eval", &stage.run.tests_path(), "generate")?;
    let put = read_put(&stage.run)?;
    let mut tests: Vec<TestCase> = read_jsonl(&stage.run.tests_path())?;
    let results: Vec<TestRunResult> = read_jsonl(&stage.run.results_path())?;

    let judge = match &opts.judge {
        Some(id) => stage
            .config
            .model_by_id(id)
            .ok_or_else(|| CliError::Config(format!("--judge names unknown model {id:?}")))?
            .clone(),
        None => stage.config.judge().clone(),
    };

    if opts.dry_run {
        let n_compliance = results.iter().filter(|r| r.output_text.is_some()).count();
        println!(
            "eval: {} validity requests + {n_compliance} compliance requests",
            tests.len()
        );
        return Ok(());
    }

    let policy = stage.config.policy();
    let ctx = MetaContext::new(&stage.gateway, &judge, &policy);

    // validity is judged once per test against the (possibly edited) IS
    let mut validity_verdicts: BTreeMap<String, Verdict> = BTreeMap::new();
    if stage.run.is_path().is_file() {
        let input_spec = InputSpec::from_file_text(
            &stage.run.read_text(&stage.run.is_path())?,
            &put.id,
            provenance_of(&stage.run, &stage.manifest, "extract", &stage.run.is_path())?,
        );
        for test in tests.iter_mut() {
            let verdict = judge_validity(ctx, &input_spec, test)?;
            apply_validity(test, &verdict);
            validity_verdicts.insert(test.test_uid.clone(), verdict);
        }
        write_jsonl(&stage.run.tests_path(), &tests)?;
    }

    let spec_prompt = if stage.run.specprompt_path().is_file() {
        Some(PromptUnderTest::parse(
            &stage.run.read_text(&stage.run.specprompt_path())?,
        )?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(results.len());
    let mut n_unevaluated = 0usize;
    for result in results {
        let target_prompt = match result.target {
            RunTarget::Put => &put,
            RunTarget::Spec => spec_prompt.as_ref().ok_or_else(|| {
                CliError::StageDependency(
                    "results reference the spec prompt but specprompt.prompt is missing".into(),
                )
            })?,
        };
        let (compliance, judge_error) = if result.output_text.is_some() {
            match judge_compliance(ctx, target_prompt, &result) {
                Ok(verdict) => (Some(verdict), None),
                // unusable judge replies leave the cell unevaluated instead
                // of guessing a verdict
                Err(EvalError::UnparseableVerdict { raw }) => {
                    (None, Some(format!("unparseable verdict: {raw:?}")))
                }
                Err(EvalError::Gateway(g)) => (None, Some(format!("judge request failed: {g}"))),
                Err(other) => return Err(other.into()),
            }
        } else {
            (None, None)
        };
        if compliance.is_none() && result.error.is_none() {
            n_unevaluated += 1;
        }
        let validity = validity_verdicts.get(&result.test_uid).cloned();
        records.push(EvalRecord {
            run: result,
            compliance,
            judge_error,
            validity,
        });
    }

    write_jsonl(&stage.run.evals_path(), &records)?;
    let artifacts = digest_artifacts(
        &stage.run,
        &[stage.run.evals_path(), stage.run.tests_path()],
    )?;
    let notes = BTreeMap::from([
        ("judge".to_string(), judge.id.clone()),
        ("unevaluated".to_string(), n_unevaluated.to_string()),
    ]);
    stage.manifest.complete_stage(
        "eval",
        StageRecord {
            completed: true,
            artifacts,
            notes,
        },
    );
    stage.run.write_manifest(&stage.manifest)?;
    eprintln!(
        "evaluated {} cells ({n_unevaluated} unevaluated)",
        records.len()
    );
    Ok(())
}

// --- metrics ---

pub fn cmd_metrics(run_dir: &Path) -> Result<(), CliError> {
    let mut stage = open_stage(run_dir, None)?;
    stage
        .run
        .require_artifact("metrics", &stage.run.evals_path(), "eval")?;
    stage
        .run
        .require_artifact("metrics", &stage.run.tests_path(), "generate")?;
    let put = read_put(&stage.run)?;
    let tests: Vec<TestCase> = read_jsonl(&stage.run.tests_path())?;
    let records: Vec<EvalRecord> = read_jsonl(&stage.run.evals_path())?;
    let rules = if stage.run.rules_path().is_file() {
        Some(RuleSet::from_json(
            &stage.run.read_text(&stage.run.rules_path())?,
        )?)
    } else {
        None
    };

    let spec_records: Vec<EvalRecord> = records
        .iter()
        .filter(|r| r.run.target == RunTarget::Spec)
        .cloned()
        .collect();
    let agreement = if spec_records.is_empty() {
        None
    } else {
        let spec_keys: BTreeSet<(String, String, u32)> = spec_records
            .iter()
            .map(|r| (r.run.test_uid.clone(), r.run.model_id.clone(), r.run.repeat))
            .collect();
        let put_subset: Vec<EvalRecord> = records
            .iter()
            .filter(|r| {
                r.run.target == RunTarget::Put
                    && spec_keys.contains(&(
                        r.run.test_uid.clone(),
                        r.run.model_id.clone(),
                        r.run.repeat,
                    ))
            })
            .cloned()
            .collect();
        Some(spec_agreement(&put.id, &put_subset, &spec_records)?)
    };

    let metrics = compute_run_metrics(
        &put.id,
        &tests,
        rules.as_ref(),
        &records,
        agreement.as_ref(),
    );
    let mut json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    json.push('\n');
    stage.run.write_text(&stage.run.metrics_path(), &json)?;

    let artifacts = digest_artifacts(&stage.run, &[stage.run.metrics_path()])?;
    stage.manifest.complete_stage(
        "metrics",
        StageRecord {
            completed: true,
            artifacts,
            notes: BTreeMap::new(),
        },
    );
    stage.run.write_manifest(&stage.manifest)?;
    eprintln!("metrics written for {}", put.id);
    Ok(())
}

// --- report ---

pub fn cmd_report(run_dir: &Path, opts: &ReportOpts) -> Result<(), CliError> {
    let mut stage = open_stage(run_dir, None)?;
    stage
        .run
        .require_artifact("report", &stage.run.metrics_path(), "metrics")?;
    let metrics: RunMetrics =
        serde_json::from_str(&stage.run.read_text(&stage.run.metrics_path())?)
            .map_err(|e| CliError::Parse(format!("metrics.json: {e}")))?;
    let tests: Vec<TestCase> = if stage.run.tests_path().is_file() {
        read_jsonl(&stage.run.tests_path())?
    } else {
        Vec::new()
    };
    let records: Vec<EvalRecord> = if stage.run.evals_path().is_file() {
        read_jsonl(&stage.run.evals_path())?
    } else {
        Vec::new()
    };
    let rules = if stage.run.rules_path().is_file() {
        Some(RuleSet::from_json(
            &stage.run.read_text(&stage.run.rules_path())?,
        )?)
    } else {
        None
    };

    let formats = opts.formats.clone().unwrap_or_else(|| {
        BTreeSet::from([
            ReportFormat::Markdown,
            ReportFormat::Csv,
            ReportFormat::Json,
        ])
    });
    let sections = match &opts.sections {
        Some(sections) => sections.clone(),
        None => {
            // default to every section that has data
            let mut sections = BTreeSet::new();
            if !metrics.noncompliance.is_empty() {
                sections.insert(ReportSection::NoncomplianceTable);
            }
            if !metrics.rule_kind_noncompliance.is_empty() {
                sections.insert(ReportSection::RulekindTable);
            }
            if !tests.is_empty() {
                sections.insert(ReportSection::ValidityChartData);
                sections.insert(ReportSection::PerTestDrilldown);
            }
            if metrics.groundedness.is_some() {
                sections.insert(ReportSection::GroundednessTable);
            }
            if metrics.spec_agreement.is_some() {
                sections.insert(ReportSection::SpecAgreement);
            }
            sections
        }
    };

    let data = vec![PromptRunData {
        put_id: metrics.put_id.clone(),
        metrics,
        tests,
        rules,
        records,
    }];
    let spec = ReportSpec {
        run_id: stage.manifest.run_id.clone(),
        formats,
        sections,
    };
    let files = render_report(&spec, &data)?;

    let report_dir = stage.run.report_dir();
    let mut artifacts = BTreeMap::new();
    for file in &files {
        let path = report_dir.join(&file.path);
        stage.run.write_text(&path, &file.content)?;
        artifacts.insert(
            format!("report/{}", file.path),
            stage.run.artifact_digest(&path)?,
        );
    }
    stage.manifest.complete_stage(
        "report",
        StageRecord {
            completed: true,
            artifacts,
            notes: BTreeMap::new(),
        },
    );
    stage.run.write_manifest(&stage.manifest)?;
    eprintln!("report written: {} file(s)", files.len());
    Ok(())
}

// --- pipeline ---

pub fn cmd_pipeline(
    prompt_path: &Path,
    run_dir: &Path,
    config: &Config,
    opts: &PipelineOpts,
) -> Result<(), CliError> {
    if opts.dry_run {
        println!("pipeline request estimate (R = extracted rule count, T = tests, M = models):");
        println!("  extract: 4 + R meta-model requests");
        println!("  generate: 2 meta-model requests");
        println!("  run: T x M x repeats + baseline x M spec-prompt requests");
        println!("  eval: T validity + answered-cell compliance requests");
        println!("  metrics/report: no requests");
        return Ok(());
    }
    cmd_extract(
        prompt_path,
        run_dir,
        config,
        &ExtractOpts {
            cache_dir: opts.cache_dir.clone(),
            run_id: opts.run_id.clone(),
            num_rules: None,
            skip_groundedness: false,
            dry_run: false,
        },
    )?;
    cmd_generate(
        run_dir,
        &GenerateOpts {
            cache_dir: opts.cache_dir.clone(),
            ..Default::default()
        },
    )?;
    cmd_run(
        run_dir,
        &RunCmdOpts {
            cache_dir: opts.cache_dir.clone(),
            ..Default::default()
        },
    )?;
    cmd_eval(
        run_dir,
        &EvalOpts {
            cache_dir: opts.cache_dir.clone(),
            ..Default::default()
        },
    )?;
    cmd_metrics(run_dir)?;
    cmd_report(run_dir, &ReportOpts::default())?;
    Ok(())
}

// --- benchmarks ---

pub fn cmd_benchmarks_list() -> String {
    let mut out = String::new();
    for put in specprobe_core::prompt_store::list_benchmarks() {
        out.push_str(&format!("{:<14} {}\n", put.id, put.source));
    }
    out
}

pub fn cmd_benchmarks_show(id: &str) -> Result<String, CliError> {
    specprobe_core::prompt_store::benchmark(id)
        .map(|put| put.to_file_text())
        .ok_or_else(|| CliError::Config(format!("no bundled benchmark named {id:?}")))
}

pub fn cmd_benchmarks_export(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for (id, text) in specprobe_core::prompt_store::BENCHMARK_SOURCES {
        let path = dir.join(format!("{id}.prompt"));
        std::fs::write(&path, text)
            .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parse `--sections` names into the typed set.
pub fn parse_sections(names: &[String]) -> Result<BTreeSet<ReportSection>, CliError> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "noncompliance_table" => Ok(ReportSection::NoncomplianceTable),
            "rulekind_table" => Ok(ReportSection::RulekindTable),
            "validity_chart_data" => Ok(ReportSection::ValidityChartData),
            "groundedness_table" => Ok(ReportSection::GroundednessTable),
            "spec_agreement" => Ok(ReportSection::SpecAgreement),
            "per_test_drilldown" => Ok(ReportSection::PerTestDrilldown),
            other => Err(CliError::Config(format!(
                "unknown report section {other:?}"
            ))),
        })
        .collect()
}

/// Parse `--formats` names into the typed set.
pub fn parse_formats(names: &[String]) -> Result<BTreeSet<ReportFormat>, CliError> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(CliError::Config(format!("unknown report format {other:?}"))),
        })
        .collect()
}
