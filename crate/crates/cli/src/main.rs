use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use specprobe_cli::config::Config;
use specprobe_cli::{
    cmd_benchmarks_export, cmd_benchmarks_list, cmd_benchmarks_show, cmd_eval, cmd_extract,
    cmd_generate, cmd_metrics, cmd_pipeline, cmd_report, cmd_run, parse_formats, parse_sections,
    CliError, EvalOpts, ExtractOpts, GenerateOpts, GeneratorChoice, PipelineOpts, ReportOpts,
    RunCmdOpts,
};

/// Turn a prompt into a tested artifact: extract its input/output
/// specification, generate rule-targeted tests, run them across models,
/// judge compliance, and report the results.
#[derive(Parser)]
#[command(name = "specprobe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum GeneratorArg {
    RuleBased,
    Baseline,
    #[default]
    Both,
}

impl From<GeneratorArg> for GeneratorChoice {
    fn from(value: GeneratorArg) -> Self {
        match value {
            GeneratorArg::RuleBased => GeneratorChoice::RuleBased,
            GeneratorArg::Baseline => GeneratorChoice::Baseline,
            GeneratorArg::Both => GeneratorChoice::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract the input spec, output rules (+inverses, groundedness), and
    /// task spec from a prompt file into a new run directory.
    Extract {
        /// Prompt file to analyze.
        prompt: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Run id recorded in the manifest (default: run directory name).
        #[arg(long)]
        run_id: Option<String>,
        /// Ask for at least this many crucial rules instead of all rules.
        #[arg(long)]
        num_rules: Option<u32>,
        /// Skip the per-rule groundedness checks.
        #[arg(long)]
        no_groundedness: bool,
        /// Print the would-be request count and exit without network I/O.
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate test cases from the extracted artifacts.
    Generate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        generator: GeneratorArg,
        /// Tests per rule for the rule-based generator.
        #[arg(long)]
        per_rule: Option<u32>,
        /// Baseline test count.
        #[arg(long)]
        num: Option<u32>,
        /// Also write tests.csv in the 5-column interchange layout.
        #[arg(long)]
        export_csv: bool,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Run every test against the configured models under test.
    Run {
        #[arg(long)]
        run_dir: PathBuf,
        /// Comma-separated model ids (default: all configured MUTs).
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long)]
        repeats: Option<u32>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Judge output compliance and test validity.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        /// Judge model id (default: configured judge, else meta-model).
        #[arg(long)]
        judge: Option<String>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Compute metrics from the eval records.
    Metrics {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Render the report files.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Comma-separated: markdown,csv,json.
        #[arg(long, value_delimiter = ',')]
        formats: Option<Vec<String>>,
        /// Comma-separated section names, e.g. noncompliance_table.
        #[arg(long, value_delimiter = ',')]
        sections: Option<Vec<String>>,
    },
    /// Run the full pipeline: extract, generate, run, eval, metrics, report.
    Pipeline {
        prompt: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Inspect or export the bundled benchmark prompts.
    Benchmarks {
        #[command(subcommand)]
        action: BenchmarksAction,
    },
    /// Print a starter config to stdout.
    InitConfig,
}

#[derive(Subcommand)]
enum BenchmarksAction {
    /// List bundled benchmark ids.
    List,
    /// Print one benchmark prompt file.
    Show { id: String },
    /// Write all benchmark prompt files into a directory.
    Export { dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract {
            prompt,
            run_dir,
            config,
            cache_dir,
            run_id,
            num_rules,
            no_groundedness,
            dry_run,
        } => {
            let config = Config::load(&config)?;
            cmd_extract(
                &prompt,
                &run_dir,
                &config,
                &ExtractOpts {
                    cache_dir,
                    run_id,
                    num_rules,
                    skip_groundedness: no_groundedness,
                    dry_run,
                },
            )
        }
        Command::Generate {
            run_dir,
            generator,
            per_rule,
            num,
            export_csv,
            cache_dir,
            dry_run,
        } => cmd_generate(
            &run_dir,
            &GenerateOpts {
                generator: generator.into(),
                per_rule,
                num,
                export_csv,
                cache_dir,
                dry_run,
            },
        ),
        Command::Run {
            run_dir,
            models,
            repeats,
            cache_dir,
            dry_run,
        } => cmd_run(
            &run_dir,
            &RunCmdOpts {
                models,
                repeats,
                cache_dir,
                dry_run,
            },
        ),
        Command::Eval {
            run_dir,
            judge,
            cache_dir,
            dry_run,
        } => cmd_eval(
            &run_dir,
            &EvalOpts {
                judge,
                cache_dir,
                dry_run,
            },
        ),
        Command::Metrics { run_dir } => cmd_metrics(&run_dir),
        Command::Report {
            run_dir,
            formats,
            sections,
        } => {
            let formats = formats.map(|f| parse_formats(&f)).transpose()?;
            let sections = sections.map(|s| parse_sections(&s)).transpose()?;
            cmd_report(&run_dir, &ReportOpts { formats, sections })
        }
        Command::Pipeline {
            prompt,
            run_dir,
            config,
            cache_dir,
            run_id,
            dry_run,
        } => {
            let config = Config::load(&config)?;
            cmd_pipeline(
                &prompt,
                &run_dir,
                &config,
                &PipelineOpts {
                    cache_dir,
                    run_id,
                    dry_run,
                },
            )
        }
        Command::Benchmarks { action } => match action {
            BenchmarksAction::List => {
                print!("{}", cmd_benchmarks_list());
                Ok(())
            }
            BenchmarksAction::Show { id } => {
                print!("{}", cmd_benchmarks_show(&id)?);
                Ok(())
            }
            BenchmarksAction::Export { dir } => {
                let paths = cmd_benchmarks_export(&dir)?;
                eprintln!("wrote {} prompt files to {}", paths.len(), dir.display());
                Ok(())
            }
        },
        Command::InitConfig => {
            let mut json =
                serde_json::to_string_pretty(&Config::example()).expect("config serializes");
            json.push('\n');
            print!("{json}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("specprobe: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
