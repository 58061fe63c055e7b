//! `geoerasure`: audits of geographical erasure in language models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use geo_erasure::metrics::RSelection;
use geo_erasure::prompts::SplitStrategy;
use geo_erasure::temperature::TauObjective;

use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(
    name = "geoerasure",
    version,
    about = "Measure and mitigate geographical erasure in language models"
)]
struct Cli {
    /// TOML audit configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scoring server; overrides the config. GEO_ERASURE_BACKEND_URL is used
    /// when neither names a backend.
    #[arg(long, global = true)]
    backend_url: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; default is the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Selection {
    MedianOfEr,
    ErOfAggregate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Objective {
    Average,
    Aggregate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TauMode {
    /// Exact if the backend supports temperature, otherwise aggregate.
    Auto,
    Exact,
    Aggregate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Random,
    Pronoun,
    Verb,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Expand templates and subjects into a prompt-set file.
    ExpandPrompts {
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write train/test folds of a prompt set.
    SplitPrompts {
        /// Prompt-set file; defaults to expanding the configured templates.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "random")]
        strategy: Strategy,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the prompts and write the erasure report, ratio table and
    /// boxplot statistics.
    Audit {
        #[arg(long)]
        r: Option<f64>,
    },
    /// Pick r by matching median ER^r to median KL.
    ChooseR {
        /// Reuse the predictions of an existing report instead of scoring.
        #[arg(long)]
        report_in: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Selection>,
    },
    /// Country-mention distribution of a training corpus.
    CorpusProfile {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        aliases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Counts table; defaults to the output path with a .csv extension.
        #[arg(long)]
        counts_out: Option<PathBuf>,
        /// Also compare data, ground truth and model from this report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long, default_value_t = geo_erasure::corpus::DEFAULT_FLOOR)]
        floor: f64,
        #[arg(long)]
        case_insensitive: bool,
    },
    /// Search the softmax temperature that minimizes ER^r.
    MitigateTemp {
        #[arg(long)]
        report_in: PathBuf,
        /// Defaults to the report's r.
        #[arg(long)]
        r: Option<f64>,
        #[arg(long, default_value = "0.25:4.0")]
        interval: String,
        #[arg(long, value_enum, default_value = "average")]
        objective: Objective,
        #[arg(long, value_enum, default_value = "auto")]
        mode: TauMode,
        /// Texts, one per line, for the perplexity trace.
        #[arg(long)]
        perplexity_texts: Option<PathBuf>,
        /// Curve as JSON; the delimited table goes next to it as .csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Count, per country, the reports whose aggregate erases it.
    Compare {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        gdp: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// `country,ratio,erased` table for map plotting.
    ExportMap {
        #[arg(long)]
        report_in: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a mock table over the scoring wire protocol.
    ServeMock {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value = "mock")]
        label: String,
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        backend_url: cli.backend_url,
        seed: cli.seed,
        out_dir: cli.out_dir,
        workers: cli.workers,
    };
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::ExpandPrompts {
            templates,
            subjects,
            out,
        } => commands::expand_prompts(config, &overrides, templates, subjects, &out),
        Command::SplitPrompts {
            prompts,
            strategy,
            folds,
            out,
        } => {
            let strategy = match strategy {
                Strategy::Random => SplitStrategy::Random,
                Strategy::Pronoun => SplitStrategy::Pronoun,
                Strategy::Verb => SplitStrategy::Verb,
            };
            commands::split_prompts(config, &overrides, prompts, strategy, folds, &out)
        }
        Command::Audit { r } => commands::audit(config, &overrides, r),
        Command::ChooseR { report_in, mode } => {
            let mode = mode.map(|m| match m {
                Selection::MedianOfEr => RSelection::MedianOfEr,
                Selection::ErOfAggregate => RSelection::ErOfAggregate,
            });
            commands::choose_r(config, &overrides, report_in.as_deref(), mode)
        }
        Command::CorpusProfile {
            manifest,
            aliases,
            out,
            counts_out,
            report,
            r,
            floor,
            case_insensitive,
        } => commands::corpus_profile(
            &overrides,
            commands::ProfileArgs {
                manifest,
                aliases,
                out,
                counts_out,
                report,
                r,
                floor,
                case_insensitive,
            },
        ),
        Command::MitigateTemp {
            report_in,
            r,
            interval,
            objective,
            mode,
            perplexity_texts,
            out,
        } => {
            let objective = match objective {
                Objective::Average => TauObjective::Average,
                Objective::Aggregate => TauObjective::Aggregate,
            };
            commands::mitigate_temp(
                config,
                &overrides,
                commands::TempArgs {
                    report_in,
                    r,
                    interval,
                    objective,
                    mode,
                    perplexity_texts,
                    out,
                },
            )
        }
        Command::Compare { reports, gdp, out } => commands::compare(config, &overrides, &reports, gdp, out),
        Command::ExportMap { report_in, out } => commands::export_map(&report_in, &out),
        Command::ServeMock { table, label, addr } => commands::serve_mock(&table, &label, &addr),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("geoerasure: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
