//! Command-line surface: one subcommand per protocol stage plus the
//! end-to-end run.
//!
//! Exit codes: 0 success, 1 validation error (including usage), 2 execution
//! error, 3 hold-out violation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use promptlab::corpus;
use promptlab::error::{Error, Result};
use promptlab::experiment::{
    BaselineChoice, ExperimentConfig, GridCell, Runner, RunView,
};
use promptlab::report;
use promptlab::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Structured,
}

#[derive(Debug, Parser)]
#[command(
    name = "promptlab",
    version,
    about = "Empirical prompt optimization and evaluation for binary text classification"
)]
pub struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed override; stage seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for backend calls.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,

    /// Name of the configured backend to classify with.
    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Run directory override.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Output format for result summaries.
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: OutputFormat,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the config, corpus, codebook, and backends.
    Validate,
    /// Split participants into train/dev/test.
    Split,
    /// Assemble and score baseline prompt variants on train.
    SearchBaselines(SearchBaselinesArgs),
    /// Run automatic prompt engineering from both baseline extremes.
    Ape,
    /// Sample few-shot combinations and select the best per baseline.
    SelectShots,
    /// Select personas, shot reasonings, and shot explanations on train.
    SelectDecorators,
    /// Evaluate every grid cell on the development set.
    RunGrid,
    /// Designate the cell for the single test evaluation.
    DesignateFinal(DesignateArgs),
    /// Evaluate the designated cell on the held-out test set (once).
    EvalTest,
    /// Render tables and plots from persisted artifacts.
    Report,
    /// Run the whole protocol end to end and render reports.
    RunAll,
    /// Convert a GoEmotions TSV export into a binary corpus file.
    ConvertGoemotions(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct SearchBaselinesArgs {
    /// Number of baseline variants to assemble and score.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DesignateArgs {
    /// Cell as baseline/shots/technique, e.g. top/few/ape.
    #[arg(long)]
    pub cell: String,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// GoEmotions TSV export (text, emotion ids, comment id).
    #[arg(long)]
    pub input: PathBuf,
    /// Emotion name from the GoEmotions taxonomy, e.g. gratitude.
    #[arg(long)]
    pub emotion: String,
    /// Output corpus path (JSONL).
    #[arg(long)]
    pub output: PathBuf,
}

pub struct Outcome {
    pub summary: serde_json::Value,
    pub text: Vec<String>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Error::Configuration("--config is required for this subcommand".into())
    })?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(master) = cli.seed {
        config.split.seed = util::derive_seed(master, "split");
        config.search.seed = util::derive_seed(master, "search");
        config.evaluation.bootstrap_seed = util::derive_seed(master, "bootstrap");
    }
    if let Some(parallelism) = cli.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(backend) = &cli.backend {
        config.roles.classify = backend.clone();
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn bootstrap_json(b: &promptlab::metrics::BootstrapSummary) -> serde_json::Value {
    json!({
        "point": b.point,
        "se": b.se,
        "ci_low": b.ci_low,
        "ci_high": b.ci_high,
        "resamples": b.resamples,
        "skipped": b.skipped,
    })
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Validate => {
            let config = load_config(cli)?;
            let notes = config.validate()?;
            Ok(Outcome {
                summary: json!({ "command": "validate", "ok": true, "notes": notes }),
                text: {
                    let mut lines = vec!["configuration is valid".to_string()];
                    lines.extend(notes);
                    lines
                },
            })
        }
        Command::Split => {
            let runner = Runner::open(load_config(cli)?)?;
            let split = runner.stage_split()?;
            Ok(Outcome {
                summary: json!({
                    "command": "split",
                    "participants": { "train": split.participant_counts[0], "dev": split.participant_counts[1], "test": split.participant_counts[2] },
                    "texts": { "train": split.text_counts[0], "dev": split.text_counts[1], "test": split.text_counts[2] },
                    "seed": runner.config.split.seed,
                }),
                text: vec![format!(
                    "split: {}/{}/{} participants, {}/{}/{} texts (train/dev/test)",
                    split.participant_counts[0],
                    split.participant_counts[1],
                    split.participant_counts[2],
                    split.text_counts[0],
                    split.text_counts[1],
                    split.text_counts[2]
                )],
            })
        }
        Command::SearchBaselines(args) => {
            let mut config = load_config(cli)?;
            if let Some(count) = args.count {
                config.budgets.baseline_count = count;
            }
            let runner = Runner::open(config)?;
            let split = runner.require_split()?;
            let baselines = runner.stage_baselines(&split)?;
            let search = &baselines.search;
            Ok(Outcome {
                summary: json!({
                    "command": "search-baselines",
                    "count": search.leaderboard.len(),
                    "top": { "index": search.top_index, "f1": search.top().score },
                    "bottom": { "index": search.bottom_index, "f1": search.bottom().score },
                }),
                text: vec![format!(
                    "scored {} baselines on train: top #{} (F1 {:.2}), bottom #{} (F1 {:.2})",
                    search.leaderboard.len(),
                    search.top_index,
                    search.top().score,
                    search.bottom_index,
                    search.bottom().score
                )],
            })
        }
        Command::Ape => {
            let runner = Runner::open(load_config(cli)?)?;
            let split = runner.require_split()?;
            let baselines = runner.require_baselines()?;
            let mut summary = BTreeMap::new();
            let mut text = Vec::new();
            for baseline in BaselineChoice::ALL {
                let artifact = runner.stage_ape(&split, &baselines, baseline)?;
                let trace = &artifact.trace;
                summary.insert(
                    baseline.as_str().to_string(),
                    json!({
                        "seed_f1": trace.seed.score,
                        "best_f1": trace.global_best.score,
                        "candidates": trace.generations.iter().map(|g| g.candidates.len()).sum::<usize>(),
                        "backend_calls": trace.budget.backend_calls,
                    }),
                );
                text.push(format!(
                    "ape {}: seed F1 {:.2} -> best F1 {:.2} over {} generations",
                    baseline.as_str(),
                    trace.seed.score,
                    trace.global_best.score,
                    trace.generations.len()
                ));
            }
            Ok(Outcome {
                summary: json!({ "command": "ape", "baselines": summary }),
                text,
            })
        }
        Command::SelectShots => {
            let runner = Runner::open(load_config(cli)?)?;
            let split = runner.require_split()?;
            let baselines = runner.require_baselines()?;
            let shots = runner.stage_shots(&split, &baselines)?;
            Ok(Outcome {
                summary: json!({
                    "command": "select-shots",
                    "pool": shots.pool_ids.len(),
                    "combinations": shots.combos.len(),
                    "bottom": { "winner_index": shots.bottom.winner_index, "f1": shots.bottom.winner.score, "n": shots.bottom.winner.candidate.shot_ids().len() },
                    "top": { "winner_index": shots.top.winner_index, "f1": shots.top.winner.score, "n": shots.top.winner.candidate.shot_ids().len() },
                }),
                text: vec![format!(
                    "selected shots from {} combinations (pool {}): bottom #{} (F1 {:.2}), top #{} (F1 {:.2})",
                    shots.combos.len(),
                    shots.pool_ids.len(),
                    shots.bottom.winner_index,
                    shots.bottom.winner.score,
                    shots.top.winner_index,
                    shots.top.winner.score
                )],
            })
        }
        Command::SelectDecorators => {
            let runner = Runner::open(load_config(cli)?)?;
            let split = runner.require_split()?;
            let baselines = runner.require_baselines()?;
            let shots = runner.require_shots()?;
            let decorators = runner.stage_decorators(&split, &baselines, &shots)?;
            let mut text = Vec::new();
            if let Some(persona) = &decorators.persona {
                text.push(format!(
                    "persona: #{} {:?} (mean F1 {:.2})",
                    persona.selected_index,
                    persona.persona,
                    persona.scores[persona.selected_index].mean_f1
                ));
            }
            for (baseline, selection) in &decorators.reasonings {
                text.push(format!("reasonings[{baseline}]: {} shots decorated", selection.choices.len()));
            }
            for (baseline, selection) in &decorators.explanations {
                text.push(format!("explanations[{baseline}]: {} shots decorated", selection.choices.len()));
            }
            if text.is_empty() {
                text.push("no decorator selections needed by the requested grid".into());
            }
            Ok(Outcome {
                summary: json!({
                    "command": "select-decorators",
                    "persona": decorators.persona.as_ref().map(|p| json!({ "index": p.selected_index, "persona": p.persona })),
                    "reasonings": decorators.reasonings.keys().collect::<Vec<_>>(),
                    "explanations": decorators.explanations.keys().collect::<Vec<_>>(),
                }),
                text,
            })
        }
        Command::RunGrid => {
            let runner = Runner::open(load_config(cli)?)?;
            let split = runner.require_split()?;
            let baselines = runner.require_baselines()?;
            let mut ape = BTreeMap::new();
            for baseline in BaselineChoice::ALL {
                ape.insert(baseline, runner.require_ape(baseline)?);
            }
            let shots = runner.require_shots()?;
            let decorators = runner.require_decorators()?;
            let cells = runner.stage_grid(&split, &baselines, &ape, &shots, &decorators)?;
            let mut text = Vec::new();
            for artifact in &cells {
                let stars = artifact
                    .eval
                    .paired_vs_anchor
                    .as_ref()
                    .map(|p| p.stars.as_str())
                    .unwrap_or("");
                text.push(format!(
                    "{}: F1 {:.2}{stars}",
                    artifact.cell,
                    artifact.eval.metrics.f1_or_zero()
                ));
            }
            Ok(Outcome {
                summary: json!({
                    "command": "run-grid",
                    "cells": cells.iter().map(|c| json!({
                        "cell": c.cell.to_string(),
                        "f1": c.eval.metrics.f1_or_zero(),
                        "se": c.eval.bootstraps.get("f1").map(|b| b.se),
                        "stars": c.eval.paired_vs_anchor.as_ref().map(|p| p.stars.as_str()),
                    })).collect::<Vec<_>>(),
                }),
                text,
            })
        }
        Command::DesignateFinal(args) => {
            let cell = GridCell::parse(&args.cell)?;
            let runner = Runner::open(load_config(cli)?)?;
            let designation = runner.designate_final(cell)?;
            Ok(Outcome {
                summary: json!({
                    "command": "designate-final",
                    "cell": designation.cell.to_string(),
                    "test_consumed": designation.test_consumed,
                }),
                text: vec![format!("designated final cell {}", designation.cell)],
            })
        }
        Command::EvalTest => {
            let runner = Runner::open(load_config(cli)?)?;
            let test = runner.eval_test()?;
            let mut text = vec![format!("test evaluation of {} over {} texts:", test.cell, test.n)];
            for (name, b) in &test.eval.bootstraps {
                text.push(format!(
                    "  {name}: {:.2} CI [{:.2}-{:.2}] ({:.2})",
                    b.point, b.ci_low, b.ci_high, b.se
                ));
            }
            Ok(Outcome {
                summary: json!({
                    "command": "eval-test",
                    "cell": test.cell.to_string(),
                    "n": test.n,
                    "metrics": test.eval.bootstraps.iter().map(|(k, b)| (k.clone(), bootstrap_json(b))).collect::<BTreeMap<_, _>>(),
                }),
                text,
            })
        }
        Command::Report => {
            let config = load_config(cli)?;
            let view = RunView::open(&config.out_dir);
            let paths = report::render_all(&view)?;
            let mut files = vec![paths.dev_table.clone(), paths.summary.clone()];
            files.extend(paths.final_table.clone());
            files.extend(paths.histograms.clone());
            files.extend(paths.traces.clone());
            Ok(Outcome {
                summary: json!({
                    "command": "report",
                    "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                }),
                text: files
                    .iter()
                    .map(|p| format!("wrote {}", p.display()))
                    .collect(),
            })
        }
        Command::RunAll => {
            let runner = Runner::open(load_config(cli)?)?;
            let summary = runner.run_all()?;
            let view = RunView::open(runner.run_dir().root());
            let paths = report::render_all(&view)?;
            let mut text = vec![format!(
                "protocol complete for {:?}: {} dev cells, final cell {}",
                summary.construct,
                summary.cells.len(),
                summary.final_cell
            )];
            for (name, metric) in &summary.test_metrics {
                text.push(format!(
                    "  test {name}: {:.2} CI [{:.2}-{:.2}] ({:.2})",
                    metric.point, metric.ci_low, metric.ci_high, metric.se
                ));
            }
            text.push(format!("reports under {}", paths.summary.parent().unwrap().display()));
            Ok(Outcome {
                summary: json!({
                    "command": "run-all",
                    "construct": summary.construct,
                    "final_cell": summary.final_cell,
                    "cells": summary.cells.iter().map(|c| json!({
                        "cell": c.cell, "f1": c.f1, "se": c.f1_se, "stars": c.stars,
                    })).collect::<Vec<_>>(),
                    "test_metrics": summary.test_metrics,
                    "reports": paths.summary.parent().unwrap().display().to_string(),
                }),
                text,
            })
        }
        Command::ConvertGoemotions(args) => {
            let converted = corpus::convert_goemotions(&args.input, &args.emotion)?;
            corpus::write_corpus_jsonl(&converted, &args.output)?;
            Ok(Outcome {
                summary: json!({
                    "command": "convert-goemotions",
                    "records": converted.len(),
                    "positive_fraction": converted.positive_fraction(),
                    "output": args.output.display().to_string(),
                }),
                text: vec![format!(
                    "converted {} records ({:.2} positive) to {}",
                    converted.len(),
                    converted.positive_fraction(),
                    args.output.display()
                )],
            })
        }
    }
}

/// Parse arguments, run the command, print its summary, and return the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };

    match execute(&cli) {
        Ok(outcome) => {
            match cli.format {
                OutputFormat::Text => {
                    for line in &outcome.text {
                        println!("{line}");
                    }
                }
                OutputFormat::Structured => {
                    println!("{}", outcome.summary);
                }
            }
            0
        }
        Err(e) => {
            match cli.format {
                OutputFormat::Text => eprintln!("error: {e}"),
                OutputFormat::Structured => {
                    println!(
                        "{}",
                        json!({ "ok": false, "error": e.to_string(), "exit_code": e.exit_code() })
                    );
                }
            }
            e.exit_code()
        }
    }
}
