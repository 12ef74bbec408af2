use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ordersmith::backend::{HttpConfig, MockConfig, Ordering};
use ordersmith::optimizer::{criterion_oracle, OrderingContext};
use ordersmith::runner::{
    build_backend, load_report_entry, rank_orderings, render_report, render_report_csv,
    run_experiment, select_examples, BackendSpec, CriterionChoice, ExperimentConfig, Prepared,
    RunOptions, RunnerError, Setting, REPORT_CSV_FILE, REPORT_MD_FILE,
};
use ordersmith::ScoringMethod;

#[derive(Parser)]
#[command(name = "ordersmith", version, about = "Select demo orderings for in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and rank orderings of each seed's demos.
    RankOrderings {
        #[command(flatten)]
        common: Common,
        /// Also report each ordering's accuracy on a labeled dev sample.
        #[arg(long)]
        dev_accuracy: bool,
    },
    /// Search over demo sets, scoring one ordering per set.
    SelectExamples {
        #[command(flatten)]
        common: Common,
    },
    /// Rank, select, and evaluate on the test split; writes artifacts to --out.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Response cache file (default: <out>/cache.tsv).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, hide = true)]
        stop_after_cells: Option<usize>,
    },
    /// Merge finished `evaluate` output directories into report tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write report.md and report.csv here as well as printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// fewshot | fewshot-u | fewshot-up
    #[arg(long, value_parser = parse_enum::<Setting>)]
    setting: Option<Setting>,
    /// direct | pmi
    #[arg(long, value_parser = parse_enum::<ScoringMethod>)]
    scoring: Option<ScoringMethod>,
    /// pdo | local-e | global-e | oracle | random
    #[arg(long, value_parser = parse_enum::<CriterionChoice>)]
    criterion: Option<CriterionChoice>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(setting) = self.setting {
            config.setting = setting;
        }
        if let Some(scoring) = self.scoring {
            config.scoring = scoring;
        }
        if let Some(criterion) = self.criterion {
            config.criterion = criterion;
        }
        match (self.backend, &config.backend) {
            (Some(BackendKind::Mock), BackendSpec::Http(_)) => {
                config.backend = BackendSpec::Mock(MockConfig::default())
            }
            (Some(BackendKind::Http), BackendSpec::Mock(_)) => {
                config.backend = BackendSpec::Http(HttpConfig::default())
            }
            _ => {}
        }
        Ok(config)
    }
}

#[derive(Serialize)]
struct RankLine<'a> {
    seed: u64,
    sample_index: usize,
    ordering: &'a Ordering,
    criterion: &'static str,
    score: f64,
    rank: Option<usize>,
    dev_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct SetLine<'a> {
    seed: u64,
    rank: usize,
    train_indices: Vec<usize>,
    ordering: &'a Ordering,
    criterion: &'static str,
    score: f64,
}

/// Writes JSON lines to `<out>/<name>` when an output directory is given, else stdout.
fn emit<T: Serialize>(out: Option<&Path>, name: &str, lines: &[T]) -> Result<()> {
    let mut text = String::new();
    for line in lines {
        text.push_str(&serde_json::to_string(line)?);
        text.push('\n');
    }
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_rank(common: &Common, dev_accuracy: bool) -> Result<()> {
    let mut prepared = Prepared::new(common.load()?)?;
    prepared.force_dev = dev_accuracy;
    let backend = build_backend(&prepared.config, &prepared.space)?;
    let mut lines = Vec::new();
    let mut summaries = Vec::new();
    let ranked: Vec<_> = (0..prepared.config.n_seeds)
        .map(|i| rank_orderings(&prepared, &*backend, i))
        .collect::<Result<_, _>>()?;
    for seed in &ranked {
        let ctx = OrderingContext {
            backend: &*backend,
            template: &prepared.config.template,
            space: &prepared.space,
            demos: &seed.draw.demos,
        };
        let mut accs = Vec::new();
        for s in &seed.scored {
            let rank = seed.selected.iter().position(|x| x.sample_index == s.sample_index);
            let acc = if dev_accuracy {
                Some(-criterion_oracle(&ctx, &s.ordering, &seed.draw.dev)?)
            } else {
                None
            };
            if let Some(a) = acc {
                accs.push((rank.is_some(), a));
            }
            lines.push(RankLine {
                seed: seed.draw.seed,
                sample_index: s.sample_index,
                ordering: &s.ordering,
                criterion: s.criterion.as_str(),
                score: s.score,
                rank,
                dev_accuracy: acc,
            });
        }
        if dev_accuracy {
            let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let all = mean(accs.iter().map(|a| a.1).collect());
            let sel = mean(accs.iter().filter(|a| a.0).map(|a| a.1).collect());
            summaries.push(format!(
                "seed {}: selected dev accuracy {:.4}, mean over all {:.4}",
                seed.draw.seed, sel, all
            ));
        }
    }
    emit(common.out.as_deref(), "rankings.jsonl", &lines)?;
    for s in summaries {
        eprintln!("{s}");
    }
    Ok(())
}

fn cmd_select(common: &Common) -> Result<()> {
    let prepared = Prepared::new(common.load()?)?;
    let backend = build_backend(&prepared.config, &prepared.space)?;
    let mut found = Vec::new();
    for i in 0..prepared.config.n_seeds {
        let seed = prepared.config.seed.wrapping_add(i as u64);
        let (pool, sets) = select_examples(&prepared, &*backend, i)?;
        found.push((seed, pool, sets));
    }
    let mut lines = Vec::new();
    for (seed, pool, sets) in &found {
        for (rank, set) in sets.iter().enumerate() {
            lines.push(SetLine {
                seed: *seed,
                rank,
                train_indices: set.pool_indices.iter().map(|&j| pool[j]).collect(),
                ordering: &set.ordering,
                criterion: set.criterion.as_str(),
                score: set.score,
            });
        }
    }
    emit(common.out.as_deref(), "example_sets.jsonl", &lines)
}

fn cmd_evaluate(common: &Common, cache: Option<PathBuf>, stop_after_cells: Option<usize>) -> Result<()> {
    let Some(out) = &common.out else {
        bail!("evaluate needs --out");
    };
    let options = RunOptions {
        out_dir: out.clone(),
        cache_path: cache,
        stop_after_cells,
    };
    let outcome = run_experiment(common.load()?, &options)?;
    let r = &outcome.report;
    println!(
        "{} / {}: accuracy {} over {} runs, ECE {:.1}",
        outcome.manifest.dataset,
        outcome.manifest.method,
        r.accuracy_cell(),
        r.n_runs,
        r.ece_mean
    );
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let entries = runs
        .iter()
        .map(|dir| load_report_entry(dir).with_context(|| format!("reading {}", dir.display())))
        .collect::<Result<Vec<_>>>()?;
    let markdown = render_report(&entries);
    print!("{markdown}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_MD_FILE), &markdown)?;
        fs::write(dir.join(REPORT_CSV_FILE), render_report_csv(&entries))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::RankOrderings { common, dev_accuracy } => cmd_rank(common, *dev_accuracy),
        Command::SelectExamples { common } => cmd_select(common),
        Command::Evaluate {
            common,
            cache,
            stop_after_cells,
        } => cmd_evaluate(common, cache.clone(), *stop_after_cells),
        Command::Report { runs, out } => cmd_report(runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<RunnerError>() {
                Some(RunnerError::Interrupted { .. }) => ExitCode::from(3),
                Some(RunnerError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
