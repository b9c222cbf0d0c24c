//! `relkit` command-line interface.
//!
//! Exit codes: 0 on success, 2 when the configuration or inputs are invalid,
//! 1 when a computation fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use relkit::active_learning::Strategy;
use relkit::pipelines::{
    run, run_active_learning, run_eval, run_fewshot, run_osr, run_score, run_zeroshot_osr, score_json, train_heads,
    write_reports, PipelineError, Report, RunConfig, REPORT_FILE,
};

#[derive(Parser)]
#[command(name = "relkit", version, about = "Reliability evaluation over frozen embeddings and logits")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configuration's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; overrides the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every head and L-BFGS model and save it under `<out>/heads/`.
    TrainHead,
    /// Accuracy, NLL, Brier, ECE, calibration, selective prediction,
    /// label uncertainty and subpopulation metrics.
    Eval,
    /// Open-set recognition on semantic-shift splits.
    Osr,
    /// Few-shot linear evaluation on embeddings.
    Fewshot,
    /// Mahalanobis and relative Mahalanobis OSR on raw embeddings.
    ZeroshotOsr,
    /// Batch active learning on the train split as the pool.
    ActiveLearn(AlArgs),
    /// Reliability scores over existing reports, grouped by model.
    Score {
        /// Report files; defaults to every report under the output directory.
        reports: Vec<PathBuf>,
    },
    /// Every task listed in the configuration.
    Run,
}

#[derive(Args)]
struct AlArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    init_factor: Option<f64>,
    #[arg(long)]
    batch_factor: Option<f64>,
    #[arg(long)]
    max_factor: Option<f64>,
}

impl Command {
    fn dir_name(&self) -> Option<&'static str> {
        match self {
            Command::Eval => Some("eval"),
            Command::Osr => Some("osr"),
            Command::Fewshot => Some("fewshot"),
            Command::ZeroshotOsr => Some("zeroshot_osr"),
            Command::ActiveLearn(_) => Some("active_learning"),
            Command::TrainHead | Command::Score { .. } | Command::Run => None,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::invalid("--config is required for this command"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

fn score(cli: &Cli, paths: &[PathBuf]) -> Result<(), PipelineError> {
    let out = match (&cli.out, &cli.config) {
        (Some(o), _) => o.clone(),
        (None, Some(_)) => load_config(cli)?.output_dir,
        (None, None) => PathBuf::from("out"),
    };
    let mut paths = paths.to_vec();
    if paths.is_empty() {
        if !out.is_dir() {
            return Err(PipelineError::invalid(format!("no reports given and {} is not a directory", out.display())));
        }
        find_reports(&out, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(PipelineError::invalid(format!("no {REPORT_FILE} found under {}", out.display())));
    }
    let mut by_model: BTreeMap<String, Vec<Report>> = BTreeMap::new();
    for p in &paths {
        let r = Report::read(p)?;
        by_model.entry(r.model.clone()).or_default().push(r);
    }
    let dir = out.join("scores");
    fs::create_dir_all(&dir)?;
    for (model, reports) in by_model {
        let s = run_score(&reports)?;
        let areas: Vec<String> = s
            .areas
            .iter()
            .map(|(a, v)| match v.score {
                Some(x) => format!("{}={x:.2}", a.as_str()),
                None => format!("{}=absent", a.as_str()),
            })
            .collect();
        println!("{model}: overall={:.2} {}", s.overall, areas.join(" "));
        fs::write(dir.join(format!("{model}.json")), score_json(&s))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Score { reports } = &cli.command {
        return score(cli, reports);
    }
    let mut cfg = load_config(cli)?;
    if let Command::TrainHead = cli.command {
        for dir in train_heads(&cfg)? {
            println!("{}", dir.display());
        }
        return Ok(());
    }
    if let Command::ActiveLearn(a) = &cli.command {
        let al = &mut cfg.active_learning;
        if let Some(s) = a.strategy {
            al.strategy = s;
        }
        al.init_per_class_factor = a.init_factor.unwrap_or(al.init_per_class_factor);
        al.batch_per_class_factor = a.batch_factor.unwrap_or(al.batch_per_class_factor);
        al.max_per_class_factor = a.max_factor.unwrap_or(al.max_per_class_factor);
    }
    let reports = match &cli.command {
        Command::Eval => run_eval(&cfg)?,
        Command::Osr => run_osr(&cfg)?,
        Command::Fewshot => run_fewshot(&cfg)?,
        Command::ZeroshotOsr => run_zeroshot_osr(&cfg)?,
        Command::ActiveLearn(_) => run_active_learning(&cfg)?,
        Command::Run => run(&cfg)?,
        Command::TrainHead | Command::Score { .. } => unreachable!("handled above"),
    };
    let dir = match cli.command.dir_name() {
        Some(sub) => cfg.output_dir.join(sub),
        None => cfg.output_dir.clone(),
    };
    write_reports(&reports, &dir)?;
    for r in &reports {
        for w in &r.provenance.warnings {
            warn!("{}: {w}", r.model);
        }
        for s in &r.provenance.skipped {
            info!("{}: skipped {} on {}/{}: {}", r.model, s.task, s.dataset, s.split, s.reason);
        }
        println!("{}", dir.join(&r.model).join(REPORT_FILE).display());
        if let Some(s) = &r.score {
            println!("{}: overall={:.2}", r.model, s.overall);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
