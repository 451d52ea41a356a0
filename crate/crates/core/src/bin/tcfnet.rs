//! `tcfnet` — generate synthetic sessions, train the six topologies under
//! both cross-validation strategies, evaluate, and build the comparison and
//! statistics reports.
//!
//! Failures print one line `error[<kind>]: <message>` on stderr and exit
//! with 1 (2 for command-line usage errors, followed by the usage text).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcfnet::arch::Topology;
use tcfnet::checkpoint;
use tcfnet::config::{RunConfig, EVALUATE_KEYS, GENERATE_KEYS, TRAIN_KEYS};
use tcfnet::eval::{
    check_unique, compare_report, make_folds, read_csv, stats_report, to_csv_string, write_csv,
    CurveRecord, ResultRecord, Strategy,
};
use tcfnet::experiment::{evaluate_fold, fold_path, run_jobs, ExperimentConfig, Plan, Prepared};
use tcfnet::sim::{generate_dataset, load_dataset, OracleScorer, SessionDataset};
use tcfnet::{Error, Result};

const DATA_ENV: &str = "TCFNET_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "tcfnet",
    version,
    about = "P300 decoding with EEG-TCFNet and its baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic oddball dataset.
    Generate(GenerateArgs),
    /// Train topologies under cross-validation, one checkpoint per fold.
    Train(TrainArgs),
    /// Score checkpoints (or the oracle) on their held-out runs.
    Evaluate(EvaluateArgs),
    /// Mean/SD per topology with paired Wilcoxon tests, both strategies.
    Compare(ReportArgs),
    /// Kolmogorov–Smirnov normality and Wilcoxon signed-rank report.
    Stats(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<u32>,
    #[arg(long)]
    sessions: Option<u32>,
    /// Runs per session.
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Noise preset: high, medium or street.
    #[arg(long)]
    snr: Option<String>,
    /// key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for checkpoints, histories and the fold plan.
    #[arg(long)]
    out: PathBuf,
    /// Topology id, comma-separated ids, or `all`.
    #[arg(long)]
    arch: Option<String>,
    /// session, subject, or both.
    #[arg(long)]
    strategy: Option<String>,
    /// Dataset directory (default: $TCFNET_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// weighted, natural or undersample.
    #[arg(long)]
    balance: Option<String>,
    /// Rule count of the fuzzy block.
    #[arg(long)]
    fnb_k: Option<usize>,
    #[arg(long)]
    window_ms: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A training output directory, or `oracle`.
    #[arg(long)]
    checkpoints: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    max_blocks: Option<u32>,
    /// Where results.csv and curves.csv go (default: the checkpoint directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Oracle only: strategy, seed and epoch window of the folds.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// results.csv files to combine.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let mut lines = text.lines().peekable();
            // clap lists missing arguments on indented lines after the first;
            // fold them in so the machine-readable line is self-contained.
            let mut first = lines
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            while let Some(more) = lines.next_if(|l| l.starts_with(' ') && !l.trim().is_empty()) {
                first.push(' ');
                first.push_str(more.trim());
            }
            eprintln!("error[usage]: {first}");
            for line in lines.filter(|l| !l.trim().is_empty()) {
                eprintln!("{line}");
            }
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => report(a, false),
        Command::Stats(a) => report(a, true),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

/// Defaults, then $TCFNET_DATA_DIR, then the config file; flags come last.
fn base_config(keys: &[(&str, &str)], file: Option<&Path>) -> Result<RunConfig> {
    let mut rc = RunConfig::with_defaults(keys);
    if keys.iter().any(|(k, _)| *k == "data") {
        if let Some(dir) = std::env::var_os(DATA_ENV) {
            rc.set("data", dir.to_string_lossy())?;
        }
    }
    if let Some(path) = file {
        rc.merge(&RunConfig::load(path)?)?;
    }
    Ok(rc)
}

fn path_str(p: Option<&PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn dataset(rc: &RunConfig) -> Result<SessionDataset> {
    let dir = rc.get("data").ok_or_else(|| {
        Error::InvalidArgument(format!("no dataset given: pass --data or set {DATA_ENV}"))
    })?;
    load_dataset(Path::new(dir))
}

fn topologies(spec: &str) -> Result<Vec<Topology>> {
    if spec == "all" {
        return Ok(Topology::ALL.to_vec());
    }
    let mut out: Vec<Topology> = Vec::new();
    for name in spec.split(',') {
        let t: Topology = name.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

fn strategies(spec: &str) -> Result<Vec<Strategy>> {
    match spec {
        "both" | "all" => Ok(Strategy::ALL.to_vec()),
        s => Ok(vec![s.parse()?]),
    }
}

fn folds(
    prepared: &Prepared,
    strategies: &[Strategy],
    seed: u64,
) -> Result<Vec<tcfnet::eval::Fold>> {
    let ids = prepared.ids();
    let mut all = Vec::new();
    for &s in strategies {
        all.extend(make_folds(&ids, s, seed)?);
    }
    Ok(all)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut rc = base_config(GENERATE_KEYS, a.config.as_deref())?;
    rc.set_opt("subjects", a.subjects)?;
    rc.set_opt("sessions", a.sessions)?;
    rc.set_opt("runs", a.runs)?;
    rc.set_opt("seed", a.seed)?;
    rc.set_opt("snr", a.snr)?;
    rc.set("out", a.out.display().to_string())?;
    let g = rc.generator()?;
    let manifest = generate_dataset(&g, &a.out, true)?;
    rc.echo(&a.out, "generate", &manifest.config_hash)?;
    println!(
        "generated {} runs ({} subjects × {} sessions × {}) in {}",
        manifest.runs.len(),
        g.subjects,
        g.sessions,
        g.runs_per_session,
        a.out.display()
    );
    println!(
        "config_hash={} dataset_hash={}",
        manifest.config_hash, manifest.dataset_hash
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut rc = base_config(TRAIN_KEYS, a.config.as_deref())?;
    rc.set_opt("arch", a.arch)?;
    rc.set_opt("strategy", a.strategy)?;
    rc.set_opt("data", path_str(a.data.as_ref()))?;
    rc.set_opt("jobs", a.jobs)?;
    rc.set_opt("seed", a.seed)?;
    rc.set_opt("lr", a.lr)?;
    rc.set_opt("batch", a.batch)?;
    rc.set_opt("max_epochs", a.max_epochs)?;
    rc.set_opt("patience", a.patience)?;
    rc.set_opt("balance", a.balance)?;
    rc.set_opt("fnb_k", a.fnb_k)?;
    rc.set_opt("window_ms", a.window_ms)?;
    rc.set("out", a.out.display().to_string())?;

    let exp = rc.experiment()?;
    let archs = topologies(rc.require("arch")?)?;
    let strats = strategies(rc.require("strategy")?)?;
    let jobs: usize = rc.parsed("jobs")?;
    let ds = dataset(&rc)?;
    let prepared = Prepared::load(&ds, &exp.preprocess, None, jobs > 1)?;
    let folds = folds(&prepared, &strats, exp.seed)?;
    let plan = Plan::new(exp.clone(), &ds.manifest.dataset_hash, archs.clone(), folds)
        .merge_existing(&a.out)?;
    plan.save(&a.out)?;
    rc.echo(&a.out, "train", &plan.config_hash)?;
    log::info!(
        "training {} topologies × {} folds, config {}",
        archs.len(),
        plan.folds.len(),
        plan.config_hash
    );

    let outcomes = run_jobs(&prepared, &archs, &plan.folds, &exp, Some(&a.out), jobs)?;
    for o in &outcomes {
        let best = o
            .history
            .best_epoch
            .map_or("-".to_string(), |e| e.to_string());
        println!(
            "{} {} epochs={} best={} accuracy={:.2} ce={:.4}",
            o.record.topology,
            o.record.fold,
            o.history.epochs.len(),
            best,
            o.record.accuracy,
            o.record.cross_entropy
        );
    }
    println!("config_hash={}", plan.config_hash);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut rc = base_config(EVALUATE_KEYS, a.config.as_deref())?;
    rc.set("checkpoints", a.checkpoints.clone())?;
    rc.set_opt("data", path_str(a.data.as_ref()))?;
    rc.set_opt("max_blocks", a.max_blocks)?;
    rc.set_opt("out", path_str(a.out.as_ref()))?;
    rc.set_opt("strategy", a.strategy)?;
    rc.set_opt("seed", a.seed)?;
    rc.set_opt("window_ms", a.window_ms)?;

    let ds = dataset(&rc)?;
    let (results, curves, hash, out) = if a.checkpoints == "oracle" {
        let out =
            PathBuf::from(rc.get("out").ok_or_else(|| {
                Error::InvalidArgument("--out is required with the oracle".into())
            })?);
        let exp = rc.experiment()?;
        let prepared = Prepared::load(&ds, &exp.preprocess, None, false)?;
        let mut results = Vec::new();
        let mut curves = Vec::new();
        for fold in folds(&prepared, &strategies(rc.require("strategy")?)?, exp.seed)? {
            let data = prepared.fold_data(&fold)?;
            let (r, c) = evaluate_fold(&OracleScorer, None, "oracle", &fold, &data, &exp)?;
            results.push(r);
            curves.extend(c);
        }
        (results, curves, exp.hash(), out)
    } else {
        let dir = PathBuf::from(&a.checkpoints);
        let plan = Plan::load(&dir)?;
        if plan.dataset_hash != ds.manifest.dataset_hash {
            return Err(Error::InvalidArgument(format!(
                "{} was trained on dataset {}, not {}",
                dir.display(),
                plan.dataset_hash,
                ds.manifest.dataset_hash
            )));
        }
        let exp = ExperimentConfig {
            max_blocks: rc.parsed("max_blocks")?,
            ..plan.experiment.clone()
        };
        let out = rc
            .get("out")
            .map(PathBuf::from)
            .unwrap_or_else(|| dir.clone());
        let (results, curves) = evaluate_checkpoints(&dir, &plan, &ds, &exp)?;
        (results, curves, exp.hash(), out)
    };
    write_csv(&out.join("results.csv"), &results)?;
    write_csv(&out.join("curves.csv"), &curves)?;
    rc.echo(&out, "evaluate", &hash)?;
    for r in &results {
        println!(
            "{} {} accuracy={:.2} ce={:.4}",
            r.topology, r.fold, r.accuracy, r.cross_entropy
        );
    }
    println!(
        "wrote {} results to {}",
        results.len(),
        out.join("results.csv").display()
    );
    println!("config_hash={hash}");
    Ok(())
}

/// Every checkpoint of the plan that exists, in (topology, fold) order.
fn evaluate_checkpoints(
    dir: &Path,
    plan: &Plan,
    ds: &SessionDataset,
    exp: &ExperimentConfig,
) -> Result<(Vec<ResultRecord>, Vec<CurveRecord>)> {
    let prepared = Prepared::load(ds, &exp.preprocess, None, false)?;
    let mut scored: Vec<(usize, usize, ResultRecord, Vec<CurveRecord>)> = Vec::new();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let present: Vec<(usize, Topology, PathBuf)> = plan
            .topologies
            .iter()
            .enumerate()
            .map(|(ti, &t)| (ti, t, fold_path(dir, t, fold, "tcfn")))
            .filter(|(_, _, p)| p.exists())
            .collect();
        if present.is_empty() {
            continue;
        }
        let data = prepared.fold_data(fold)?;
        for (ti, t, path) in present {
            let model = checkpoint::load(&path)?;
            if model.config.topology != t {
                return Err(Error::Format {
                    path,
                    msg: format!("holds a {} model, expected {t}", model.config.topology),
                });
            }
            let (r, c) = evaluate_fold(&model, Some(&model), t.name(), fold, &data, exp)?;
            scored.push((ti, fi, r, c));
        }
    }
    let expected = plan.topologies.len() * plan.folds.len();
    if scored.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no checkpoints found under {}",
            dir.display()
        )));
    }
    if scored.len() < expected {
        log::warn!(
            "{} of {expected} checkpoints present; training looks incomplete",
            scored.len()
        );
    }
    scored.sort_by_key(|s| (s.0, s.1));
    let mut results = Vec::with_capacity(scored.len());
    let mut curves = Vec::new();
    for (_, _, r, c) in scored {
        results.push(r);
        curves.extend(c);
    }
    Ok((results, curves))
}

fn report(a: ReportArgs, stats: bool) -> Result<()> {
    let mut records: Vec<ResultRecord> = Vec::new();
    for path in &a.results {
        records.extend(read_csv::<ResultRecord>(path)?);
    }
    check_unique(&records)?;
    let text = if stats {
        to_csv_string(&stats_report(&records)?)?
    } else {
        to_csv_string(&compare_report(&records)?)?
    };
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
