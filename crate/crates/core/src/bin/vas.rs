use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vas::env::{CostKind, CostModel, GridDims, Task};
use vas::harness::{
    dump_trajectory, evaluate, load_checkpoint, save_checkpoint, save_report, EvalReport, KnnSearch, Oracle,
    RandomSearch, ReportRow, SearchPolicy, DEFAULT_TRIALS,
};
use vas::searcher::ActionMode;
use vas::taskdata::{generate_tasks, load_task_set, save_task_set, shift_class, GenConfig, Split, DEFAULT_SNR};
use vas::trainer::{train, TrainConfig, TrainMode};
use vas::{Result, VasError};

#[derive(Parser)]
#[command(name = "vas", version, about = "Budgeted visual active search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task set.
    Gen(GenArgs),
    /// Train a policy and write a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate one policy and write a report CSV.
    Eval(EvalArgs),
    /// Train and evaluate with lambda in {0, 0.01, 0.1, 1}.
    AblateLambda(AblateArgs),
    /// Evaluate several policies into one report.
    Compare(CompareArgs),
    /// Write the query sequence and heatmaps of one episode.
    DumpTraj(DumpArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of tasks tagged with --split.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = Split::Train)]
    split: Split,
    /// Extra held-out tasks from the same distribution.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    /// Extra tasks with a shifted class direction.
    #[arg(long, default_value_t = 0)]
    n_ood: usize,
    #[arg(long, default_value_t = 7)]
    rows: usize,
    #[arg(long, default_value_t = 7)]
    cols: usize,
    #[arg(long, default_value_t = 0.1)]
    rate: f64,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    smoothing: f64,
    #[arg(long, default_value_t = DEFAULT_SNR)]
    snr: f64,
    /// Seed of the class direction shared by all in-distribution tasks.
    #[arg(long, default_value_t = 0)]
    class_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = Split::Train)]
    split: Split,
    /// JSON file with TrainConfig fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct EvalOptions {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    #[arg(long, default_value_t = CostKind::Uniform)]
    cost: CostKind,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<f64>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    adapt: bool,
    /// Inner learning rate for adaptation; defaults to the checkpoint's.
    #[arg(long)]
    lr_inner: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, value_parser = parse_action, default_value = "sample")]
    action: ActionMode,
    /// Queries per step; defaults to the checkpoint's.
    #[arg(long = "R")]
    queries_per_step: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or one of random, knn, oracle.
    #[arg(long)]
    policy: String,
    #[command(flatten)]
    opts: EvalOptions,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving one checkpoint per lambda and report.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CostKind::Uniform)]
    cost: CostKind,
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated checkpoint directories or baseline names.
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<String>,
    #[command(flatten)]
    opts: EvalOptions,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
    /// Position of the task within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    budget: f64,
    #[arg(long, default_value_t = CostKind::Uniform)]
    cost: CostKind,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    adapt: bool,
    #[arg(long)]
    lr_inner: Option<f64>,
    #[arg(long, value_parser = parse_action, default_value = "sample")]
    action: ActionMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: VasError| e.to_string())
}

fn parse_action(s: &str) -> std::result::Result<ActionMode, String> {
    match s {
        "sample" => Ok(ActionMode::Sample),
        "greedy" => Ok(ActionMode::Greedy),
        _ => Err(format!("unknown action mode `{s}` (sample or greedy)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => {
            let policy = resolve_policy(&a.policy, &a.opts)?;
            let tasks = split_tasks(&a.opts.tasks, a.opts.split)?;
            let report = run_eval(policy.as_ref(), &tasks, &a.opts)?;
            print_rows(&report.csv_rows());
            save_report(&a.report, &report.csv_rows())
        }
        Command::Compare(a) => {
            let tasks = split_tasks(&a.opts.tasks, a.opts.split)?;
            let mut rows = Vec::new();
            for name in &a.policies {
                let policy = resolve_policy(name, &a.opts)?;
                rows.extend(run_eval(policy.as_ref(), &tasks, &a.opts)?.csv_rows());
            }
            print_rows(&rows);
            save_report(&a.report, &rows)
        }
        Command::AblateLambda(a) => ablate(a),
        Command::DumpTraj(a) => dump(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = GenConfig {
        feature_dim: a.feature_dim,
        target_rate: a.rate,
        smoothing: a.smoothing,
        snr: a.snr,
        seed: a.class_seed,
        ..GenConfig::new(GridDims::new(a.rows, a.cols)?)
    };
    cfg.validate()?;
    let mut set: Vec<(Task, Split)> = Vec::new();
    let mut next = a.seed;
    let mut add = |cfg: &GenConfig, n: usize, split: Split| -> Result<()> {
        set.extend(generate_tasks(cfg, n, next)?.into_iter().map(|t| (t, split)));
        next = next.wrapping_add(n as u64);
        Ok(())
    };
    add(&cfg, a.n, a.split)?;
    add(&cfg, a.n_test, Split::Test)?;
    if a.n_ood > 0 {
        let shifted = shift_class(&cfg, &mut ChaCha8Rng::seed_from_u64(a.class_seed.wrapping_add(1)));
        add(&shifted, a.n_ood, Split::Ood)?;
    }
    save_task_set(&a.out, &set)?;
    println!("wrote {} tasks to {}", set.len(), a.out.display());
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| VasError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| VasError::parse(path, e))
}

fn split_tasks(dir: &Path, split: Split) -> Result<Vec<Task>> {
    let tasks: Vec<Task> = load_task_set(dir, Some(split))?.into_iter().map(|(t, _)| t).collect();
    if tasks.is_empty() {
        return Err(VasError::Validation(format!("no {split} tasks in {}", dir.display())));
    }
    Ok(tasks)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    let tasks = split_tasks(&a.tasks, a.split)?;
    let out = train(&cfg, &tasks)?;
    save_checkpoint(&a.out, &cfg, &out)?;
    if let Some(last) = out.epoch_rewards.last() {
        println!("trained {} for {} epochs, final mean reward {last:.3}", cfg.mode, cfg.epochs);
    }
    Ok(())
}

fn resolve_policy(name: &str, opts: &EvalOptions) -> Result<Box<dyn SearchPolicy>> {
    match name {
        "random" => Ok(Box::new(RandomSearch)),
        "knn" => Ok(Box::new(KnnSearch)),
        "oracle" => Ok(Box::new(Oracle)),
        dir => {
            let ck = load_checkpoint(Path::new(dir))?;
            let adapt = opts.adapt.then(|| opts.lr_inner.unwrap_or(ck.manifest.config.lr_inner));
            ck.policy(adapt, opts.action, opts.queries_per_step)
        }
    }
}

fn run_eval(policy: &dyn SearchPolicy, tasks: &[Task], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate(
        policy,
        tasks,
        &CostModel::from_kind(opts.cost),
        &opts.budgets,
        opts.trials,
        opts.seed,
    )
}

fn print_rows(rows: &[ReportRow]) {
    for r in rows {
        println!(
            "{:<20} {:<9} C={:<6} ANT {:.3} [{:.3}, {:.3}] (n={}, trials={})",
            r.policy, r.cost_model, r.budget, r.ant, r.ci_lo, r.ci_hi, r.n_tasks, r.n_trials
        );
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = read_config(a.config.as_deref())?;
    let train_set = split_tasks(&a.tasks, Split::Train)?;
    let test_set = split_tasks(&a.tasks, Split::Test)?;
    let mut rows = Vec::new();
    for lambda in [0.0, 0.01, 0.1, 1.0] {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let out = train(&cfg, &train_set)?;
        save_checkpoint(&a.out.join(format!("lambda_{lambda}")), &cfg, &out)?;
        let adapt = cfg.mode.is_meta().then_some(cfg.lr_inner);
        let policy = vas::harness::Learned {
            name: format!("{}_lambda_{lambda}", cfg.mode),
            theta: out.theta,
            phi: out.phi,
            queries_per_step: cfg.queries_per_step,
            adapt,
            action: ActionMode::Sample,
        };
        let report = evaluate(&policy, &test_set, &CostModel::from_kind(a.cost), &a.budgets, a.trials, a.seed)?;
        rows.extend(report.csv_rows());
    }
    print_rows(&rows);
    save_report(&a.out.join("report.csv"), &rows)
}

fn dump(a: DumpArgs) -> Result<()> {
    let ck = load_checkpoint(&a.policy)?;
    let phi = ck
        .phi
        .clone()
        .ok_or_else(|| VasError::Validation("trajectories need a checkpoint with a searcher".into()))?;
    let tasks = split_tasks(&a.tasks, a.split)?;
    let task = tasks.get(a.index).ok_or_else(|| {
        VasError::Validation(format!("task index {} out of range ({} tasks)", a.index, tasks.len()))
    })?;
    let policy = vas::harness::Learned {
        name: ck.manifest.mode.to_string(),
        theta: ck.theta.clone(),
        phi,
        queries_per_step: ck.manifest.config.queries_per_step,
        adapt: a.adapt.then(|| a.lr_inner.unwrap_or(ck.manifest.config.lr_inner)),
        action: a.action,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let record = policy.episode(task, a.budget, &CostModel::from_kind(a.cost), &mut rng)?;
    let traj = dump_trajectory(&record, task, &a.out)?;
    println!("{} queries, {} targets found", traj.steps.len(), record.total_reward);
    Ok(())
}
