//! Evaluation, the brute-force oracle, checkpoints, reports and trajectory dumps.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{greedy_classification_policy, knn_active_search_policy, random_policy, KnnPosterior};
use crate::env::{CostKind, CostModel, EpisodeState, Task};
use crate::error::{Result, VasError};
use crate::predictor::PredictorParams;
use crate::searcher::{ActionMode, SearcherParams};
use crate::tensor::{AdamState, ParamSet, CHECKPOINT_VERSION};
use crate::trainer::{run_inference, EpisodeRecord, TrainConfig, TrainMode, TrainOutput};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const DEFAULT_TRIALS: usize = 5;
/// Largest grid the policy-tree enumeration accepts.
pub const ENUMERATION_MAX_CELLS: usize = 10;
pub const BRUTE_FORCE_MAX_CELLS: usize = 12;

/// A search strategy that can be run on one task.
pub trait SearchPolicy: Sync {
    fn id(&self) -> String;

    /// Runs one episode and returns the number of targets found.
    fn run(&self, task: &Task, budget: f64, cost: &CostModel, rng: &mut ChaCha8Rng) -> Result<f64>;
}

fn drive(
    task: &Task,
    budget: f64,
    cost: &CostModel,
    mut pick: impl FnMut(&EpisodeState) -> Result<usize>,
) -> Result<f64> {
    let mut state = EpisodeState::new(task.dims, budget)?;
    while !state.is_terminal(task, cost) {
        let cell = pick(&state)?;
        state.apply_query(task, cost, cell)?;
    }
    Ok(state.total_reward())
}

pub struct RandomSearch;

impl SearchPolicy for RandomSearch {
    fn id(&self) -> String {
        "random".into()
    }

    fn run(&self, task: &Task, budget: f64, cost: &CostModel, rng: &mut ChaCha8Rng) -> Result<f64> {
        drive(task, budget, cost, |s| random_policy(s, task, cost, rng))
    }
}

/// Ranks cells once by a classifier evaluated with nothing observed.
pub struct GreedyClassification {
    pub theta: PredictorParams,
}

impl SearchPolicy for GreedyClassification {
    fn id(&self) -> String {
        "gc".into()
    }

    fn run(&self, task: &Task, budget: f64, cost: &CostModel, _rng: &mut ChaCha8Rng) -> Result<f64> {
        let p = self.theta.predict(&task.features, &vec![0.0; task.cells()])?;
        drive(task, budget, cost, |s| greedy_classification_policy(&p, s, task, cost))
    }
}

pub struct KnnSearch;

impl SearchPolicy for KnnSearch {
    fn id(&self) -> String {
        "knn".into()
    }

    fn run(&self, task: &Task, budget: f64, cost: &CostModel, _rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut post = KnnPosterior::for_task(task)?;
        drive(task, budget, cost, |s| knn_active_search_policy(&mut post, task, s, cost))
    }
}

/// Reads the labels: queries the cheapest affordable target, lowest index
/// on ties, and the cheapest cell when no target is affordable.
pub struct Oracle;

impl SearchPolicy for Oracle {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn run(&self, task: &Task, budget: f64, cost: &CostModel, _rng: &mut ChaCha8Rng) -> Result<f64> {
        drive(task, budget, cost, |s| {
            let set = s.affordable_unexplored(task, cost);
            let key = |&j: &usize| (task.labels[j] == 0, cost.cost_unchecked(task.dims, s.last, j), j);
            set.iter()
                .min_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite costs"))
                .copied()
                .ok_or(VasError::Terminal)
        })
    }
}

/// Greedy on fixed per-cell probabilities, ignoring features and feedback.
pub struct OracleProbability {
    pub p: Vec<f64>,
}

impl SearchPolicy for OracleProbability {
    fn id(&self) -> String {
        "oracle_probability".into()
    }

    fn run(&self, task: &Task, budget: f64, cost: &CostModel, _rng: &mut ChaCha8Rng) -> Result<f64> {
        drive(task, budget, cost, |s| greedy_classification_policy(&self.p, s, task, cost))
    }
}

/// Trained predictor and searcher.
pub struct Learned {
    pub name: String,
    pub theta: PredictorParams,
    pub phi: SearcherParams,
    pub queries_per_step: usize,
    /// Inner learning rate for test-time adaptation; `None` freezes the predictor.
    pub adapt: Option<f64>,
    pub action: ActionMode,
}

impl Learned {
    pub fn episode(&self, task: &Task, budget: f64, cost: &CostModel, rng: &mut ChaCha8Rng) -> Result<EpisodeRecord> {
        run_inference(
            &self.theta,
            &self.phi,
            task,
            budget,
            cost,
            self.queries_per_step,
            self.adapt,
            self.action,
            rng,
        )
    }
}

impl SearchPolicy for Learned {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn run(&self, task: &Task, budget: f64, cost: &CostModel, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(self.episode(task, budget, cost, rng)?.total_reward)
    }
}

/// Seed of one (task, trial) evaluation; independent of the policy so that
/// policies are compared on common random numbers.
pub fn episode_seed(seed: u64, task: usize, trial: usize) -> u64 {
    let mut z = seed
        .wrapping_add((task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((trial as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetResult {
    pub budget: f64,
    pub ant: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_tasks: usize,
    pub n_trials: usize,
    /// Mean reward of each task over its trials.
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub cost_model: CostKind,
    pub rows: Vec<BudgetResult>,
    pub runtime_ms: u64,
}

impl EvalReport {
    pub fn csv_rows(&self) -> Vec<ReportRow> {
        self.rows
            .iter()
            .map(|r| ReportRow {
                policy: self.policy.clone(),
                cost_model: self.cost_model,
                budget: r.budget,
                ant: r.ant,
                std: r.std,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                n_tasks: r.n_tasks,
                n_trials: r.n_trials,
            })
            .collect()
    }

    pub fn row(&self, budget: f64) -> Option<&BudgetResult> {
        self.rows.iter().find(|r| r.budget == budget)
    }
}

pub fn evaluate(
    policy: &dyn SearchPolicy,
    tasks: &[Task],
    cost: &CostModel,
    budgets: &[f64],
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(VasError::Validation("evaluation needs at least one task".into()));
    }
    if trials == 0 {
        return Err(VasError::Validation("trials must be >= 1".into()));
    }
    if budgets.is_empty() || budgets.iter().any(|b| !(*b >= 0.0)) {
        return Err(VasError::Validation("budgets must be a nonempty list of numbers >= 0".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let rewards: Vec<Vec<f64>> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                (0..trials)
                    .map(|k| {
                        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, i, k));
                        policy.run(task, budget, cost, &mut rng)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let all: Vec<f64> = rewards.iter().flatten().copied().collect();
        let per_task: Vec<f64> = rewards.iter().map(|r| mean(r)).collect();
        let ant = mean(&all);
        let (lo, hi) = bootstrap_mean_ci(&per_task, BOOTSTRAP_RESAMPLES, seed);
        rows.push(BudgetResult {
            budget,
            ant,
            std: std_dev(&all),
            ci_lo: lo.min(ant),
            ci_hi: hi.max(ant),
            n_tasks: tasks.len(),
            n_trials: trials,
            per_task,
        });
    }
    Ok(EvalReport {
        policy: policy.id(),
        cost_model: cost.kind,
        rows,
        runtime_ms: start.elapsed().as_millis() as u64,
    })
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Sample standard deviation (zero for fewer than two values).
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

/// Percentile bootstrap 95% interval of a statistic over resampled indices.
fn bootstrap<F: Fn(&[usize]) -> f64>(n: usize, resamples: usize, seed: u64, stat: F) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007_57a9);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    (percentile(&stats, 0.025), percentile(&stats, 0.975))
}

pub fn bootstrap_mean_ci(x: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    bootstrap(x.len(), resamples, seed, |idx| idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64)
}

/// Bootstrap interval of `mean(a) / mean(b)` resampling paired tasks.
pub fn bootstrap_ratio_ci(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(VasError::ShapeMismatch("ratio needs two nonempty paired samples".into()));
    }
    Ok(bootstrap(a.len(), resamples, seed, |idx| {
        let sa: f64 = idx.iter().map(|&i| a[i]).sum();
        let sb: f64 = idx.iter().map(|&i| b[i]).sum();
        sa / sb
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// `P(X >= positive)` for `X ~ Binomial(positive + negative, 1/2)`.
    pub p_greater: f64,
}

impl SignTest {
    pub fn p_two_sided(&self) -> f64 {
        let n = self.positive + self.negative;
        let k = self.positive.max(self.negative);
        (2.0 * binomial_upper_tail(n, k)).min(1.0)
    }
}

/// Paired sign test of `a > b`, ties dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(VasError::ShapeMismatch("sign test needs paired samples".into()));
    }
    let (mut positive, mut negative, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => positive += 1,
            Some(std::cmp::Ordering::Less) => negative += 1,
            _ => ties += 1,
        }
    }
    Ok(SignTest {
        positive,
        negative,
        ties,
        p_greater: binomial_upper_tail(positive + negative, positive),
    })
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0; // ln C(n, 0)
    let mut total = 0.0;
    for i in 0..=n {
        if i >= k {
            total += (ln_c + ln_half_n).exp();
        }
        ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    total.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BruteForce {
    /// Optimal adaptive policy by recursion over every reachable history.
    Enumerate,
    /// Sum of the `C` largest probabilities.
    SortedSum,
}

/// Optimal expected number of targets for independent cells under unit
/// query cost.
pub fn brute_force_value(p_true: &[f64], budget: usize, method: BruteForce) -> Result<f64> {
    let n = p_true.len();
    if n > BRUTE_FORCE_MAX_CELLS {
        return Err(VasError::Validation(format!(
            "brute force supports at most {BRUTE_FORCE_MAX_CELLS} cells, got {n}"
        )));
    }
    if p_true.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(VasError::Validation("probabilities must lie in [0, 1]".into()));
    }
    match method {
        BruteForce::SortedSum => {
            let mut s = p_true.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            Ok(s.iter().take(budget).sum())
        }
        BruteForce::Enumerate => {
            if n > ENUMERATION_MAX_CELLS {
                return Err(VasError::Validation(format!(
                    "enumeration supports at most {ENUMERATION_MAX_CELLS} cells, got {n}"
                )));
            }
            let mut memo = HashMap::new();
            Ok(enumerate_value(p_true, 0, 0, budget.min(n), &mut memo))
        }
    }
}

/// Value of the best policy from a history given as (queried mask, labels
/// of the queried cells as a bitmask) with `left` queries to go.
fn enumerate_value(p: &[f64], mask: u32, found: u32, left: usize, memo: &mut HashMap<(u32, u32), f64>) -> f64 {
    if left == 0 {
        return 0.0;
    }
    if let Some(&v) = memo.get(&(mask, found)) {
        return v;
    }
    let mut best = 0.0f64;
    for j in 0..p.len() {
        let bit = 1u32 << j;
        if mask & bit != 0 {
            continue;
        }
        let hit = p[j] * (1.0 + enumerate_value(p, mask | bit, found | bit, left - 1, memo));
        let miss = (1.0 - p[j]) * enumerate_value(p, mask | bit, found, left - 1, memo);
        best = best.max(hit + miss);
    }
    memo.insert((mask, found), best);
    best
}

/// One row of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub cost_model: CostKind,
    pub budget: f64,
    pub ant: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_tasks: usize,
    pub n_trials: usize,
}

pub fn write_report_csv<W: std::io::Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_report_csv<R: std::io::Read>(input: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(VasError::from))
        .collect()
}

pub fn save_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| VasError::io(path, e))?;
    write_report_csv(f, rows)
}

pub fn load_report(path: &Path) -> Result<Vec<ReportRow>> {
    let f = fs::File::open(path).map_err(|e| VasError::io(path, e))?;
    read_report_csv(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Index of the decision step; multi-query steps share it.
    pub step: usize,
    pub cell: usize,
    pub row: usize,
    pub col: usize,
    pub label: u8,
    #[serde(rename = "B_after")]
    pub b_after: f64,
    pub p_heatmap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn from_record(record: &EpisodeRecord, task: &Task) -> Self {
        let mut steps = Vec::with_capacity(record.query_count());
        let mut remaining = record.budget;
        for t in &record.transitions {
            for ((&cell, &label), &cost) in t.picks.iter().zip(&t.labels).zip(&t.costs) {
                remaining -= cost;
                let (row, col) = task.dims.coords(cell);
                steps.push(TrajectoryStep {
                    step: t.step,
                    cell,
                    row,
                    col,
                    label,
                    b_after: remaining,
                    p_heatmap: t.p.clone(),
                });
            }
        }
        Trajectory { steps }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn dump_trajectory(record: &EpisodeRecord, task: &Task, path: &Path) -> Result<Trajectory> {
    let traj = Trajectory::from_record(record, task);
    fs::write(path, traj.to_json()).map_err(|e| VasError::io(path, e))?;
    Ok(traj)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let s = fs::read_to_string(path).map_err(|e| VasError::io(path, e))?;
    Trajectory::from_json(&s).map_err(|e| VasError::parse(path, e))
}

/// Recomputes the heatmap of every dumped query from the predictor,
/// repeating the test-time adaptation when `adapt` is set.
pub fn replay_heatmaps(theta: &PredictorParams, task: &Task, traj: &Trajectory, adapt: Option<f64>) -> Result<Vec<Vec<f64>>> {
    let mut theta = theta.clone();
    let mut adam = AdamState::new(theta.params());
    let mut obs = vec![0.0; task.cells()];
    let mut observed = std::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(traj.steps.len());
    let mut i = 0;
    while i < traj.steps.len() {
        let step = traj.steps[i].step;
        let p = theta.predict(&task.features, &obs)?;
        let before = obs.clone();
        while i < traj.steps.len() && traj.steps[i].step == step {
            let s = &traj.steps[i];
            task.dims.check(s.cell)?;
            obs[s.cell] = 2.0 * s.label as f64 - 1.0;
            observed.insert(s.cell, s.label);
            out.push(p.clone());
            i += 1;
        }
        if let Some(lr) = adapt {
            theta.adapt_inner(&task.features, &before, &observed, lr, &mut adam)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
}

pub const PREDICTOR_FILE: &str = "predictor.json";
pub const SEARCHER_FILE: &str = "searcher.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub theta: PredictorParams,
    /// Absent for classifier checkpoints.
    pub phi: Option<SearcherParams>,
}

impl Checkpoint {
    /// Evaluation policy for this checkpoint. Learned policies use the
    /// trained `R` unless overridden.
    pub fn policy(
        &self,
        adapt: Option<f64>,
        action: ActionMode,
        queries_per_step: Option<usize>,
    ) -> Result<Box<dyn SearchPolicy>> {
        match &self.phi {
            None => Ok(Box::new(GreedyClassification {
                theta: self.theta.clone(),
            })),
            Some(phi) => {
                if phi.cells() != self.theta.cells() {
                    return Err(VasError::ShapeMismatch("predictor and searcher disagree on grid size".into()));
                }
                if self.manifest.mode == TrainMode::MpsvasMq && phi.channels() != 4 {
                    return Err(VasError::Validation("multi-query mode needs a 4-channel searcher".into()));
                }
                Ok(Box::new(Learned {
                    name: self.manifest.mode.to_string(),
                    theta: self.theta.clone(),
                    phi: phi.clone(),
                    queries_per_step: queries_per_step.unwrap_or(self.manifest.config.queries_per_step),
                    adapt,
                    action,
                }))
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| VasError::io(path, e))
}

pub fn save_checkpoint(dir: &Path, cfg: &TrainConfig, out: &TrainOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VasError::io(dir, e))?;
    out.theta.params().save(dir.join(PREDICTOR_FILE))?;
    if cfg.mode != TrainMode::Classifier {
        out.phi.params().save(dir.join(SEARCHER_FILE))?;
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        mode: cfg.mode,
        config: cfg.clone(),
        seed: cfg.seed,
        epoch: cfg.epochs,
    };
    write_file(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let f = fs::File::create(&log_path).map_err(|e| VasError::io(&log_path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for row in &out.log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| VasError::io(&log_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| VasError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| VasError::parse(&mpath, e))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(VasError::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let theta = PredictorParams::from_params(ParamSet::load(dir.join(PREDICTOR_FILE))?)?;
    let phi = if manifest.mode == TrainMode::Classifier {
        None
    } else {
        Some(SearcherParams::from_params(ParamSet::load(dir.join(SEARCHER_FILE))?)?)
    };
    Ok(Checkpoint { manifest, theta, phi })
}
