//! Episode rollouts and parameter updates.
//!
//! Two training schemes share one rollout routine:
//!
//! * **PSVAS**: the predictor is fixed within an episode. The update sums the
//!   REINFORCE term `-Σ_t R^t ∇ log π(a_t)` (which reaches the predictor
//!   through the `p` input of the searcher) and `λ` times the masked BCE of
//!   the predictor at every visited observation snapshot.
//! * **MPS-VAS**: the predictor is adapted with one Adam step after every
//!   search step. At episode end the searcher gets the REINFORCE term with
//!   the recorded `p` treated as a constant and the initial predictor gets
//!   the masked BCE only.
//!
//! Inference freezes the searcher and optionally adapts the predictor the
//! same way MPS-VAS rollouts do.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{CostKind, CostModel, EpisodeState, Task};
use crate::error::{Result, VasError};
use crate::predictor::{PredictorParams, DEFAULT_HIDDEN};
use crate::searcher::{ActionMode, SearcherParams, SelectionKind};
use crate::tensor::{adam_step, bce_loss, AdamState, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Psvas,
    Mpsvas,
    MpsvasTopk,
    MpsvasMq,
    /// BCE-only predictor at `o = 0`, used by the greedy-classification baseline.
    Classifier,
}

impl TrainMode {
    pub fn searcher_channels(self) -> usize {
        match self {
            TrainMode::MpsvasMq => 4,
            _ => 3,
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, TrainMode::Mpsvas | TrainMode::MpsvasTopk | TrainMode::MpsvasMq)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = VasError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase().replace('-', "_")))
            .map_err(|_| VasError::Validation(format!("unknown training mode `{s}`")))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("mode serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Learning rate of the searcher when it differs from `lr`.
    pub lr_searcher: Option<f64>,
    /// Inner-loop (per-query) learning rate of the predictor.
    pub lr_inner: f64,
    pub batch_episodes: usize,
    pub epochs: usize,
    /// Budgets `C` drawn uniformly per episode.
    pub budgets: Vec<f64>,
    pub cost_model: CostModel,
    #[serde(rename = "R")]
    pub queries_per_step: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Width of the predictor's per-cell stage.
    pub hidden: usize,
    /// Supervise every cell's label at each snapshot instead of only the
    /// cells queried during the episode.
    pub full_label_bce: bool,
    /// Subtract the batch mean return from every return.
    pub return_baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            gamma: 0.99,
            lr: 1e-4,
            lr_searcher: None,
            lr_inner: 1e-4,
            batch_episodes: 16,
            epochs: 200,
            budgets: vec![12.0, 15.0, 18.0],
            cost_model: CostModel::uniform(),
            queries_per_step: 1,
            mode: TrainMode::Psvas,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            full_label_bce: false,
            return_baseline: false,
        }
    }
}

impl TrainConfig {
    /// Default budgets for a cost model: {12, 15, 18} uniform, {25, 50, 75} Manhattan.
    pub fn default_budgets(kind: CostKind) -> Vec<f64> {
        match kind {
            CostKind::Uniform => vec![12.0, 15.0, 18.0],
            CostKind::Manhattan => vec![25.0, 50.0, 75.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(VasError::Validation(msg.to_string()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.batch_episodes == 0 {
            return bad("batch_episodes must be >= 1");
        }
        if self.queries_per_step == 0 {
            return bad("R must be >= 1");
        }
        if self.budgets.is_empty() || self.budgets.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return bad("budgets must be a nonempty list of positive numbers");
        }
        if !(self.lr >= 0.0 && self.lr_inner >= 0.0 && self.lr_searcher.is_none_or(|lr| lr >= 0.0)) {
            return bad("learning rates must be >= 0");
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1");
        }
        Ok(())
    }
}

/// One search step: the inputs the policy saw and what it did.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub step: usize,
    /// Predicted probabilities the searcher was given.
    pub p: Vec<f64>,
    /// Observation vector before the step.
    pub obs: Vec<f64>,
    pub budget_fraction: f64,
    pub picks: Vec<usize>,
    pub allowed: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    pub labels: Vec<u8>,
    /// Cost of each pick in order.
    pub costs: Vec<f64>,
    pub budget_after: f64,
}

impl Transition {
    pub fn reward(&self) -> f64 {
        self.labels.iter().map(|&y| y as f64).sum()
    }

    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn explored(&self) -> Vec<bool> {
        self.obs.iter().map(|&o| o != 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub observed: BTreeMap<usize, u8>,
    pub total_reward: f64,
    pub budget: f64,
}

impl EpisodeRecord {
    pub fn total_cost(&self) -> f64 {
        self.transitions.iter().map(Transition::cost).sum()
    }

    pub fn query_count(&self) -> usize {
        self.transitions.iter().map(|t| t.picks.len()).sum()
    }

    /// Queried cells in order.
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.transitions.iter().flat_map(|t| t.picks.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub queries_per_step: usize,
    pub action: ActionMode,
    /// Inner-loop learning rate; `None` keeps the predictor fixed.
    pub adapt_lr: Option<f64>,
}

pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Runs one episode to termination. Returns the record and the predictor as
/// it stands at the end (changed only when adapting).
pub fn rollout<R: Rng + ?Sized>(
    theta: &PredictorParams,
    phi: &SearcherParams,
    task: &Task,
    budget: f64,
    cost: &CostModel,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<(EpisodeRecord, PredictorParams)> {
    if theta.cells() != task.cells() || phi.cells() != task.cells() || theta.feature_dim() != task.feature_dim {
        return Err(VasError::ShapeMismatch(format!(
            "policy for {} cells x {} features applied to a {}-cell task with {} features",
            theta.cells(),
            theta.feature_dim(),
            task.cells(),
            task.feature_dim
        )));
    }
    if opts.queries_per_step == 0 {
        return Err(VasError::Validation("R must be >= 1".into()));
    }
    let kind = if phi.channels() == 4 {
        SelectionKind::Mq
    } else {
        SelectionKind::TopK
    };
    let mut theta = theta.clone();
    let mut adam = opts.adapt_lr.map(|_| AdamState::new(theta.params()));
    let mut state = EpisodeState::new(task.dims, budget)?;
    let mut transitions = Vec::new();
    loop {
        let first = state.affordable_unexplored(task, cost);
        if first.is_empty() {
            break;
        }
        let obs = state.obs.clone();
        let p = theta.predict(&task.features, &obs)?;
        let budget_fraction = state.budget_fraction();
        let r = opts.queries_per_step.min(first.len());
        let mut first = Some(first);
        let allowed = |picks: &[usize]| {
            if picks.is_empty() {
                if let Some(set) = first.take() {
                    return set;
                }
            }
            state.affordable_after(task, cost, picks)
        };
        let explored = state.explored_mask().to_vec();
        let sel = match kind {
            SelectionKind::TopK => phi.select_topk(&p, &obs, budget_fraction, &explored, r, opts.action, allowed, rng)?,
            SelectionKind::Mq => phi.select_mq(&p, &obs, budget_fraction, &explored, r, opts.action, allowed, rng)?,
        };
        let mut labels = Vec::with_capacity(sel.picks.len());
        let mut costs = Vec::with_capacity(sel.picks.len());
        for &cell in &sel.picks {
            let out = state.apply_query(task, cost, cell)?;
            labels.push(out.label);
            costs.push(out.cost);
        }
        if let (Some(lr), Some(adam)) = (opts.adapt_lr, adam.as_mut()) {
            theta.adapt_inner(&task.features, &obs, &state.observed(), lr, adam)?;
        }
        transitions.push(Transition {
            step: transitions.len(),
            p,
            obs,
            budget_fraction,
            picks: sel.picks,
            allowed: sel.allowed,
            log_probs: sel.log_probs,
            labels,
            costs,
            budget_after: state.remaining_budget,
        });
    }
    let record = EpisodeRecord {
        transitions,
        observed: state.observed(),
        total_reward: state.total_reward(),
        budget,
    };
    Ok((record, theta))
}

/// Training-time PSVAS rollout: sampled actions, predictor fixed.
pub fn run_episode_psvas<R: Rng + ?Sized>(
    theta: &PredictorParams,
    phi: &SearcherParams,
    task: &Task,
    budget: f64,
    cost: &CostModel,
    queries_per_step: usize,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let opts = RolloutOptions {
        queries_per_step,
        action: ActionMode::Sample,
        adapt_lr: None,
    };
    Ok(rollout(theta, phi, task, budget, cost, &opts, rng)?.0)
}

/// Training-time MPS-VAS rollout: sampled actions, predictor adapted after
/// every step. Returns the adapted predictor.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_mpsvas<R: Rng + ?Sized>(
    theta_init: &PredictorParams,
    phi: &SearcherParams,
    task: &Task,
    budget: f64,
    cost: &CostModel,
    queries_per_step: usize,
    lr_inner: f64,
    rng: &mut R,
) -> Result<(EpisodeRecord, PredictorParams)> {
    let opts = RolloutOptions {
        queries_per_step,
        action: ActionMode::Sample,
        adapt_lr: Some(lr_inner),
    };
    rollout(theta_init, phi, task, budget, cost, &opts, rng)
}

/// Search with a frozen searcher, adapting the predictor after each step
/// when `adapt` is set.
#[allow(clippy::too_many_arguments)]
pub fn run_inference<R: Rng + ?Sized>(
    theta: &PredictorParams,
    phi: &SearcherParams,
    task: &Task,
    budget: f64,
    cost: &CostModel,
    queries_per_step: usize,
    adapt: Option<f64>,
    action: ActionMode,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let opts = RolloutOptions {
        queries_per_step,
        action,
        adapt_lr: adapt,
    };
    Ok(rollout(theta, phi, task, budget, cost, &opts, rng)?.0)
}

/// Summed gradients of one batch plus bookkeeping for the training log.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub mean_bce: f64,
    pub mean_reward: f64,
}

fn batch_returns(episodes: &[(&Task, &EpisodeRecord)], cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let mut returns: Vec<Vec<f64>> = episodes
        .iter()
        .map(|(_, rec)| {
            let rewards: Vec<f64> = rec.transitions.iter().map(Transition::reward).collect();
            discounted_returns(&rewards, cfg.gamma)
        })
        .collect();
    if cfg.return_baseline {
        let all: Vec<f64> = returns.iter().flatten().copied().collect();
        if !all.is_empty() {
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            returns.iter_mut().flatten().for_each(|g| *g -= mean);
        }
    }
    returns
}

fn bce_target(task: &Task, rec: &EpisodeRecord, cfg: &TrainConfig) -> (Vec<f64>, Vec<f64>) {
    let target: Vec<f64> = task.labels.iter().map(|&y| y as f64).collect();
    let mask = if cfg.full_label_bce {
        vec![1.0; task.cells()]
    } else {
        let mut m = vec![0.0; task.cells()];
        for &c in rec.observed.keys() {
            m[c] = 1.0;
        }
        m
    };
    (target, mask)
}

fn selection_kind(phi: &SearcherParams) -> SelectionKind {
    if phi.channels() == 4 {
        SelectionKind::Mq
    } else {
        SelectionKind::TopK
    }
}

/// Gradient of `L_RL + λ L_BCE` over both modules; the RL term reaches the
/// predictor through `p`.
pub fn psvas_gradients(
    theta: &PredictorParams,
    phi: &SearcherParams,
    episodes: &[(&Task, &EpisodeRecord)],
    cfg: &TrainConfig,
) -> Result<BatchGradients> {
    let returns = batch_returns(episodes, cfg);
    let kind = selection_kind(phi);
    let mut g_theta = theta.params().zeros_like();
    let mut g_phi = phi.params().zeros_like();
    let mut bce_total = 0.0;
    for ((task, rec), rets) in episodes.iter().zip(&returns) {
        let (target, mask) = bce_target(task, rec, cfg);
        for (t, ret) in rec.transitions.iter().zip(rets) {
            let fwd = theta.forward(&task.features, &t.obs)?;
            let mut dp = vec![0.0; task.cells()];
            if *ret != 0.0 {
                let (_, d) = phi.step_log_prob_backward(
                    kind,
                    &fwd.p,
                    &t.obs,
                    t.budget_fraction,
                    &t.explored(),
                    &t.picks,
                    &t.allowed,
                    -ret,
                    &mut g_phi,
                )?;
                dp = d;
            }
            let (loss, dbce) = bce_loss(&fwd.p, &target, Some(&mask))?;
            bce_total += loss;
            if cfg.lambda != 0.0 {
                crate::tensor::axpy(cfg.lambda, &dbce, &mut dp);
            }
            if dp.iter().any(|&v| v != 0.0) {
                theta.backward_into(&fwd, &dp, &mut g_theta);
            }
        }
    }
    Ok(BatchGradients {
        theta: g_theta,
        phi: g_phi,
        mean_bce: bce_total / episodes.len().max(1) as f64,
        mean_reward: mean_reward(episodes),
    })
}

/// Outer-loop gradients: REINFORCE on the searcher with the recorded `p`
/// held constant, `λ`-weighted masked BCE on the initial predictor.
pub fn mpsvas_gradients(
    theta_init: &PredictorParams,
    phi: &SearcherParams,
    episodes: &[(&Task, &EpisodeRecord)],
    cfg: &TrainConfig,
) -> Result<BatchGradients> {
    let returns = batch_returns(episodes, cfg);
    let kind = selection_kind(phi);
    let mut g_theta = theta_init.params().zeros_like();
    let mut g_phi = phi.params().zeros_like();
    let mut bce_total = 0.0;
    for ((task, rec), rets) in episodes.iter().zip(&returns) {
        let (target, mask) = bce_target(task, rec, cfg);
        let has_labels = mask.iter().any(|&m| m != 0.0);
        for (t, ret) in rec.transitions.iter().zip(rets) {
            if *ret != 0.0 {
                phi.step_log_prob_backward(
                    kind,
                    &t.p,
                    &t.obs,
                    t.budget_fraction,
                    &t.explored(),
                    &t.picks,
                    &t.allowed,
                    -ret,
                    &mut g_phi,
                )?;
            }
            if has_labels {
                let fwd = theta_init.forward(&task.features, &t.obs)?;
                let (loss, mut dbce) = bce_loss(&fwd.p, &target, Some(&mask))?;
                bce_total += loss;
                dbce.iter_mut().for_each(|v| *v *= cfg.lambda);
                theta_init.backward_into(&fwd, &dbce, &mut g_theta);
            }
        }
    }
    Ok(BatchGradients {
        theta: g_theta,
        phi: g_phi,
        mean_bce: bce_total / episodes.len().max(1) as f64,
        mean_reward: mean_reward(episodes),
    })
}

fn mean_reward(episodes: &[(&Task, &EpisodeRecord)]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().map(|(_, r)| r.total_reward).sum::<f64>() / episodes.len() as f64
}

/// Parameters and optimizer moments of a training run.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub theta: PredictorParams,
    pub phi: SearcherParams,
    pub adam_theta: AdamState,
    pub adam_phi: AdamState,
}

impl PolicyState {
    pub fn new(theta: PredictorParams, phi: SearcherParams) -> Self {
        let adam_theta = AdamState::new(theta.params());
        let adam_phi = AdamState::new(phi.params());
        PolicyState {
            theta,
            phi,
            adam_theta,
            adam_phi,
        }
    }

    fn apply(&mut self, grads: &BatchGradients, cfg: &TrainConfig) -> Result<()> {
        adam_step(self.theta.params_mut(), &grads.theta, &mut self.adam_theta, cfg.lr)?;
        if grads.phi.is_empty() {
            return Ok(());
        }
        adam_step(self.phi.params_mut(), &grads.phi, &mut self.adam_phi, cfg.lr_searcher.unwrap_or(cfg.lr))
    }
}

/// One PSVAS parameter update from a batch of episodes rolled out with the
/// current parameters.
pub fn psvas_update(
    state: &mut PolicyState,
    episodes: &[(&Task, &EpisodeRecord)],
    cfg: &TrainConfig,
) -> Result<BatchGradients> {
    let grads = psvas_gradients(&state.theta, &state.phi, episodes, cfg)?;
    state.apply(&grads, cfg)?;
    Ok(grads)
}

/// One MPS-VAS outer update.
pub fn mpsvas_outer_update(
    state: &mut PolicyState,
    episodes: &[(&Task, &EpisodeRecord)],
    cfg: &TrainConfig,
) -> Result<BatchGradients> {
    let grads = mpsvas_gradients(&state.theta, &state.phi, episodes, cfg)?;
    state.apply(&grads, cfg)?;
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub mean_episode_reward: f64,
    pub mean_bce: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta: PredictorParams,
    pub phi: SearcherParams,
    pub log: Vec<BatchLog>,
    /// Mean episode reward per epoch.
    pub epoch_rewards: Vec<f64>,
}

pub fn initial_policy(cfg: &TrainConfig, cells: usize, feature_dim: usize) -> Result<(PredictorParams, SearcherParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta = PredictorParams::init(cells, feature_dim, cfg.hidden, &mut rng);
    let phi = SearcherParams::init(cells, cfg.mode.searcher_channels(), &mut rng)?;
    Ok((theta, phi))
}

fn check_tasks(tasks: &[Task]) -> Result<()> {
    let first = tasks
        .first()
        .ok_or_else(|| VasError::Validation("training needs at least one task".into()))?;
    if tasks.iter().any(|t| t.dims != first.dims || t.feature_dim != first.feature_dim) {
        return Err(VasError::Validation("all tasks must share grid size and feature dimension".into()));
    }
    Ok(())
}

/// Trains from the initial policy of `cfg`.
pub fn train(cfg: &TrainConfig, tasks: &[Task]) -> Result<TrainOutput> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let (theta, phi) = initial_policy(cfg, tasks[0].cells(), tasks[0].feature_dim)?;
    train_from(cfg, tasks, PolicyState::new(theta, phi), |_, _| {})
}

/// Trains from an explicit starting state. `on_epoch` sees the state after
/// every epoch.
pub fn train_from(
    cfg: &TrainConfig,
    tasks: &[Task],
    mut state: PolicyState,
    mut on_epoch: impl FnMut(usize, &PolicyState),
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1e_d0c5_u64);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut epoch_rewards = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_reward = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_episodes).enumerate() {
            let plan: Vec<(usize, f64, u64)> = chunk
                .iter()
                .map(|&i| {
                    let budget = cfg.budgets[rng.random_range(0..cfg.budgets.len())];
                    (i, budget, rng.random::<u64>())
                })
                .collect();
            let grads = if cfg.mode == TrainMode::Classifier {
                classifier_gradients(&state.theta, tasks, chunk)?
            } else {
                let records = collect_rollouts(&state, tasks, &plan, cfg)?;
                let episodes: Vec<(&Task, &EpisodeRecord)> =
                    plan.iter().zip(&records).map(|(&(i, _, _), r)| (&tasks[i], r)).collect();
                if cfg.mode.is_meta() {
                    mpsvas_gradients(&state.theta, &state.phi, &episodes, cfg)?
                } else {
                    psvas_gradients(&state.theta, &state.phi, &episodes, cfg)?
                }
            };
            state.apply(&grads, cfg)?;
            epoch_reward += grads.mean_reward * chunk.len() as f64;
            log.push(BatchLog {
                epoch,
                batch,
                mean_episode_reward: grads.mean_reward,
                mean_bce: grads.mean_bce,
                wallclock_ms: start.elapsed().as_millis() as u64,
            });
        }
        epoch_rewards.push(epoch_reward / tasks.len() as f64);
        on_epoch(epoch, &state);
    }
    Ok(TrainOutput {
        theta: state.theta,
        phi: state.phi,
        log,
        epoch_rewards,
    })
}

fn collect_rollouts(
    state: &PolicyState,
    tasks: &[Task],
    plan: &[(usize, f64, u64)],
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeRecord>> {
    let opts = RolloutOptions {
        queries_per_step: cfg.queries_per_step,
        action: ActionMode::Sample,
        adapt_lr: cfg.mode.is_meta().then_some(cfg.lr_inner),
    };
    plan.par_iter()
        .map(|&(i, budget, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rollout(&state.theta, &state.phi, &tasks[i], budget, &cfg.cost_model, &opts, &mut rng).map(|(r, _)| r)
        })
        .collect()
}

/// Full-label BCE at `o = 0` for the classifier baseline.
fn classifier_gradients(theta: &PredictorParams, tasks: &[Task], chunk: &[usize]) -> Result<BatchGradients> {
    let mut g = theta.params().zeros_like();
    let mut total = 0.0;
    for &i in chunk {
        let task = &tasks[i];
        let target: Vec<f64> = task.labels.iter().map(|&y| y as f64).collect();
        let fwd = theta.forward(&task.features, &vec![0.0; task.cells()])?;
        let (loss, dp) = bce_loss(&fwd.p, &target, None)?;
        total += loss;
        theta.backward_into(&fwd, &dp, &mut g);
    }
    Ok(BatchGradients {
        theta: g,
        phi: ParamSet::new(),
        mean_bce: total / chunk.len() as f64,
        mean_reward: 0.0,
    })
}

fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
