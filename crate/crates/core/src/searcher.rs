//! Task-agnostic search module: a query distribution over grid cells from
//! predicted probabilities, observations and the remaining budget fraction,
//! optionally with the selection mask `ψ` of the multi-query variant.
//!
//! The raw softmax has full support; illegal cells are removed by
//! renormalizing over the allowed set. Log-probabilities of chosen cells are
//! always taken under the renormalized distribution, which in logit space is
//! `z_a - logsumexp(z over allowed)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VasError};
use crate::predictor::two_mut;
use crate::tensor::{
    affine_backward, affine_backward_params, affine_forward, he_init, relu, relu_backward, softmax,
    uniform_init, Mat, ParamSet,
};

const FC1_W: usize = 0;
const FC1_B: usize = 1;
const FC2_W: usize = 2;
const FC2_B: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// How the picks of one multi-query step are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKind {
    /// One forward pass per step, picks drawn without replacement.
    TopK,
    /// Forward pass recomputed for each pick with an updated `ψ`.
    Mq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearcherParams {
    cells: usize,
    channels: usize,
    params: ParamSet,
}

#[derive(Debug, Clone)]
pub struct SearcherForward {
    input: Vec<f64>,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// Full-support softmax output.
    pub raw: Vec<f64>,
}

/// Cells chosen in one step with their conditional log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub picks: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Allowed set each pick was drawn from.
    pub allowed: Vec<Vec<usize>>,
    /// Selection mask after the last pick (multi-query only).
    pub psi: Option<Vec<f64>>,
}

impl Selection {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

impl SearcherParams {
    pub fn init<R: Rng + ?Sized>(cells: usize, channels: usize, rng: &mut R) -> Result<Self> {
        check_channels(channels)?;
        let wide = 2 * cells;
        let mut params = ParamSet::new();
        params.insert("fc1.w", he_init(wide, channels * cells, rng))?;
        params.insert("fc1.b", Mat::zeros(wide, 1))?;
        params.insert("fc2.w", uniform_init(cells, wide, rng))?;
        params.insert("fc2.b", Mat::zeros(cells, 1))?;
        Ok(SearcherParams {
            cells,
            channels,
            params,
        })
    }

    pub fn zeros(cells: usize, channels: usize) -> Result<Self> {
        check_channels(channels)?;
        let wide = 2 * cells;
        let mut params = ParamSet::new();
        params.insert("fc1.w", Mat::zeros(wide, channels * cells))?;
        params.insert("fc1.b", Mat::zeros(wide, 1))?;
        params.insert("fc2.w", Mat::zeros(cells, wide))?;
        params.insert("fc2.b", Mat::zeros(cells, 1))?;
        Ok(SearcherParams {
            cells,
            channels,
            params,
        })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let names = ["fc1.w", "fc1.b", "fc2.w", "fc2.b"];
        if params.len() != names.len() || params.iter().zip(names).any(|((n, _), want)| n != want) {
            return Err(VasError::Validation("not a searcher checkpoint".into()));
        }
        let cells = params.at(FC2_W).rows;
        let in_width = params.at(FC1_W).cols;
        if cells == 0 || !in_width.is_multiple_of(cells) {
            return Err(VasError::ShapeMismatch("searcher input width is not a multiple of N".into()));
        }
        let template = Self::zeros(cells, in_width / cells)?;
        template.params.check_layout(&params)?;
        Ok(SearcherParams {
            cells,
            channels: in_width / cells,
            params,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, p: &[f64], obs: &[f64], budget_fraction: f64, psi: Option<&[f64]>) -> Result<SearcherForward> {
        let n = self.cells;
        if p.len() != n || obs.len() != n || psi.is_some_and(|s| s.len() != n) {
            return Err(VasError::ShapeMismatch(format!("searcher over {n} cells got mismatched inputs")));
        }
        if psi.is_some() != (self.channels == 4) {
            return Err(VasError::ShapeMismatch(format!(
                "{}-channel searcher {} a selection mask",
                self.channels,
                if psi.is_some() { "does not take" } else { "requires" }
            )));
        }
        let c = self.channels;
        let mut input = Vec::with_capacity(c * n);
        for j in 0..n {
            input.push(p[j]);
            input.push(obs[j]);
            input.push(budget_fraction);
            if let Some(psi) = psi {
                input.push(psi[j]);
            }
        }
        let pre1 = affine_forward(self.params.at(FC1_W), &self.params.at(FC1_B).data, &input)?;
        let hidden = relu(&pre1);
        let logits = affine_forward(self.params.at(FC2_W), &self.params.at(FC2_B).data, &hidden)?;
        let raw = softmax(&logits);
        Ok(SearcherForward {
            input,
            pre1,
            hidden,
            logits,
            raw,
        })
    }

    /// Full-support query distribution before masking.
    pub fn distribution(&self, p: &[f64], obs: &[f64], budget_fraction: f64, psi: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.forward(p, obs, budget_fraction, psi)?.raw)
    }

    /// Backward from a gradient on the logits. Accumulates parameter
    /// gradients and returns the gradient with respect to `p`.
    pub fn backward_into(&self, fwd: &SearcherForward, dlogits: &[f64], grads: &mut ParamSet) -> Vec<f64> {
        let (dw2, db2) = two_mut(grads, FC2_W, FC2_B);
        let dh = affine_backward(self.params.at(FC2_W), &fwd.hidden, dlogits, dw2, db2);
        let dz1 = relu_backward(&fwd.pre1, &dh);
        let (dw1, db1) = two_mut(grads, FC1_W, FC1_B);
        affine_backward_params(&fwd.input, &dz1, dw1, db1);
        let dinput = self.params.at(FC1_W).matvec_t(&dz1);
        dinput.iter().step_by(self.channels).copied().collect()
    }

    fn selection_mask(&self, explored: &[bool], picks: &[usize]) -> Vec<f64> {
        let mut psi: Vec<f64> = explored.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
        for &c in picks {
            psi[c] = 1.0;
        }
        psi
    }

    /// Draws up to `r` distinct cells from one shared distribution,
    /// renormalizing over the shrinking allowed set. `allowed` maps the picks
    /// made so far to the cells still legal for the next pick.
    #[allow(clippy::too_many_arguments)]
    pub fn select_topk<R: Rng + ?Sized>(
        &self,
        p: &[f64],
        obs: &[f64],
        budget_fraction: f64,
        explored: &[bool],
        r: usize,
        mode: ActionMode,
        mut allowed: impl FnMut(&[usize]) -> Vec<usize>,
        rng: &mut R,
    ) -> Result<Selection> {
        let psi = (self.channels == 4).then(|| self.selection_mask(explored, &[]));
        let fwd = self.forward(p, obs, budget_fraction, psi.as_deref())?;
        let mut sel = empty_selection(r);
        while sel.picks.len() < r {
            let set: Vec<usize> = allowed(&sel.picks).into_iter().filter(|c| !sel.picks.contains(c)).collect();
            if !check_allowed(&set, r, sel.picks.len())? {
                break;
            }
            let (cell, lp) = choose(&fwd.logits, &set, mode, rng)?;
            sel.picks.push(cell);
            sel.log_probs.push(lp);
            sel.allowed.push(set);
        }
        Ok(sel)
    }

    /// Picks up to `r` cells one at a time, recomputing the distribution
    /// with `ψ` marking explored cells and the picks made so far.
    #[allow(clippy::too_many_arguments)]
    pub fn select_mq<R: Rng + ?Sized>(
        &self,
        p: &[f64],
        obs: &[f64],
        budget_fraction: f64,
        explored: &[bool],
        r: usize,
        mode: ActionMode,
        mut allowed: impl FnMut(&[usize]) -> Vec<usize>,
        rng: &mut R,
    ) -> Result<Selection> {
        if self.channels != 4 {
            return Err(VasError::ShapeMismatch("multi-query selection needs a 4-channel searcher".into()));
        }
        let mut sel = empty_selection(r);
        let mut psi = self.selection_mask(explored, &[]);
        while sel.picks.len() < r {
            let set: Vec<usize> = allowed(&sel.picks).into_iter().filter(|c| !sel.picks.contains(c)).collect();
            if !check_allowed(&set, r, sel.picks.len())? {
                break;
            }
            let fwd = self.forward(p, obs, budget_fraction, Some(&psi))?;
            let (cell, lp) = choose(&fwd.logits, &set, mode, rng)?;
            psi[cell] = 1.0;
            sel.picks.push(cell);
            sel.log_probs.push(lp);
            sel.allowed.push(set);
        }
        sel.psi = Some(psi);
        Ok(sel)
    }

    /// Log-probability of a recorded step and its gradient. Parameter
    /// gradients scaled by `scale` are accumulated into `grads`; the returned
    /// vector is `scale * d(log π)/dp`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_log_prob_backward(
        &self,
        kind: SelectionKind,
        p: &[f64],
        obs: &[f64],
        budget_fraction: f64,
        explored: &[bool],
        picks: &[usize],
        allowed: &[Vec<usize>],
        scale: f64,
        grads: &mut ParamSet,
    ) -> Result<(f64, Vec<f64>)> {
        if picks.len() != allowed.len() {
            return Err(VasError::ShapeMismatch("one allowed set per pick is required".into()));
        }
        let mut dp = vec![0.0; self.cells];
        let mut total = 0.0;
        let kind = if self.channels == 3 { SelectionKind::TopK } else { kind };
        match kind {
            SelectionKind::TopK => {
                let psi = (self.channels == 4).then(|| self.selection_mask(explored, &[]));
                let fwd = self.forward(p, obs, budget_fraction, psi.as_deref())?;
                let mut dlogits = vec![0.0; self.cells];
                for (&a, set) in picks.iter().zip(allowed) {
                    total += accumulate_log_prob_grad(&fwd.logits, set, a, scale, &mut dlogits)?;
                }
                let d = self.backward_into(&fwd, &dlogits, grads);
                crate::tensor::axpy(1.0, &d, &mut dp);
            }
            SelectionKind::Mq => {
                for (r, (&a, set)) in picks.iter().zip(allowed).enumerate() {
                    let psi = self.selection_mask(explored, &picks[..r]);
                    let fwd = self.forward(p, obs, budget_fraction, Some(&psi))?;
                    let mut dlogits = vec![0.0; self.cells];
                    total += accumulate_log_prob_grad(&fwd.logits, set, a, scale, &mut dlogits)?;
                    let d = self.backward_into(&fwd, &dlogits, grads);
                    crate::tensor::axpy(1.0, &d, &mut dp);
                }
            }
        }
        Ok((total, dp))
    }
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 3 || channels == 4 {
        Ok(())
    } else {
        Err(VasError::Validation(format!("searcher channels must be 3 or 4, got {channels}")))
    }
}

fn empty_selection(r: usize) -> Selection {
    Selection {
        picks: Vec::with_capacity(r),
        log_probs: Vec::with_capacity(r),
        allowed: Vec::with_capacity(r),
        psi: None,
    }
}

/// `Ok(false)` stops a step early when a later pick has nothing left.
fn check_allowed(set: &[usize], r: usize, picked: usize) -> Result<bool> {
    if picked == 0 && set.len() < r {
        if set.is_empty() {
            return Err(VasError::EmptyAllowedSet);
        }
        return Err(VasError::NotEnoughAllowed {
            requested: r,
            available: set.len(),
        });
    }
    Ok(!set.is_empty())
}

/// Renormalizes `raw` over `allowed`; entries off the allowed set are zero.
pub fn masked_distribution(raw: &[f64], allowed: &[usize]) -> Result<Vec<f64>> {
    if allowed.is_empty() {
        return Err(VasError::EmptyAllowedSet);
    }
    if let Some(&bad) = allowed.iter().find(|&&j| j >= raw.len()) {
        return Err(VasError::IndexOutOfRange {
            index: bad,
            cells: raw.len(),
        });
    }
    let total: f64 = allowed.iter().map(|&j| raw[j]).sum();
    if !(total > 0.0) {
        return Err(VasError::DegenerateDistribution);
    }
    let mut q = vec![0.0; raw.len()];
    for &j in allowed {
        q[j] = raw[j] / total;
    }
    Ok(q)
}

/// Log-probability of `action` under `raw` renormalized over `allowed`.
pub fn masked_log_prob(raw: &[f64], allowed: &[usize], action: usize) -> Result<f64> {
    if !allowed.contains(&action) {
        return Err(VasError::Validation(format!("cell {action} is not in the allowed set")));
    }
    let total: f64 = allowed.iter().map(|&j| raw[j]).sum();
    Ok(raw[action].ln() - total.ln())
}

/// Renormalized distribution computed from logits over `allowed`.
pub fn masked_from_logits(logits: &[f64], allowed: &[usize]) -> Result<(Vec<f64>, f64)> {
    if allowed.is_empty() {
        return Err(VasError::EmptyAllowedSet);
    }
    let m = allowed.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = allowed.iter().map(|&j| (logits[j] - m).exp()).sum();
    let lse = m + sum.ln();
    let mut q = vec![0.0; logits.len()];
    for &j in allowed {
        q[j] = (logits[j] - lse).exp();
    }
    Ok((q, lse))
}

fn choose<R: Rng + ?Sized>(logits: &[f64], allowed: &[usize], mode: ActionMode, rng: &mut R) -> Result<(usize, f64)> {
    let (q, lse) = masked_from_logits(logits, allowed)?;
    let cell = match mode {
        ActionMode::Sample => crate::tensor::categorical_sample(&q, rng)?,
        ActionMode::Greedy => greedy_pick(&q, allowed),
    };
    Ok((cell, logits[cell] - lse))
}

/// Highest-probability allowed cell, lowest index on ties.
pub fn greedy_pick(probs: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &j in allowed {
        if probs[j] > probs[best] || (probs[j] == probs[best] && j < best) {
            best = j;
        }
    }
    best
}

fn accumulate_log_prob_grad(logits: &[f64], allowed: &[usize], action: usize, scale: f64, dlogits: &mut [f64]) -> Result<f64> {
    if !allowed.contains(&action) {
        return Err(VasError::Validation(format!("recorded cell {action} is not in its allowed set")));
    }
    let (q, lse) = masked_from_logits(logits, allowed)?;
    for &j in allowed {
        dlogits[j] -= scale * q[j];
    }
    dlogits[action] += scale;
    Ok(logits[action] - lse)
}
