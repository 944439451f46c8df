//! Reference search policies: random search, greedy classification and a
//! greedy kernel-posterior active search.

use std::collections::BTreeMap;

use rand::Rng;

use crate::env::{CostModel, EpisodeState, Task};
use crate::error::{Result, VasError};

fn allowed(state: &EpisodeState, task: &Task, model: &CostModel) -> Result<Vec<usize>> {
    let set = state.affordable_unexplored(task, model);
    if set.is_empty() {
        Err(VasError::Terminal)
    } else {
        Ok(set)
    }
}

fn argmax_lowest(scores: &[f64], set: &[usize]) -> usize {
    let mut best = set[0];
    for &j in &set[1..] {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    best
}

/// Uniform over affordable unexplored cells.
pub fn random_policy<R: Rng + ?Sized>(state: &EpisodeState, task: &Task, model: &CostModel, rng: &mut R) -> Result<usize> {
    let set = allowed(state, task, model)?;
    Ok(set[rng.random_range(0..set.len())])
}

/// Highest static probability among affordable unexplored cells, lowest
/// index on ties.
pub fn greedy_classification_policy(
    p_static: &[f64],
    state: &EpisodeState,
    task: &Task,
    model: &CostModel,
) -> Result<usize> {
    if p_static.len() != task.cells() {
        return Err(VasError::ShapeMismatch(format!(
            "{} probabilities for {} cells",
            p_static.len(),
            task.cells()
        )));
    }
    let set = allowed(state, task, model)?;
    Ok(argmax_lowest(p_static, &set))
}

/// Beta-smoothed kernel average of observed labels in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnPosterior {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    labeled: BTreeMap<usize, u8>,
}

impl KnnPosterior {
    pub fn new(sigma: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(sigma > 0.0 && alpha > 0.0 && beta > 0.0) {
            return Err(VasError::Validation("sigma, alpha and beta must be positive".into()));
        }
        Ok(KnnPosterior {
            sigma,
            alpha,
            beta,
            labeled: BTreeMap::new(),
        })
    }

    /// `α = β = 1` and `σ` set to the median pairwise feature distance.
    pub fn for_task(task: &Task) -> Result<Self> {
        let sigma = median_pairwise_distance(task);
        Self::new(if sigma > 0.0 { sigma } else { 1.0 }, 1.0, 1.0)
    }

    pub fn labeled(&self) -> &BTreeMap<usize, u8> {
        &self.labeled
    }

    pub fn observe(&mut self, cell: usize, label: u8) {
        self.labeled.insert(cell, label);
    }

    pub fn set_labels(&mut self, labels: BTreeMap<usize, u8>) {
        self.labeled = labels;
    }

    pub fn prior(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn posterior(&self, task: &Task, cell: usize) -> f64 {
        let z = task.feature(cell);
        let mut num = self.alpha;
        let mut den = self.alpha + self.beta;
        for (&i, &y) in &self.labeled {
            let d2: f64 = task.feature(i).iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (-d2 / (2.0 * self.sigma * self.sigma)).exp();
            num += w * y as f64;
            den += w;
        }
        num / den
    }

    pub fn posteriors(&self, task: &Task) -> Vec<f64> {
        (0..task.cells()).map(|j| self.posterior(task, j)).collect()
    }
}

pub fn median_pairwise_distance(task: &Task) -> f64 {
    let n = task.cells();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = task.feature(i).iter().zip(task.feature(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

/// Refreshes the posterior with every label observed so far and returns
/// its argmax over the allowed cells.
pub fn knn_active_search_policy(
    post: &mut KnnPosterior,
    task: &Task,
    state: &EpisodeState,
    model: &CostModel,
) -> Result<usize> {
    let set = allowed(state, task, model)?;
    post.set_labels(state.observed());
    let scores: Vec<f64> = (0..task.cells())
        .map(|j| if set.contains(&j) { post.posterior(task, j) } else { 0.0 })
        .collect();
    Ok(argmax_lowest(&scores, &set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GridDims;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn task(features: Vec<f64>, labels: Vec<u8>, d: usize) -> Task {
        let n = labels.len();
        Task::new(GridDims::new(1, n).unwrap(), d, features, labels, Default::default()).unwrap()
    }

    #[test]
    fn random_single_allowed_cell() {
        let t = task(vec![0.0; 3], vec![0, 1, 0], 1);
        let m = CostModel::uniform();
        let mut s = EpisodeState::new(t.dims, 3.0).unwrap();
        s.apply_query(&t, &m, 0).unwrap();
        s.apply_query(&t, &m, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(random_policy(&s, &t, &m, &mut rng).unwrap(), 1);
        }
        s.apply_query(&t, &m, 1).unwrap();
        assert!(matches!(random_policy(&s, &t, &m, &mut rng), Err(VasError::Terminal)));
    }

    #[test]
    fn random_frequencies_balanced() {
        let t = task(vec![0.0; 2], vec![0, 1], 1);
        let m = CostModel::uniform();
        let s = EpisodeState::new(t.dims, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let zeros = (0..n).filter(|_| random_policy(&s, &t, &m, &mut rng).unwrap() == 0).count();
        let f = zeros as f64 / n as f64;
        // 4 standard errors of a fair coin
        assert!((f - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{f}");
    }

    #[test]
    fn greedy_classification_examples() {
        let t = task(vec![0.0; 3], vec![0, 0, 0], 1);
        let m = CostModel::uniform();
        let mut s = EpisodeState::new(t.dims, 3.0).unwrap();
        let p = [0.9, 0.1, 0.5];
        assert_eq!(greedy_classification_policy(&p, &s, &t, &m).unwrap(), 0);
        s.apply_query(&t, &m, 0).unwrap();
        assert_eq!(greedy_classification_policy(&p, &s, &t, &m).unwrap(), 2);
        let s0 = EpisodeState::new(t.dims, 3.0).unwrap();
        assert_eq!(greedy_classification_policy(&[0.3; 3], &s0, &t, &m).unwrap(), 0);
    }

    #[test]
    fn knn_no_labels_is_prior_and_lowest_index() {
        let t = task(vec![0.0, 1.0, 2.0, 3.0], vec![0, 0, 1, 1], 1);
        let m = CostModel::uniform();
        let s = EpisodeState::new(t.dims, 4.0).unwrap();
        let mut post = KnnPosterior::for_task(&t).unwrap();
        assert!(post.posteriors(&t).iter().all(|&v| v == 0.5));
        assert_eq!(knn_active_search_policy(&mut post, &t, &s, &m).unwrap(), 0);
    }

    #[test]
    fn knn_positive_twin_raises_posterior() {
        let t = task(vec![1.0, 5.0, 1.0], vec![1, 0, 1], 1);
        let mut post = KnnPosterior::new(1.0, 1.0, 1.0).unwrap();
        let before = post.posterior(&t, 2);
        post.observe(0, 1);
        let after = post.posterior(&t, 2);
        assert!(after > before);
        // identical features: weight one, (1 + 1) / (2 + 1)
        assert!((after - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_vanishing_bandwidth_reverts_to_prior() {
        let t = task(vec![0.0, 1.0, 2.0], vec![1, 0, 1], 1);
        let mut post = KnnPosterior::new(1e-3, 1.0, 1.0).unwrap();
        post.observe(0, 1);
        post.observe(1, 0);
        assert_eq!(post.posterior(&t, 2), post.prior());
    }

    #[test]
    fn knn_policy_follows_positive_neighbour() {
        let t = task(vec![0.0, 9.0, 0.1, 9.1], vec![1, 0, 1, 0], 1);
        let m = CostModel::uniform();
        let mut s = EpisodeState::new(t.dims, 4.0).unwrap();
        s.apply_query(&t, &m, 0).unwrap();
        let mut post = KnnPosterior::new(1.0, 1.0, 1.0).unwrap();
        assert_eq!(knn_active_search_policy(&mut post, &t, &s, &m).unwrap(), 2);
    }

    #[test]
    fn median_distance() {
        let t = task(vec![0.0, 1.0, 3.0], vec![0, 0, 0], 1);
        // distances 1, 3, 2
        assert_eq!(median_pairwise_distance(&t), 2.0);
    }

    proptest! {
        #[test]
        fn policies_respect_environment(seed in 0u64..500, manhattan in any::<bool>(), budget in 1.0f64..12.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
            let features: Vec<f64> = (0..n * 2).map(|_| rng.random::<f64>()).collect();
            let t = Task::new(GridDims::new(3, 4).unwrap(), 2, features, labels, Default::default()).unwrap();
            let m = if manhattan { CostModel::manhattan() } else { CostModel::uniform() };
            let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            for which in 0..3 {
                let mut s = EpisodeState::new(t.dims, budget).unwrap();
                let mut post = KnnPosterior::for_task(&t).unwrap();
                while !s.is_terminal(&t, &m) {
                    let cell = match which {
                        0 => random_policy(&s, &t, &m, &mut rng).unwrap(),
                        1 => greedy_classification_policy(&p, &s, &t, &m).unwrap(),
                        _ => knn_active_search_policy(&mut post, &t, &s, &m).unwrap(),
                    };
                    prop_assert!(!s.is_explored(cell));
                    s.apply_query(&t, &m, cell).unwrap();
                    for v in post.posteriors(&t) {
                        prop_assert!(v > 0.0 && v < 1.0);
                    }
                }
                prop_assert!(budget - s.remaining_budget <= budget + 1e-12);
                prop_assert!(s.remaining_budget >= -1e-12);
            }
        }
    }
}
