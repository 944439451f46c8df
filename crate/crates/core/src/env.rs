//! Grid tasks, query cost models and the budgeted query environment.
//!
//! An episode starts at a dummy position outside the grid with the full
//! budget `C`. Each query reveals one cell's label, earns that label as
//! reward and pays the cost of moving the query resource to the cell. The
//! environment never issues a query it cannot afford, so the sum of costs in
//! any episode log is at most `C`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VasError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(VasError::Validation(format!(
                "grid dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(GridDims { rows, cols })
    }

    /// Number of cells `N`.
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major `(row, col)` of a cell index.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn check(&self, index: usize) -> Result<()> {
        if index < self.cells() {
            Ok(())
        } else {
            Err(VasError::IndexOutOfRange {
                index,
                cells: self.cells(),
            })
        }
    }

    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }
}

/// One search instance: per-cell feature vectors and hidden binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub dims: GridDims,
    pub feature_dim: usize,
    /// Row-major `N x feature_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub meta: BTreeMap<String, String>,
}

impl Task {
    pub fn new(
        dims: GridDims,
        feature_dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let task = Task {
            dims,
            feature_dim,
            features,
            labels,
            meta,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.cells();
        if self.dims.rows == 0 || self.dims.cols == 0 {
            return Err(VasError::Validation("grid dimensions must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(VasError::Validation("feature_dim must be positive".into()));
        }
        if self.labels.len() != n {
            return Err(VasError::Validation(format!(
                "expected {n} labels for a {}x{} grid, got {}",
                self.dims.rows,
                self.dims.cols,
                self.labels.len()
            )));
        }
        if self.features.len() != n * self.feature_dim {
            return Err(VasError::Validation(format!(
                "expected {} feature values ({n} cells x {}), got {}",
                n * self.feature_dim,
                self.feature_dim,
                self.features.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y > 1) {
            return Err(VasError::Validation(format!("label {bad} is not 0 or 1")));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(VasError::NonFinite("task features".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.dims.cells()
    }

    pub fn feature(&self, cell: usize) -> &[f64] {
        &self.features[cell * self.feature_dim..(cell + 1) * self.feature_dim]
    }

    pub fn target_count(&self) -> usize {
        self.labels.iter().map(|&y| y as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Uniform,
    Manhattan,
}

impl std::str::FromStr for CostKind {
    type Err = VasError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(CostKind::Uniform),
            "manhattan" => Ok(CostKind::Manhattan),
            other => Err(VasError::Validation(format!("unknown cost model `{other}`"))),
        }
    }
}

impl std::fmt::Display for CostKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostKind::Uniform => f.write_str("uniform"),
            CostKind::Manhattan => f.write_str("manhattan"),
        }
    }
}

/// Where the query resource currently sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Dummy,
    Cell(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub kind: CostKind,
    /// Cost of the first query, charged from the dummy start position.
    pub initial_cost: f64,
}

impl CostModel {
    pub fn uniform() -> Self {
        CostModel {
            kind: CostKind::Uniform,
            initial_cost: 1.0,
        }
    }

    pub fn manhattan() -> Self {
        CostModel {
            kind: CostKind::Manhattan,
            initial_cost: 0.0,
        }
    }

    /// The model for `kind` with its default initial cost.
    pub fn from_kind(kind: CostKind) -> Self {
        match kind {
            CostKind::Uniform => Self::uniform(),
            CostKind::Manhattan => Self::manhattan(),
        }
    }

    pub fn with_initial_cost(mut self, initial_cost: f64) -> Self {
        self.initial_cost = initial_cost;
        self
    }

    pub fn query_cost(&self, dims: GridDims, from: Position, to: usize) -> Result<f64> {
        dims.check(to)?;
        if let Position::Cell(from) = from {
            dims.check(from)?;
        }
        Ok(self.cost_unchecked(dims, from, to))
    }

    pub(crate) fn cost_unchecked(&self, dims: GridDims, from: Position, to: usize) -> f64 {
        match (from, self.kind) {
            (Position::Dummy, _) => self.initial_cost,
            (Position::Cell(_), CostKind::Uniform) => 1.0,
            (Position::Cell(from), CostKind::Manhattan) => dims.manhattan(from, to) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub cell: usize,
    pub label: u8,
    pub reward: f64,
    pub cost: f64,
}

/// Live state of one search episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    /// Observation vector: +1 found, -1 empty, 0 unexplored.
    pub obs: Vec<f64>,
    explored: Vec<bool>,
    pub initial_budget: f64,
    pub remaining_budget: f64,
    pub last: Position,
    pub step: usize,
    pub log: Vec<QueryOutcome>,
}

impl EpisodeState {
    pub fn new(dims: GridDims, budget: f64) -> Result<Self> {
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(VasError::Validation(format!(
                "budget must be a nonnegative finite number, got {budget}"
            )));
        }
        let n = dims.cells();
        Ok(EpisodeState {
            obs: vec![0.0; n],
            explored: vec![false; n],
            initial_budget: budget,
            remaining_budget: budget,
            last: Position::Dummy,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn is_explored(&self, cell: usize) -> bool {
        self.explored[cell]
    }

    pub fn explored_mask(&self) -> &[bool] {
        &self.explored
    }

    /// Explored cells in query order.
    pub fn explored(&self) -> impl Iterator<Item = usize> + '_ {
        self.log.iter().map(|q| q.cell)
    }

    /// Remaining budget as a fraction of the initial budget.
    pub fn budget_fraction(&self) -> f64 {
        if self.initial_budget > 0.0 {
            (self.remaining_budget / self.initial_budget).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.log.iter().map(|q| q.reward).sum()
    }

    /// Unexplored cells reachable within the remaining budget, ascending.
    pub fn affordable_unexplored(&self, task: &Task, model: &CostModel) -> Vec<usize> {
        self.affordable_after(task, model, &[])
    }

    /// Allowed cells for the next pick of a multi-query step after the
    /// still-unrevealed `pending` picks have been committed in order.
    pub fn affordable_after(&self, task: &Task, model: &CostModel, pending: &[usize]) -> Vec<usize> {
        let dims = task.dims;
        let mut budget = self.remaining_budget;
        let mut last = self.last;
        for &cell in pending {
            budget -= model.cost_unchecked(dims, last, cell);
            last = Position::Cell(cell);
        }
        (0..dims.cells())
            .filter(|&j| !self.explored[j] && !pending.contains(&j))
            .filter(|&j| model.cost_unchecked(dims, last, j) <= budget)
            .collect()
    }

    pub fn is_terminal(&self, task: &Task, model: &CostModel) -> bool {
        let dims = task.dims;
        !(0..dims.cells())
            .any(|j| !self.explored[j] && model.cost_unchecked(dims, self.last, j) <= self.remaining_budget)
    }

    /// Query `cell`, revealing its label and paying the move cost.
    pub fn apply_query(&mut self, task: &Task, model: &CostModel, cell: usize) -> Result<QueryOutcome> {
        task.dims.check(cell)?;
        if self.explored[cell] {
            return Err(VasError::AlreadyExplored(cell));
        }
        let cost = model.cost_unchecked(task.dims, self.last, cell);
        if cost > self.remaining_budget {
            return Err(VasError::InsufficientBudget {
                cell,
                cost,
                remaining: self.remaining_budget,
            });
        }
        let label = task.labels[cell];
        let outcome = QueryOutcome {
            cell,
            label,
            reward: label as f64,
            cost,
        };
        self.obs[cell] = 2.0 * label as f64 - 1.0;
        self.explored[cell] = true;
        self.remaining_budget -= cost;
        self.last = Position::Cell(cell);
        self.step += 1;
        self.log.push(outcome);
        Ok(outcome)
    }

    /// Value-style variant of [`apply_query`](Self::apply_query).
    pub fn with_query(&self, task: &Task, model: &CostModel, cell: usize) -> Result<(QueryOutcome, EpisodeState)> {
        let mut next = self.clone();
        let outcome = next.apply_query(task, model, cell)?;
        Ok((outcome, next))
    }

    /// Labels observed so far, keyed by cell.
    pub fn observed(&self) -> BTreeMap<usize, u8> {
        self.log.iter().map(|q| (q.cell, q.label)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(rows: usize, cols: usize, positives: &[usize]) -> Task {
        let dims = GridDims::new(rows, cols).unwrap();
        let n = dims.cells();
        let mut labels = vec![0u8; n];
        for &p in positives {
            labels[p] = 1;
        }
        Task::new(dims, 1, vec![0.0; n], labels, BTreeMap::new()).unwrap()
    }

    #[test]
    fn cost_examples() {
        let dims = GridDims::new(7, 7).unwrap();
        assert_eq!(CostModel::uniform().query_cost(dims, Position::Cell(12), 5).unwrap(), 1.0);
        assert_eq!(CostModel::uniform().query_cost(dims, Position::Dummy, 5).unwrap(), 1.0);
        let m = CostModel::manhattan();
        assert_eq!(m.query_cost(dims, Position::Cell(0), 8).unwrap(), 2.0);
        assert_eq!(m.query_cost(dims, Position::Cell(17), 17).unwrap(), 0.0);
        assert_eq!(m.query_cost(dims, Position::Dummy, 30).unwrap(), 0.0);
        assert!(matches!(
            m.query_cost(dims, Position::Dummy, 49),
            Err(VasError::IndexOutOfRange { index: 49, cells: 49 })
        ));
    }

    #[test]
    fn affordable_examples() {
        let t = task(1, 3, &[]);
        let s = EpisodeState::new(t.dims, 0.5).unwrap();
        assert!(s.affordable_unexplored(&t, &CostModel::uniform()).is_empty());

        let t = task(1, 5, &[]);
        let mut s = EpisodeState::new(t.dims, 5.0).unwrap();
        for c in [0, 2, 3] {
            s.apply_query(&t, &CostModel::uniform(), c).unwrap();
        }
        assert_eq!(s.remaining_budget, 2.0);
        assert_eq!(s.affordable_unexplored(&t, &CostModel::uniform()), vec![1, 4]);
    }

    #[test]
    fn manhattan_neighbours_of_centre() {
        let t = task(3, 3, &[]);
        let m = CostModel::manhattan();
        let mut s = EpisodeState::new(t.dims, 1.0).unwrap();
        s.apply_query(&t, &m, 4).unwrap();
        assert_eq!(s.remaining_budget, 1.0);
        // brute-force enumeration of distances from (1,1)
        let expected: Vec<usize> = (0..9)
            .filter(|&j| j != 4)
            .filter(|&j| {
                let (r, c) = (j / 3, j % 3);
                (r as i64 - 1).abs() + (c as i64 - 1).abs() <= 1
            })
            .collect();
        assert_eq!(expected, vec![1, 3, 5, 7]);
        assert_eq!(s.affordable_unexplored(&t, &m), expected);
    }

    #[test]
    fn query_reveals_label() {
        let t = task(2, 2, &[3]);
        let m = CostModel::uniform();
        let s = EpisodeState::new(t.dims, 4.0).unwrap();
        let (out, s) = s.with_query(&t, &m, 3).unwrap();
        assert_eq!(out.reward, 1.0);
        assert_eq!(s.obs[3], 1.0);
        let (out, s) = s.with_query(&t, &m, 2).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(s.obs[2], -1.0);
        assert!(matches!(s.with_query(&t, &m, 3), Err(VasError::AlreadyExplored(3))));
        assert!(matches!(s.with_query(&t, &m, 9), Err(VasError::IndexOutOfRange { .. })));
    }

    #[test]
    fn insufficient_budget_rejected() {
        let t = task(3, 3, &[]);
        let m = CostModel::manhattan();
        let mut s = EpisodeState::new(t.dims, 1.0).unwrap();
        s.apply_query(&t, &m, 0).unwrap();
        assert!(matches!(
            s.apply_query(&t, &m, 8),
            Err(VasError::InsufficientBudget { cell: 8, .. })
        ));
        assert_eq!(s.remaining_budget, 1.0);
    }

    #[test]
    fn terminal_examples() {
        let t = task(2, 2, &[]);
        let m = CostModel::uniform();
        assert!(EpisodeState::new(t.dims, 0.0).unwrap().is_terminal(&t, &m));
        let mut s = EpisodeState::new(t.dims, 100.0).unwrap();
        for c in 0..4 {
            s.apply_query(&t, &m, c).unwrap();
        }
        assert!(s.is_terminal(&t, &m));
        let mut s = EpisodeState::new(t.dims, 5.0).unwrap();
        s.apply_query(&t, &m, 0).unwrap();
        s.apply_query(&t, &m, 1).unwrap();
        assert!(!s.is_terminal(&t, &m));
    }

    #[test]
    fn pending_picks_move_the_resource() {
        let t = task(1, 5, &[]);
        let m = CostModel::manhattan();
        let s = EpisodeState::new(t.dims, 2.0).unwrap();
        // first pick is free from the dummy cell; second is measured from it
        assert_eq!(s.affordable_after(&t, &m, &[0]), vec![1, 2]);
        assert!(s.affordable_after(&t, &m, &[0, 2]).is_empty());
        assert_eq!(s.affordable_after(&t, &m, &[0, 1]), vec![2]);
    }
}
