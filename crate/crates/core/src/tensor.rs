//! Dense matrices, layer passes, losses, sampling and Adam.
//!
//! The two networks in this crate are short fixed stacks, so instead of an
//! autodiff tape every layer exposes a forward pass and a matching backward
//! pass. All gradients here are checked against central finite differences
//! in the test suites.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VasError};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Row-major dense matrix. Bias vectors are stored as `n x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VasError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn column(data: Vec<f64>) -> Self {
        Mat {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `W^T y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += a * y x^T`.
    pub fn add_outer(&mut self, a: f64, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(a * yr, x, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }

    pub fn add_scaled(&mut self, a: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(a, &other.data, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Named, ordered weights of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Mat)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mat: Mat) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(VasError::Validation(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, mat));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn at(&self, i: usize) -> &Mat {
        &self.entries[i].1
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), Mat::zeros(m.rows, m.cols)))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(VasError::ShapeMismatch("parameter sets have different layouts".into()))
        }
    }

    pub fn add_scaled(&mut self, a: f64, other: &ParamSet) {
        debug_assert!(self.same_layout(other));
        for ((_, m), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            m.add_scaled(a, o);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for (_, m) in &mut self.entries {
            m.data.iter_mut().for_each(|v| *v *= a);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, m)| m.data.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, m)| m.data.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("parameter serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ParamFile = serde_json::from_str(s).map_err(|e| VasError::parse("<checkpoint>", e))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| VasError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VasError::io(path, e))?;
        let file: ParamFile = serde_json::from_str(&text).map_err(|e| VasError::parse(path, e))?;
        Self::from_file(file)
    }

    fn to_file(&self) -> ParamFile {
        ParamFile {
            format_version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|(name, m)| ParamEntry {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                    values: m.data.clone(),
                })
                .collect(),
        }
    }

    fn from_file(file: ParamFile) -> Result<Self> {
        if file.format_version != CHECKPOINT_VERSION {
            return Err(VasError::VersionMismatch {
                found: file.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut set = ParamSet::new();
        for e in file.params {
            let m = Mat::from_vec(e.rows, e.cols, e.values)?;
            if !m.is_finite() {
                return Err(VasError::NonFinite(format!("parameter `{}`", e.name)));
            }
            set.insert(e.name, m)?;
        }
        Ok(set)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format_version: u32,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// He-normal weights, `N(0, 2 / fan_in)`.
pub fn he_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let scale = (2.0 / cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Mat { rows, cols, data }
}

/// Uniform weights in `±sqrt(1 / fan_in)`.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = (1.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
    Mat { rows, cols, data }
}

/// `z = W x + b`.
pub fn affine_forward(w: &Mat, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(VasError::ShapeMismatch(format!(
            "affine {}x{} with bias {} applied to input {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    let mut z = w.matvec(x);
    for (zi, bi) in z.iter_mut().zip(b) {
        *zi += bi;
    }
    Ok(z)
}

/// Output and pre-activation of an affine + ReLU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineReluCache {
    pub pre: Vec<f64>,
}

pub fn affine_relu_forward(w: &Mat, b: &[f64], x: &[f64]) -> Result<(Vec<f64>, AffineReluCache)> {
    let pre = affine_forward(w, b, x)?;
    let y = relu(&pre);
    Ok((y, AffineReluCache { pre }))
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect()
}

/// Backward pass of `z = W x + b`: accumulates `dW`, `db` and returns `dx`.
pub fn affine_backward(w: &Mat, x: &[f64], dz: &[f64], dw: &mut Mat, db: &mut Mat) -> Vec<f64> {
    dw.add_outer(1.0, dz, x);
    axpy(1.0, dz, &mut db.data);
    w.matvec_t(dz)
}

/// Parameter-only variant of [`affine_backward`] for input layers.
pub fn affine_backward_params(x: &[f64], dz: &[f64], dw: &mut Mat, db: &mut Mat) {
    dw.add_outer(1.0, dz, x);
    axpy(1.0, dz, &mut db.data);
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Summed binary cross-entropy over the cells selected by `mask`, with its
/// gradient with respect to `p`. Gradient entries outside the mask are zero.
pub fn bce_loss(p: &[f64], target: &[f64], mask: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    if p.len() != target.len() || mask.is_some_and(|m| m.len() != p.len()) {
        return Err(VasError::ShapeMismatch(format!(
            "bce over {} predictions, {} targets, mask {:?}",
            p.len(),
            target.len(),
            mask.map(|m| m.len())
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for j in 0..p.len() {
        let m = mask.map_or(1.0, |m| m[j]);
        if m == 0.0 {
            continue;
        }
        let pj = clamp_prob(p[j]);
        let t = target[j];
        loss += m * -(t * pj.ln() + (1.0 - t) * (1.0 - pj).ln());
        grad[j] = m * (-t / pj + (1.0 - t) / (1.0 - pj));
    }
    Ok((loss, grad))
}

/// Inverse-CDF draw over ascending indices.
pub fn categorical_sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) || probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(VasError::DegenerateDistribution);
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// First and second moment estimates for every tensor of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    if !grads.is_finite() {
        return Err(VasError::NonFinite("gradient".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = &grads.at(i).data;
        let m = &mut state.m.at_mut(i).data;
        let v = &mut state.v.at_mut(i).data;
        let w = &mut params.at_mut(i).data;
        for k in 0..w.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, h: f64) -> ParamSet
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.len() {
        for k in 0..params.at(i).data.len() {
            let orig = params.at(i).data[k];
            probe.at_mut(i).data[k] = orig + h;
            let up = f(&probe);
            probe.at_mut(i).data[k] = orig - h;
            let down = f(&probe);
            probe.at_mut(i).data[k] = orig;
            grads.at_mut(i).data[k] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Fourth-order central difference. Tolerates a larger `h`, which keeps
/// round-off small when `f` is large relative to some gradient entries.
pub fn finite_diff_grad5<F>(mut f: F, params: &ParamSet, h: f64) -> ParamSet
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.len() {
        for k in 0..params.at(i).data.len() {
            let orig = params.at(i).data[k];
            let mut at = |step: f64| {
                probe.at_mut(i).data[k] = orig + step;
                f(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            probe.at_mut(i).data[k] = orig;
            grads.at_mut(i).data[k] = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        }
    }
    grads
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(&x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
