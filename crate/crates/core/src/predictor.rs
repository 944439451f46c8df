//! Task-specific prediction module: per-cell target probabilities from cell
//! features and the observation vector.
//!
//! Stage 1 is an affine + ReLU map shared by every cell over the cell's
//! features concatenated with its observation entry. Its outputs are
//! flattened cell-major and pass through a full-grid affine + ReLU of width
//! `2N` and a final affine + sigmoid of width `N`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, VasError};
use crate::tensor::{
    adam_step, affine_backward, affine_backward_params, affine_forward, bce_loss, he_init, relu,
    relu_backward, sigmoid_scalar, uniform_init, AdamState, Mat, ParamSet, PROB_EPS,
};

const S1_W: usize = 0;
const S1_B: usize = 1;
const S2_W: usize = 2;
const S2_B: usize = 3;
const S3_W: usize = 4;
const S3_B: usize = 5;

pub const DEFAULT_HIDDEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    cells: usize,
    feature_dim: usize,
    hidden: usize,
    params: ParamSet,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct PredictorForward {
    /// Per-cell stage-1 inputs `[features_j ; o_j]`, cell-major.
    inputs: Vec<f64>,
    s1_pre: Vec<f64>,
    s1_out: Vec<f64>,
    s2_pre: Vec<f64>,
    s2_out: Vec<f64>,
    logits: Vec<f64>,
    pub p: Vec<f64>,
}

impl PredictorForward {
    /// Stage-1 outputs, `N x hidden` cell-major.
    pub fn stage1(&self) -> &[f64] {
        &self.s1_out
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

impl PredictorParams {
    pub fn init<R: Rng + ?Sized>(cells: usize, feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let wide = 2 * cells;
        params.insert("stage1.w", he_init(hidden, feature_dim + 1, rng)).unwrap();
        params.insert("stage1.b", Mat::zeros(hidden, 1)).unwrap();
        params.insert("stage2.w", he_init(wide, cells * hidden, rng)).unwrap();
        params.insert("stage2.b", Mat::zeros(wide, 1)).unwrap();
        params.insert("stage3.w", uniform_init(cells, wide, rng)).unwrap();
        params.insert("stage3.b", Mat::zeros(cells, 1)).unwrap();
        PredictorParams {
            cells,
            feature_dim,
            hidden,
            params,
        }
    }

    pub fn zeros(cells: usize, feature_dim: usize, hidden: usize) -> Self {
        let wide = 2 * cells;
        let mut params = ParamSet::new();
        params.insert("stage1.w", Mat::zeros(hidden, feature_dim + 1)).unwrap();
        params.insert("stage1.b", Mat::zeros(hidden, 1)).unwrap();
        params.insert("stage2.w", Mat::zeros(wide, cells * hidden)).unwrap();
        params.insert("stage2.b", Mat::zeros(wide, 1)).unwrap();
        params.insert("stage3.w", Mat::zeros(cells, wide)).unwrap();
        params.insert("stage3.b", Mat::zeros(cells, 1)).unwrap();
        PredictorParams {
            cells,
            feature_dim,
            hidden,
            params,
        }
    }

    /// Rebuilds from a checkpointed parameter set, inferring the shapes.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let names = ["stage1.w", "stage1.b", "stage2.w", "stage2.b", "stage3.w", "stage3.b"];
        if params.len() != names.len() || params.iter().zip(names).any(|((n, _), want)| n != want) {
            return Err(VasError::Validation("not a predictor checkpoint".into()));
        }
        let (hidden, d1) = params.at(S1_W).shape();
        let cells = params.at(S3_W).rows;
        if d1 < 2 || hidden == 0 || cells == 0 {
            return Err(VasError::ShapeMismatch("degenerate predictor shapes".into()));
        }
        let template = Self::zeros(cells, d1 - 1, hidden);
        template.params.check_layout(&params)?;
        Ok(PredictorParams {
            cells,
            feature_dim: d1 - 1,
            hidden,
            params,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_inputs(&self, features: &[f64], obs: &[f64]) -> Result<()> {
        if features.len() != self.cells * self.feature_dim || obs.len() != self.cells {
            return Err(VasError::ShapeMismatch(format!(
                "predictor for {} cells x {} features got {} feature values and {} observations",
                self.cells,
                self.feature_dim,
                features.len(),
                obs.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64], obs: &[f64]) -> Result<PredictorForward> {
        self.check_inputs(features, obs)?;
        let (n, d, h) = (self.cells, self.feature_dim, self.hidden);
        let w1 = self.params.at(S1_W);
        let b1 = &self.params.at(S1_B).data;
        let mut inputs = Vec::with_capacity(n * (d + 1));
        let mut s1_pre = Vec::with_capacity(n * h);
        for j in 0..n {
            let start = inputs.len();
            inputs.extend_from_slice(&features[j * d..(j + 1) * d]);
            inputs.push(obs[j]);
            s1_pre.extend(affine_forward(w1, b1, &inputs[start..])?);
        }
        let s1_out = relu(&s1_pre);
        let s2_pre = affine_forward(self.params.at(S2_W), &self.params.at(S2_B).data, &s1_out)?;
        let s2_out = relu(&s2_pre);
        let logits = affine_forward(self.params.at(S3_W), &self.params.at(S3_B).data, &s2_out)?;
        let p = logits
            .iter()
            .map(|&z| sigmoid_scalar(z).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        Ok(PredictorForward {
            inputs,
            s1_pre,
            s1_out,
            s2_pre,
            s2_out,
            logits,
            p,
        })
    }

    /// Per-cell target probabilities, each in `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn predict(&self, features: &[f64], obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(features, obs)?.p)
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative
    /// with respect to `p` is `dp`.
    pub fn backward_into(&self, fwd: &PredictorForward, dp: &[f64], grads: &mut ParamSet) {
        let (n, d, h) = (self.cells, self.feature_dim, self.hidden);
        let dz3: Vec<f64> = fwd
            .logits
            .iter()
            .zip(&fwd.p)
            .zip(dp)
            .map(|((&z, &p), &g)| {
                let s = sigmoid_scalar(z);
                // clamped outputs are locally constant
                if s != p {
                    0.0
                } else {
                    g * s * (1.0 - s)
                }
            })
            .collect();
        let (dw3, db3) = two_mut(grads, S3_W, S3_B);
        let ds2 = affine_backward(self.params.at(S3_W), &fwd.s2_out, &dz3, dw3, db3);
        let dz2 = relu_backward(&fwd.s2_pre, &ds2);
        let (dw2, db2) = two_mut(grads, S2_W, S2_B);
        let ds1 = affine_backward(self.params.at(S2_W), &fwd.s1_out, &dz2, dw2, db2);
        let dz1 = relu_backward(&fwd.s1_pre, &ds1);
        let (dw1, db1) = two_mut(grads, S1_W, S1_B);
        for j in 0..n {
            let dz = &dz1[j * h..(j + 1) * h];
            if dz.iter().any(|&v| v != 0.0) {
                affine_backward_params(&fwd.inputs[j * (d + 1)..(j + 1) * (d + 1)], dz, dw1, db1);
            }
        }
    }

    pub fn backward(&self, fwd: &PredictorForward, dp: &[f64]) -> ParamSet {
        let mut grads = self.params.zeros_like();
        self.backward_into(fwd, dp, &mut grads);
        grads
    }

    /// Masked binary cross-entropy of the prediction against `target` and
    /// its gradient over all parameters.
    pub fn bce_grad(
        &self,
        features: &[f64],
        obs: &[f64],
        target: &[f64],
        mask: Option<&[f64]>,
    ) -> Result<(f64, ParamSet)> {
        let fwd = self.forward(features, obs)?;
        let (loss, dp) = bce_loss(&fwd.p, target, mask)?;
        Ok((loss, self.backward(&fwd, &dp)))
    }

    /// Pseudo-label targets: observed labels where known, the model's own
    /// prediction elsewhere.
    pub fn pseudo_labels(&self, features: &[f64], obs: &[f64], observed: &BTreeMap<usize, u8>) -> Result<Vec<f64>> {
        let mut target = self.predict(features, obs)?;
        for (&cell, &y) in observed {
            if cell >= self.cells {
                return Err(VasError::IndexOutOfRange {
                    index: cell,
                    cells: self.cells,
                });
            }
            target[cell] = y as f64;
        }
        Ok(target)
    }

    /// One inner-loop Adam step on the pseudo-label BCE. Returns the loss
    /// before the step.
    pub fn adapt_inner(
        &mut self,
        features: &[f64],
        obs: &[f64],
        observed: &BTreeMap<usize, u8>,
        lr: f64,
        adam: &mut AdamState,
    ) -> Result<f64> {
        let target = self.pseudo_labels(features, obs, observed)?;
        let (loss, grads) = self.bce_grad(features, obs, &target, None)?;
        adam_step(&mut self.params, &grads, adam, lr)?;
        Ok(loss)
    }
}

pub(crate) fn two_mut(set: &mut ParamSet, w: usize, b: usize) -> (&mut Mat, &mut Mat) {
    debug_assert!(w < b);
    let mut it = set.iter_mut().skip(w);
    let (_, wm) = it.next().unwrap();
    let (_, bm) = it.nth(b - w - 1).unwrap();
    (wm, bm)
}

/// Target vector and mask selecting `observed` cells.
pub fn observed_target_mask(cells: usize, observed: &BTreeMap<usize, u8>) -> (Vec<f64>, Vec<f64>) {
    let mut target = vec![0.0; cells];
    let mut mask = vec![0.0; cells];
    for (&c, &y) in observed {
        target[c] = y as f64;
        mask[c] = 1.0;
    }
    (target, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
        let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obs = (0..n).map(|_| [-1.0, 0.0, 1.0][rng.random_range(0..3)]).collect();
        (features, obs)
    }

    /// Independent reference forward written with plain loops.
    fn reference_predict(theta: &PredictorParams, features: &[f64], obs: &[f64]) -> Vec<f64> {
        let (n, d, h) = (theta.cells(), theta.feature_dim(), theta.hidden());
        let ps = theta.params();
        let get = |name: &str| ps.get(name).unwrap();
        let (w1, b1, w2, b2, w3, b3) = (
            get("stage1.w"),
            get("stage1.b"),
            get("stage2.w"),
            get("stage2.b"),
            get("stage3.w"),
            get("stage3.b"),
        );
        let mut flat = vec![0.0; n * h];
        for j in 0..n {
            for k in 0..h {
                let mut acc = b1.data[k];
                for i in 0..d {
                    acc += w1.data[k * (d + 1) + i] * features[j * d + i];
                }
                acc += w1.data[k * (d + 1) + d] * obs[j];
                flat[j * h + k] = if acc > 0.0 { acc } else { 0.0 };
            }
        }
        let mut hid = vec![0.0; 2 * n];
        for r in 0..2 * n {
            let mut acc = b2.data[r];
            for c in 0..n * h {
                acc += w2.data[r * n * h + c] * flat[c];
            }
            hid[r] = acc.max(0.0);
        }
        (0..n)
            .map(|r| {
                let mut acc = b3.data[r];
                for c in 0..2 * n {
                    acc += w3.data[r * 2 * n + c] * hid[c];
                }
                1.0 / (1.0 + (-acc).exp())
            })
            .collect()
    }

    #[test]
    fn zero_weights_predict_half() {
        let theta = PredictorParams::zeros(6, 3, 2);
        let p = theta.predict(&[0.7; 18], &[0.0, 1.0, -1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta = PredictorParams::init(4, 2, 3, &mut rng);
        let (f, _) = random_inputs(&mut rng, 4, 2);
        let o = vec![0.0; 4];
        let p = theta.predict(&f, &o).unwrap();
        let r = reference_predict(&theta, &f, &o);
        for (a, b) in p.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage1_is_cell_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (5, 3);
        let theta = PredictorParams::init(n, d, 4, &mut rng);
        let (f, o) = random_inputs(&mut rng, n, d);
        let perm = [3, 0, 4, 1, 2];
        let mut pf = vec![0.0; n * d];
        let mut po = vec![0.0; n];
        for (dst, &src) in perm.iter().enumerate() {
            pf[dst * d..(dst + 1) * d].copy_from_slice(&f[src * d..(src + 1) * d]);
            po[dst] = o[src];
        }
        let a = theta.forward(&f, &o).unwrap();
        let b = theta.forward(&pf, &po).unwrap();
        let h = theta.hidden();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&b.stage1()[dst * h..(dst + 1) * h], &a.stage1()[src * h..(src + 1) * h]);
        }
    }

    #[test]
    fn shape_errors() {
        let theta = PredictorParams::zeros(4, 2, 3);
        assert!(matches!(theta.predict(&[0.0; 7], &[0.0; 4]), Err(VasError::ShapeMismatch(_))));
        assert!(matches!(theta.predict(&[0.0; 8], &[0.0; 3]), Err(VasError::ShapeMismatch(_))));
    }

    #[test]
    fn bce_grad_fixed_point_and_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = PredictorParams::init(6, 3, 3, &mut rng);
        let (f, o) = random_inputs(&mut rng, 6, 3);
        let p = theta.predict(&f, &o).unwrap();
        let (_, g) = theta.bce_grad(&f, &o, &p, None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let (l, g) = theta.bce_grad(&f, &o, &[1.0; 6], Some(&[0.0; 6])).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let n = rng.random_range(1..=9);
            let d = rng.random_range(1..=4);
            let h = rng.random_range(1..=8);
            let theta = PredictorParams::init(n, d, h, &mut rng);
            let (f, o) = random_inputs(&mut rng, n, d);
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mask: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            let (_, ana) = theta.bce_grad(&f, &o, &t, Some(&mask)).unwrap();
            let num = finite_diff_grad(
                |ps| {
                    let th = PredictorParams::from_params(ps.clone()).unwrap();
                    th.bce_grad(&f, &o, &t, Some(&mask)).unwrap().0
                },
                theta.params(),
                1e-5,
            );
            let err = max_relative_error(&ana, &num, 1e-4);
            assert!(err <= 1e-3, "relative error {err}");
        }
    }

    #[test]
    fn pseudo_label_gradient_equals_masked_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (n, d) = (9, 4);
            let theta = PredictorParams::init(n, d, 5, &mut rng);
            let (f, o) = random_inputs(&mut rng, n, d);
            let mut observed = BTreeMap::new();
            for c in 0..n {
                if rng.random_bool(0.4) {
                    observed.insert(c, rng.random_range(0..2u8));
                }
            }
            let pseudo = theta.pseudo_labels(&f, &o, &observed).unwrap();
            let (_, g_pseudo) = theta.bce_grad(&f, &o, &pseudo, None).unwrap();
            let (t, m) = observed_target_mask(n, &observed);
            let (_, g_masked) = theta.bce_grad(&f, &o, &t, Some(&m)).unwrap();
            for (a, b) in g_pseudo.flatten().iter().zip(g_masked.flatten()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adapt_without_observations_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut theta = PredictorParams::init(6, 3, 3, &mut rng);
        let before = theta.clone();
        let (f, o) = random_inputs(&mut rng, 6, 3);
        let mut adam = AdamState::new(theta.params());
        theta.adapt_inner(&f, &o, &BTreeMap::new(), 1e-4, &mut adam).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn adapt_raises_observed_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, d) = (9, 4);
        let mut theta = PredictorParams::init(n, d, 3, &mut rng);
        let (f, mut o) = random_inputs(&mut rng, n, d);
        o.iter_mut().for_each(|v| *v = 0.0);
        o[2] = 1.0;
        // set the output bias so the cell starts at p = 0.3
        let p0 = theta.predict(&f, &o).unwrap()[2];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        theta.params_mut().get_mut("stage3.b").unwrap().data[2] += logit(0.3) - logit(p0);
        let before = theta.predict(&f, &o).unwrap()[2];
        assert!((before - 0.3).abs() < 1e-9);
        let observed = BTreeMap::from([(2usize, 1u8)]);
        let mut adam = AdamState::new(theta.params());
        let loss0 = theta.adapt_inner(&f, &o, &observed, 1e-4, &mut adam).unwrap();
        let after = theta.predict(&f, &o).unwrap()[2];
        let (t, m) = observed_target_mask(n, &observed);
        let (loss1, _) = theta.bce_grad(&f, &o, &t, Some(&m)).unwrap();
        assert!(after > before);
        let masked0 = -(0.3f64).ln();
        assert!(loss1 < masked0, "{loss1} !< {masked0} (pseudo loss {loss0})");
    }

    #[test]
    fn repeated_adaptation_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let (n, d) = (9, 4);
            let mut theta = PredictorParams::init(n, d, 6, &mut rng);
            let (f, o) = random_inputs(&mut rng, n, d);
            let observed: BTreeMap<usize, u8> =
                (0..n).filter(|&j| o[j] != 0.0).map(|j| (j, u8::from(o[j] > 0.0))).collect();
            let (t, m) = observed_target_mask(n, &observed);
            let mut adam = AdamState::new(theta.params());
            let mut prev = theta.bce_grad(&f, &o, &t, Some(&m)).unwrap().0;
            for _ in 0..50 {
                theta.adapt_inner(&f, &o, &observed, 1e-4, &mut adam).unwrap();
                let loss = theta.bce_grad(&f, &o, &t, Some(&m)).unwrap().0;
                assert!(loss <= prev + 1e-9, "{loss} > {prev}");
                prev = loss;
            }
        }
    }

    #[test]
    fn from_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = PredictorParams::init(7, 2, 3, &mut rng);
        let back = PredictorParams::from_params(ParamSet::from_json(&theta.params().to_json()).unwrap()).unwrap();
        assert_eq!(theta, back);
        let mut junk = ParamSet::new();
        junk.insert("w", Mat::zeros(1, 1)).unwrap();
        assert!(PredictorParams::from_params(junk).is_err());
    }
}
