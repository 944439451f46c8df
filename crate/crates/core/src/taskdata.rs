//! Synthetic search tasks and the on-disk task format.
//!
//! A task is generated from a white-noise field on the grid, smoothed with a
//! Gaussian kernel of width `smoothing`. The `⌊qN⌋` (plus one with
//! probability `frac(qN)`, so the expected rate is exactly `q`) highest cells
//! of the smoothed field are the targets, which makes targets spatially
//! clustered. Each cell's feature vector is `snr * label * class_direction`
//! plus unit Gaussian noise.
//!
//! Task file: `{format_version, rows, cols, feature_dim, labels, features,
//! meta}` with row-major features. A task set is a directory of task files
//! plus `index.json` = `{tasks: [{path, split}]}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{GridDims, Task};
use crate::error::{Result, VasError};

pub const TASK_FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

/// Signal strength at which a linear probe reaches AUC ≈ 0.85 on clean
/// labels: `Φ(snr / √2) = 0.85`.
pub const DEFAULT_SNR: f64 = 1.47;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassDirection {
    /// Drawn once from the config seed, shared by every task of the config.
    Random,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub dims: GridDims,
    pub feature_dim: usize,
    pub target_rate: f64,
    pub smoothing: f64,
    pub snr: f64,
    pub class_direction: ClassDirection,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(dims: GridDims) -> Self {
        GenConfig {
            dims,
            feature_dim: 32,
            target_rate: 0.1,
            smoothing: 1.0,
            snr: DEFAULT_SNR,
            class_direction: ClassDirection::Random,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        GridDims::new(self.dims.rows, self.dims.cols)?;
        if self.feature_dim == 0 {
            return Err(VasError::Validation("feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(VasError::Validation(format!(
                "target rate must lie in [0, 1], got {}",
                self.target_rate
            )));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(VasError::Validation("smoothing length must be >= 0".into()));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(VasError::Validation("signal-to-noise must be > 0".into()));
        }
        if let ClassDirection::Fixed(d) = &self.class_direction {
            if d.len() != self.feature_dim {
                return Err(VasError::ShapeMismatch(format!(
                    "class direction of length {} for feature_dim {}",
                    d.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// The unit class direction used for every task of this config.
    pub fn direction(&self) -> Vec<f64> {
        match &self.class_direction {
            ClassDirection::Fixed(d) => normalized(d.clone()),
            ClassDirection::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x005e_edc1_a55d_1ec7);
                random_unit(self.feature_dim, &mut rng)
            }
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if v.iter().any(|&x| x != 0.0) {
            return normalized(v);
        }
    }
}

/// Separable Gaussian smoothing, normalized by the in-bounds kernel mass.
pub fn smooth_field(field: &[f64], dims: GridDims, length: f64) -> Vec<f64> {
    if length <= 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * length).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * length * length)).exp())
        .collect();
    let pass = |input: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; input.len()];
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                let (mut acc, mut mass) = (0.0, 0.0);
                for (i, k) in (-radius..=radius).enumerate() {
                    let (rr, cc) = if along_rows {
                        (r as isize, c as isize + k)
                    } else {
                        (r as isize + k, c as isize)
                    };
                    if rr >= 0 && cc >= 0 && (rr as usize) < dims.rows && (cc as usize) < dims.cols {
                        acc += kernel[i] * input[dims.index(rr as usize, cc as usize)];
                        mass += kernel[i];
                    }
                }
                out[dims.index(r, c)] = acc / mass;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Number of targets for a task: `⌊qN⌋`, plus one with probability `frac(qN)`.
fn target_count<R: Rng + ?Sized>(rate: f64, cells: usize, rng: &mut R) -> usize {
    let expected = rate * cells as f64;
    let base = expected.floor();
    let frac = expected - base;
    let extra = usize::from(frac > 0.0 && rng.random::<f64>() < frac);
    (base as usize + extra).min(cells)
}

pub fn generate_task<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<Task> {
    cfg.validate()?;
    let dims = cfg.dims;
    let n = dims.cells();
    let d = cfg.feature_dim;
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let field = smooth_field(&noise, dims, cfg.smoothing);
    let k = target_count(cfg.target_rate, n, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut labels = vec![0u8; n];
    for &j in &order[..k] {
        labels[j] = 1;
    }
    let direction = cfg.direction();
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        let shift = cfg.snr * y as f64;
        for &u in &direction {
            let z: f64 = StandardNormal.sample(rng);
            features.push(shift * u + z);
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), "smoothed-quantile".to_string());
    meta.insert("target_rate".to_string(), cfg.target_rate.to_string());
    meta.insert("smoothing".to_string(), cfg.smoothing.to_string());
    meta.insert("snr".to_string(), cfg.snr.to_string());
    meta.insert("config_seed".to_string(), cfg.seed.to_string());
    Task::new(dims, d, features, labels, meta)
}

/// Tasks `0..count` with per-task seeds `seed + index`.
pub fn generate_tasks(cfg: &GenConfig, count: usize, seed: u64) -> Result<Vec<Task>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut task = generate_task(cfg, &mut rng)?;
            task.meta.insert("task_seed".into(), seed.wrapping_add(i as u64).to_string());
            Ok(task)
        })
        .collect()
}

/// Same config with a freshly drawn class direction, for out-of-distribution
/// task sets.
pub fn shift_class<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> GenConfig {
    let mut shifted = cfg.clone();
    shifted.class_direction = ClassDirection::Fixed(random_unit(cfg.feature_dim, rng));
    shifted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl std::str::FromStr for Split {
    type Err = VasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(VasError::Validation(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    format_version: u32,
    rows: usize,
    cols: usize,
    feature_dim: usize,
    labels: Vec<u8>,
    features: Vec<f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskIndex {
    pub tasks: Vec<IndexEntry>,
}

pub fn task_to_json(task: &Task) -> String {
    let file = TaskFile {
        format_version: TASK_FORMAT_VERSION,
        rows: task.dims.rows,
        cols: task.dims.cols,
        feature_dim: task.feature_dim,
        labels: task.labels.clone(),
        features: task.features.clone(),
        meta: task.meta.clone(),
    };
    serde_json::to_string(&file).expect("task serialization cannot fail")
}

pub fn task_from_json(text: &str, origin: &Path) -> Result<Task> {
    let file: TaskFile = serde_json::from_str(text).map_err(|e| VasError::parse(origin, e))?;
    if file.format_version != TASK_FORMAT_VERSION {
        return Err(VasError::VersionMismatch {
            found: file.format_version,
            expected: TASK_FORMAT_VERSION,
        });
    }
    let dims = GridDims::new(file.rows, file.cols)?;
    Task::new(dims, file.feature_dim, file.features, file.labels, file.meta)
}

pub fn save_task(task: &Task, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, task_to_json(task)).map_err(|e| VasError::io(path, e))
}

pub fn load_task(path: impl AsRef<Path>) -> Result<Task> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VasError::io(path, e))?;
    task_from_json(&text, path)
}

/// Writes `task_NNNNN.json` files and the index into `dir`.
pub fn save_task_set(dir: impl AsRef<Path>, tasks: &[(Task, Split)]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| VasError::io(dir, e))?;
    let mut index = TaskIndex { tasks: Vec::new() };
    for (i, (task, split)) in tasks.iter().enumerate() {
        let name = format!("task_{i:05}.json");
        save_task(task, dir.join(&name))?;
        index.tasks.push(IndexEntry {
            path: name,
            split: *split,
        });
    }
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serialization cannot fail");
    std::fs::write(&path, text).map_err(|e| VasError::io(&path, e))
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<TaskIndex> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| VasError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| VasError::parse(&path, e))
}

/// Loads every task listed in the index, optionally filtered by split.
pub fn load_task_set(dir: impl AsRef<Path>, split: Option<Split>) -> Result<Vec<(Task, Split)>> {
    let dir = dir.as_ref();
    let index = load_index(dir)?;
    index
        .tasks
        .iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            Ok((load_task(path)?, e.split))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rows: usize, cols: usize) -> GenConfig {
        GenConfig::new(GridDims::new(rows, cols).unwrap())
    }

    #[test]
    fn extreme_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = cfg(5, 5);
        c.target_rate = 0.0;
        assert_eq!(generate_task(&c, &mut rng).unwrap().target_count(), 0);
        c.target_rate = 1.0;
        assert_eq!(generate_task(&c, &mut rng).unwrap().target_count(), 25);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = cfg(7, 7);
        let a = generate_tasks(&c, 3, 10).unwrap();
        let b = generate_tasks(&c, 3, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn direction_is_unit_and_shared() {
        let c = cfg(4, 4);
        let u = c.direction();
        assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(u, c.direction());
    }

    #[test]
    fn shift_preserves_other_fields() {
        let c = cfg(7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = shift_class(&c, &mut rng);
        let d = s.direction();
        assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(d, c.direction());
        let mut back = s.clone();
        back.class_direction = ClassDirection::Random;
        assert_eq!(back, c);
    }

    #[test]
    fn shifted_directions_are_uncorrelated() {
        let mut c = cfg(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 4000;
        let mut total = 0.0;
        for i in 0..draws {
            c.seed = i;
            let u = c.direction();
            let v = shift_class(&c, &mut rng).direction();
            total += u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        // each cosine has standard deviation 1/sqrt(32)
        let mean = total / draws as f64;
        let se = (1.0 / 32.0f64).sqrt() / (draws as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean cosine {mean}");
    }

    #[test]
    fn empirical_rate_matches_target() {
        let mut c = cfg(7, 7);
        c.feature_dim = 2;
        let tasks = generate_tasks(&c, 10_000, 1).unwrap();
        let fractions: Vec<f64> = tasks.iter().map(|t| t.target_count() as f64 / 49.0).collect();
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (fractions.len() - 1) as f64;
        let se = (var / fractions.len() as f64).sqrt();
        assert!((mean - 0.1).abs() <= 3.0 * se, "rate {mean} se {se}");
    }

    fn lag1_autocorrelation(tasks: &[Task]) -> f64 {
        // pooled correlation of horizontally adjacent labels
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for t in tasks {
            for r in 0..t.dims.rows {
                for c in 0..t.dims.cols - 1 {
                    let x = t.labels[t.dims.index(r, c)] as f64;
                    let y = t.labels[t.dims.index(r, c + 1)] as f64;
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                    n += 1.0;
                }
            }
        }
        let cov = sxy / n - (sx / n) * (sy / n);
        let vx = sxx / n - (sx / n).powi(2);
        let vy = syy / n - (sy / n).powi(2);
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn smoothing_creates_spatial_correlation() {
        let mut c = cfg(7, 7);
        c.feature_dim = 1;
        c.smoothing = 0.0;
        let white = lag1_autocorrelation(&generate_tasks(&c, 10_000, 3).unwrap());
        // exact top-k selection induces a slight negative correlation of
        // order -1/(N-1); it vanishes at zero smoothing up to that bias
        assert!(white.abs() < 0.03, "white-noise autocorrelation {white}");
        c.smoothing = 2.0;
        let smooth = lag1_autocorrelation(&generate_tasks(&c, 10_000, 3).unwrap());
        assert!(smooth > 0.2, "smoothed autocorrelation {smooth}");
    }

    /// Area under the ROC curve by pairwise comparison.
    fn auc(scores: &[f64], labels: &[u8]) -> f64 {
        let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(s, _)| *s).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &q in &neg {
                wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn logistic_probe_learns_default_tasks() {
        let c = cfg(7, 7);
        let train = generate_tasks(&c, 200, 100).unwrap();
        let test = generate_tasks(&c, 100, 5000).unwrap();
        let d = c.feature_dim;
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        // full-batch gradient descent on the logistic loss
        for _ in 0..300 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            let mut count = 0.0;
            for t in &train {
                for j in 0..t.cells() {
                    let x = t.feature(j);
                    let z = b + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                    let err = 1.0 / (1.0 + (-z).exp()) - t.labels[j] as f64;
                    for k in 0..d {
                        gw[k] += err * x[k];
                    }
                    gb += err;
                    count += 1.0;
                }
            }
            for k in 0..d {
                w[k] -= 0.5 * gw[k] / count;
            }
            b -= 0.5 * gb / count;
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for t in &test {
            for j in 0..t.cells() {
                scores.push(t.feature(j).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
                labels.push(t.labels[j]);
            }
        }
        let a = auc(&scores, &labels);
        assert!(a >= 0.8, "probe AUC {a}");
        assert!(a <= 0.9, "probe AUC {a} far above the 0.85 calibration point");
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let task = generate_task(&c, &mut rng).unwrap();
        let path = dir.path().join("t.json");
        save_task(&task, &path).unwrap();
        let back = load_task(&path).unwrap();
        assert_eq!(back.labels, task.labels);
        assert_eq!(back.features, task.features);
        assert_eq!(back, task);

        std::fs::write(&path, r#"{"format_version":1,"rows":2,"cols":2,"feature_dim":1}"#).unwrap();
        let err = load_task(&path).unwrap_err().to_string();
        assert!(err.contains("missing field `labels`"), "{err}");

        std::fs::write(
            &path,
            r#"{"format_version":1,"rows":2,"cols":2,"feature_dim":1,"labels":[0,1,0],"features":[0,0,0,0]}"#,
        )
        .unwrap();
        assert!(matches!(load_task(&path), Err(VasError::Validation(_))));

        std::fs::write(
            &path,
            r#"{"format_version":2,"rows":1,"cols":1,"feature_dim":1,"labels":[0],"features":[0]}"#,
        )
        .unwrap();
        assert!(matches!(load_task(&path), Err(VasError::VersionMismatch { found: 2, .. })));

        let missing = load_task(dir.path().join("nope.json")).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }

    #[test]
    fn task_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(3, 3);
        let tasks = generate_tasks(&c, 4, 0).unwrap();
        let entries: Vec<(Task, Split)> = tasks
            .into_iter()
            .zip([Split::Train, Split::Train, Split::Test, Split::Ood])
            .collect();
        save_task_set(dir.path(), &entries).unwrap();
        assert_eq!(load_task_set(dir.path(), None).unwrap(), entries);
        let test = load_task_set(dir.path(), Some(Split::Test)).unwrap();
        assert_eq!(test, vec![entries[2].clone()]);
    }
}
