//! Synthetic task families the learned optimizer is meta-trained on.
//!
//! Every task is a pure function of `(family, seed, dims)`. Dataset-backed
//! families (softmax regression, fully connected) share one generator: two
//! unit-variance Gaussian blobs at `±μ` with Bernoulli(½) labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{axpy, check_len, dot, Mat64, RngStream, Vec64};

pub const CLASSES: usize = 2;
pub const FEATURES: usize = 5;
pub const SAMPLES: usize = 512;
pub const FC_HIDDEN: usize = 8;

/// `C × (F + 1)`: one weight row plus bias per class.
pub const SOFTMAX_DIMS: usize = CLASSES * (FEATURES + 1);
/// `H × (F + 1) + C × (H + 1)`.
pub const FC_DIMS: usize = FC_HIDDEN * (FEATURES + 1) + CLASSES * (FC_HIDDEN + 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Quadratic,
    Bowl,
    SoftmaxRegression,
    FullyConnected,
    TwoD,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::Quadratic,
        TaskFamily::Bowl,
        TaskFamily::SoftmaxRegression,
        TaskFamily::FullyConnected,
        TaskFamily::TwoD,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Quadratic => "quadratic",
            TaskFamily::Bowl => "bowl",
            TaskFamily::SoftmaxRegression => "softmax_regression",
            TaskFamily::FullyConnected => "fully_connected",
            TaskFamily::TwoD => "two_d",
        }
    }

    /// Parameter count for families whose shape is fixed.
    pub fn natural_dims(self) -> Option<usize> {
        match self {
            TaskFamily::SoftmaxRegression => Some(SOFTMAX_DIMS),
            TaskFamily::FullyConnected => Some(FC_DIMS),
            TaskFamily::TwoD => Some(2),
            TaskFamily::Quadratic | TaskFamily::Bowl => None,
        }
    }

    pub fn has_dataset(self) -> bool {
        matches!(
            self,
            TaskFamily::SoftmaxRegression | TaskFamily::FullyConnected
        )
    }

    /// Relative per-coordinate cost used by the analytic cost proxy.
    pub fn cost_factor(self) -> f64 {
        match self {
            TaskFamily::FullyConnected => 4.0,
            TaskFamily::SoftmaxRegression => 2.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task family `{s}`")))
    }
}

/// Classic two-dimensional benchmark surfaces with known minima.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwoDFunction {
    Rosenbrock,
    Booth,
    Ackley,
}

impl TwoDFunction {
    pub const CATALOG: [TwoDFunction; 3] = [
        TwoDFunction::Rosenbrock,
        TwoDFunction::Booth,
        TwoDFunction::Ackley,
    ];

    pub fn from_seed(seed: u64) -> Self {
        Self::CATALOG[(seed % Self::CATALOG.len() as u64) as usize]
    }

    pub fn minimizer(self) -> [f64; 2] {
        match self {
            TwoDFunction::Rosenbrock => [1.0, 1.0],
            TwoDFunction::Booth => [1.0, 3.0],
            TwoDFunction::Ackley => [0.0, 0.0],
        }
    }

    pub fn value(self, p: &[f64]) -> f64 {
        let (x, y) = (p[0], p[1]);
        match self {
            TwoDFunction::Rosenbrock => (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2),
            TwoDFunction::Booth => (x + 2.0 * y - 7.0).powi(2) + (2.0 * x + y - 5.0).powi(2),
            TwoDFunction::Ackley => {
                let tau = std::f64::consts::TAU;
                let r = (0.5 * (x * x + y * y)).sqrt();
                let c = 0.5 * ((tau * x).cos() + (tau * y).cos());
                -20.0 * (-0.2 * r).exp() - c.exp() + std::f64::consts::E + 20.0
            }
        }
    }

    pub fn gradient(self, p: &[f64]) -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        match self {
            TwoDFunction::Rosenbrock => {
                let inner = y - x * x;
                [-2.0 * (1.0 - x) - 400.0 * x * inner, 200.0 * inner]
            }
            TwoDFunction::Booth => {
                let a = x + 2.0 * y - 7.0;
                let b = 2.0 * x + y - 5.0;
                [2.0 * a + 4.0 * b, 4.0 * a + 2.0 * b]
            }
            TwoDFunction::Ackley => {
                let tau = std::f64::consts::TAU;
                let r = (0.5 * (x * x + y * y)).sqrt();
                // the radial term is not differentiable at the origin; use its subgradient 0
                let radial = if r > 0.0 {
                    2.0 * (-0.2 * r).exp() / r
                } else {
                    0.0
                };
                let e = (0.5 * ((tau * x).cos() + (tau * y).cos())).exp();
                let pi = std::f64::consts::PI;
                [
                    radial * x + pi * (tau * x).sin() * e,
                    radial * y + pi * (tau * y).sin() * e,
                ]
            }
        }
    }
}

/// Labeled samples for the classification families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Mat64,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn generate(rng: &mut RngStream, samples: usize) -> Self {
        let mu: Vec<f64> = (0..FEATURES).map(|_| rng.uniform_range(0.5, 1.5)).collect();
        let mut data = Vec::with_capacity(samples * FEATURES);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let label = usize::from(rng.uniform() >= 0.5);
            let sign = if label == 0 { 1.0 } else { -1.0 };
            for m in &mu {
                data.push(sign * m + rng.normal());
            }
            labels.push(label);
        }
        Self {
            features: Mat64::from_fn(samples, FEATURES, |r, c| data[r * FEATURES + c]),
            labels,
        }
    }
}

/// Family-specific constants fixed at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskData {
    /// `½‖Aθ − b‖²`
    Quadratic {
        a: Mat64,
        b: Vec64,
    },
    /// `½ θᵀ diag(λ) θ`
    Bowl {
        diag: Vec64,
    },
    SoftmaxRegression {
        data: Dataset,
    },
    FullyConnected {
        data: Dataset,
    },
    TwoD {
        function: TwoDFunction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub family: TaskFamily,
    pub seed: u64,
    pub dims: usize,
    pub data: TaskData,
    pub init_params: Vec64,
}

/// One minibatch. Dataset-free families only ever see [`Batch::Full`],
/// which for dataset-backed families means the whole dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    Full,
    Rows(Vec<usize>),
}

impl Batch {
    pub fn rows(&self) -> Option<&[usize]> {
        match self {
            Batch::Full => None,
            Batch::Rows(r) => Some(r),
        }
    }
}

/// Builds the task instance for `(family, seed, dims)`.
pub fn generate_task(family: TaskFamily, seed: u64, dims: usize) -> Result<Task> {
    if dims == 0 {
        return Err(Error::Dimension {
            expected: 1,
            got: 0,
        });
    }
    if let Some(expected) = family.natural_dims() {
        check_len(expected, dims)?;
    }
    let mut rng = RngStream::derive(seed, &[family.index() as u64]);
    let (data, init_params) = match family {
        TaskFamily::Quadratic => {
            let a = Mat64::from_fn(dims, dims, |_, _| rng.normal());
            let b = rng.normals(dims);
            (TaskData::Quadratic { a, b }, rng.normals(dims))
        }
        TaskFamily::Bowl => {
            let diag = (0..dims).map(|_| rng.uniform_range(0.1, 10.0)).collect();
            (TaskData::Bowl { diag }, rng.normals(dims))
        }
        TaskFamily::SoftmaxRegression => {
            let data = Dataset::generate(&mut rng, SAMPLES);
            let init = (0..dims).map(|_| 0.1 * rng.normal()).collect();
            (TaskData::SoftmaxRegression { data }, init)
        }
        TaskFamily::FullyConnected => {
            let data = Dataset::generate(&mut rng, SAMPLES);
            let mut init = vec![0.0; dims];
            let (w1, _, w2, _) = fc_layout();
            for v in &mut init[w1] {
                *v = rng.normal() / (FEATURES as f64).sqrt();
            }
            for v in &mut init[w2] {
                *v = rng.normal() / (FC_HIDDEN as f64).sqrt();
            }
            (TaskData::FullyConnected { data }, init)
        }
        TaskFamily::TwoD => {
            let function = TwoDFunction::from_seed(seed);
            let init = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
            (TaskData::TwoD { function }, init)
        }
    };
    Ok(Task {
        id: 0,
        family,
        seed,
        dims,
        data,
        init_params,
    })
}

type Span = std::ops::Range<usize>;

/// Class scores of one sample under a parameter vector.
type Scorer = fn(&[f64], &[f64]) -> [f64; CLASSES];

fn fc_layout() -> (Span, Span, Span, Span) {
    let w1 = 0..FC_HIDDEN * FEATURES;
    let b1 = w1.end..w1.end + FC_HIDDEN;
    let w2 = b1.end..b1.end + CLASSES * FC_HIDDEN;
    let b2 = w2.end..w2.end + CLASSES;
    (w1, b1, w2, b2)
}

impl Task {
    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn with_init(mut self, init: Vec64) -> Result<Self> {
        check_len(self.dims, init.len())?;
        self.init_params = init;
        Ok(self)
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        match &self.data {
            TaskData::SoftmaxRegression { data } | TaskData::FullyConnected { data } => Some(data),
            _ => None,
        }
    }

    /// Loss and analytic gradient in one pass.
    pub fn loss_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec64)> {
        check_len(self.dims, params.len())?;
        match &self.data {
            TaskData::Quadratic { a, b } => {
                no_rows(self.family, batch)?;
                let mut resid = a.matvec(params)?;
                for (r, bi) in resid.iter_mut().zip(b) {
                    *r -= bi;
                }
                Ok((0.5 * dot(&resid, &resid), a.matvec_t(&resid)?))
            }
            TaskData::Bowl { diag } => {
                no_rows(self.family, batch)?;
                let grad: Vec64 = diag.iter().zip(params).map(|(l, t)| l * t).collect();
                Ok((0.5 * dot(&grad, params), grad))
            }
            TaskData::TwoD { function } => {
                no_rows(self.family, batch)?;
                Ok((function.value(params), function.gradient(params).to_vec()))
            }
            TaskData::SoftmaxRegression { data } => {
                classify_loss_grad(data, batch, params, softmax_forward_backward)
            }
            TaskData::FullyConnected { data } => {
                classify_loss_grad(data, batch, params, fc_forward_backward)
            }
        }
    }

    pub fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        self.loss_grad(params, batch).map(|(l, _)| l)
    }

    pub fn grad(&self, params: &[f64], batch: &Batch) -> Result<Vec64> {
        self.loss_grad(params, batch).map(|(_, g)| g)
    }

    /// Loss over the whole objective (entire dataset where there is one).
    pub fn full_loss(&self, params: &[f64]) -> Result<f64> {
        self.loss(params, &Batch::Full)
    }

    /// Fraction of dataset samples classified correctly; ties go to the
    /// lowest class index.
    pub fn accuracy(&self, params: &[f64]) -> Result<f64> {
        check_len(self.dims, params.len())?;
        let (data, scorer): (&Dataset, Scorer) = match &self.data {
            TaskData::SoftmaxRegression { data } => (data, softmax_logits),
            TaskData::FullyConnected { data } => (data, fc_logits),
            _ => {
                return Err(Error::Unsupported(format!(
                    "accuracy is undefined for the {} family",
                    self.family
                )))
            }
        };
        let correct = (0..data.len())
            .filter(|&i| argmax(&scorer(params, data.features.row(i))) == data.labels[i])
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

fn no_rows(family: TaskFamily, batch: &Batch) -> Result<()> {
    match batch {
        Batch::Full => Ok(()),
        Batch::Rows(_) => Err(Error::Unsupported(format!(
            "the {family} family has no dataset to batch"
        ))),
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-sample cross-entropy; accumulates `d loss / d params` into `grad`.
type SampleFn = fn(&[f64], &[f64], usize, &mut [f64]) -> f64;

fn classify_loss_grad(
    data: &Dataset,
    batch: &Batch,
    params: &[f64],
    sample: SampleFn,
) -> Result<(f64, Vec64)> {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let count = match batch {
        Batch::Full => {
            for i in 0..data.len() {
                loss += sample(params, data.features.row(i), data.labels[i], &mut grad);
            }
            data.len()
        }
        Batch::Rows(rows) => {
            if rows.is_empty() {
                return Err(Error::EmptyInput("batch has no rows"));
            }
            for &i in rows {
                if i >= data.len() {
                    return Err(Error::Capacity(format!(
                        "row {i} out of range for dataset of {}",
                        data.len()
                    )));
                }
                loss += sample(params, data.features.row(i), data.labels[i], &mut grad);
            }
            rows.len()
        }
    };
    let scale = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Cross-entropy of `logits` against `label`; writes `softmax − onehot` into `dz`.
fn cross_entropy(logits: &[f64; CLASSES], label: usize, dz: &mut [f64; CLASSES]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_norm = max + sum.ln();
    for c in 0..CLASSES {
        dz[c] = (logits[c] - log_norm).exp() - if c == label { 1.0 } else { 0.0 };
    }
    log_norm - logits[label]
}

fn softmax_logits(params: &[f64], x: &[f64]) -> [f64; CLASSES] {
    let mut z = [0.0; CLASSES];
    for (c, zc) in z.iter_mut().enumerate() {
        let row = &params[c * (FEATURES + 1)..(c + 1) * (FEATURES + 1)];
        *zc = dot(&row[..FEATURES], x) + row[FEATURES];
    }
    z
}

fn softmax_forward_backward(params: &[f64], x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let z = softmax_logits(params, x);
    let mut dz = [0.0; CLASSES];
    let loss = cross_entropy(&z, label, &mut dz);
    for (c, d) in dz.iter().enumerate() {
        let row = &mut grad[c * (FEATURES + 1)..(c + 1) * (FEATURES + 1)];
        axpy(*d, x, &mut row[..FEATURES]);
        row[FEATURES] += d;
    }
    loss
}

fn fc_hidden(params: &[f64], x: &[f64]) -> [f64; FC_HIDDEN] {
    let (w1, b1, _, _) = fc_layout();
    let (w1, b1) = (&params[w1], &params[b1]);
    let mut h = [0.0; FC_HIDDEN];
    for (j, hj) in h.iter_mut().enumerate() {
        *hj = (dot(&w1[j * FEATURES..(j + 1) * FEATURES], x) + b1[j]).tanh();
    }
    h
}

fn fc_output(params: &[f64], h: &[f64; FC_HIDDEN]) -> [f64; CLASSES] {
    let (_, _, w2, b2) = fc_layout();
    let (w2, b2) = (&params[w2], &params[b2]);
    let mut z = [0.0; CLASSES];
    for (c, zc) in z.iter_mut().enumerate() {
        *zc = dot(&w2[c * FC_HIDDEN..(c + 1) * FC_HIDDEN], h) + b2[c];
    }
    z
}

fn fc_logits(params: &[f64], x: &[f64]) -> [f64; CLASSES] {
    fc_output(params, &fc_hidden(params, x))
}

fn fc_forward_backward(params: &[f64], x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let (w1s, b1s, w2s, b2s) = fc_layout();
    let h = fc_hidden(params, x);
    let z = fc_output(params, &h);
    let mut dz = [0.0; CLASSES];
    let loss = cross_entropy(&z, label, &mut dz);

    let w2 = &params[w2s.clone()];
    let mut dh = [0.0; FC_HIDDEN];
    for (c, d) in dz.iter().enumerate() {
        axpy(*d, &w2[c * FC_HIDDEN..(c + 1) * FC_HIDDEN], &mut dh);
        axpy(
            *d,
            &h,
            &mut grad[w2s.start + c * FC_HIDDEN..w2s.start + (c + 1) * FC_HIDDEN],
        );
        grad[b2s.start + c] += d;
    }
    for j in 0..FC_HIDDEN {
        let da = dh[j] * (1.0 - h[j] * h[j]);
        axpy(
            da,
            x,
            &mut grad[w1s.start + j * FEATURES..w1s.start + (j + 1) * FEATURES],
        );
        grad[b1s.start + j] += da;
    }
    loss
}

/// Draws `count` disjoint minibatches of `batch_size` rows (one epoch
/// permutation). Dataset-free families get `count` full batches.
pub fn batches(
    task: &Task,
    rng: &mut RngStream,
    batch_size: usize,
    count: usize,
) -> Result<Vec<Batch>> {
    let Some(data) = task.dataset() else {
        return Ok(vec![Batch::Full; count]);
    };
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if batch_size * count > data.len() {
        return Err(Error::Capacity(format!(
            "{count} batches of {batch_size} rows exceed the {} samples of task {}",
            data.len(),
            task.id
        )));
    }
    let perm = rng.permutation(data.len());
    Ok(perm
        .chunks_exact(batch_size)
        .take(count)
        .map(|rows| Batch::Rows(rows.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn quadratic(a: Mat64, b: Vec64) -> Task {
        let dims = b.len();
        Task {
            id: 0,
            family: TaskFamily::Quadratic,
            seed: 0,
            dims,
            data: TaskData::Quadratic { a, b },
            init_params: vec![0.0; dims],
        }
    }

    fn bowl(diag: Vec64) -> Task {
        let dims = diag.len();
        Task {
            id: 0,
            family: TaskFamily::Bowl,
            seed: 0,
            dims,
            data: TaskData::Bowl { diag },
            init_params: vec![0.0; dims],
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(TaskFamily::Quadratic, 7, 4).unwrap();
        let b = generate_task(TaskFamily::Quadratic, 7, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_task(TaskFamily::Quadratic, 8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn softmax_labels_balanced_seed_1() {
        let t = generate_task(TaskFamily::SoftmaxRegression, 1, SOFTMAX_DIMS).unwrap();
        let data = t.dataset().unwrap();
        let zeros = data.labels.iter().filter(|&&l| l == 0).count();
        let frac = zeros as f64 / data.len() as f64;
        assert_eq!(data.len(), 512);
        assert!((0.45..=0.55).contains(&frac), "class-0 fraction {frac}");
    }

    #[test]
    fn two_d_requires_two_dims() {
        assert!(matches!(
            generate_task(TaskFamily::TwoD, 3, 3),
            Err(Error::Dimension {
                expected: 2,
                got: 3
            })
        ));
        assert!(generate_task(TaskFamily::SoftmaxRegression, 1, 4).is_err());
        assert!(generate_task(TaskFamily::Bowl, 1, 0).is_err());
    }

    #[test]
    fn two_d_seed_3_is_rosenbrock_with_zero_minimum() {
        let t = generate_task(TaskFamily::TwoD, 3, 2).unwrap();
        assert_eq!(
            t.data,
            TaskData::TwoD {
                function: TwoDFunction::Rosenbrock
            }
        );
        assert_eq!(t.full_loss(&[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn two_d_catalog_minima() {
        for f in TwoDFunction::CATALOG {
            let m = f.minimizer();
            assert!(f.value(&m).abs() < 1e-12, "{f:?}");
            let g = f.gradient(&m);
            assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn quadratic_identity_examples() {
        let t = quadratic(Mat64::identity(2), vec![1.0, 2.0]);
        assert_eq!(t.grad(&[0.0, 0.0], &Batch::Full).unwrap(), vec![-1.0, -2.0]);
        assert_eq!(t.full_loss(&[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn bowl_examples() {
        let t = bowl(vec![1.0, 2.0]);
        assert_eq!(t.full_loss(&[2.0, 1.0]).unwrap(), 3.0);
        assert_eq!(t.grad(&[2.0, 1.0], &Batch::Full).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn softmax_zero_weights_loss_is_ln2() {
        let t = generate_task(TaskFamily::SoftmaxRegression, 4, SOFTMAX_DIMS).unwrap();
        let l = t.full_loss(&[0.0; SOFTMAX_DIMS]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_accuracy_is_class0_fraction() {
        let t = generate_task(TaskFamily::SoftmaxRegression, 1, SOFTMAX_DIMS).unwrap();
        let data = t.dataset().unwrap();
        let frac0 = data.labels.iter().filter(|&&l| l == 0).count() as f64 / data.len() as f64;
        assert_eq!(t.accuracy(&[0.0; SOFTMAX_DIMS]).unwrap(), frac0);
    }

    #[test]
    fn separating_weights_reach_full_accuracy() {
        // labels determined by the sign of feature 0
        let features = Mat64::from_vec(
            4,
            FEATURES,
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -3.0,
                0.0, 1.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let task = Task {
            id: 0,
            family: TaskFamily::SoftmaxRegression,
            seed: 0,
            dims: SOFTMAX_DIMS,
            data: TaskData::SoftmaxRegression {
                data: Dataset {
                    features,
                    labels: vec![0, 0, 1, 1],
                },
            },
            init_params: vec![0.0; SOFTMAX_DIMS],
        };
        let mut w = vec![0.0; SOFTMAX_DIMS];
        w[0] = 1.0;
        w[FEATURES + 1] = -1.0;
        assert_eq!(task.accuracy(&w).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_unsupported_for_regression_families() {
        let t = generate_task(TaskFamily::Quadratic, 1, 3).unwrap();
        assert!(matches!(t.accuracy(&[0.0; 3]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let t = generate_task(TaskFamily::Bowl, 1, 3).unwrap();
        assert!(matches!(
            t.full_loss(&[0.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dataset_free_batches_are_full() {
        let t = generate_task(TaskFamily::Quadratic, 1, 3).unwrap();
        let b = batches(&t, &mut RngStream::new(0), 8, 5).unwrap();
        assert_eq!(b, vec![Batch::Full; 5]);
        assert!(t.loss(&t.init_params, &Batch::Rows(vec![0])).is_err());
    }

    #[test]
    fn batch_draws_deterministic_and_disjoint() {
        let t = generate_task(TaskFamily::SoftmaxRegression, 2, SOFTMAX_DIMS).unwrap();
        let a = batches(&t, &mut RngStream::new(11), 32, 4).unwrap();
        let b = batches(&t, &mut RngStream::new(11), 32, 4).unwrap();
        assert_eq!(a, b);
        let union: HashSet<usize> = a
            .iter()
            .flat_map(|b| b.rows().unwrap().iter().copied())
            .collect();
        assert_eq!(union.len(), 128);
    }

    #[test]
    fn oversubscribed_batches_rejected() {
        let t = generate_task(TaskFamily::FullyConnected, 2, FC_DIMS).unwrap();
        assert!(matches!(
            batches(&t, &mut RngStream::new(0), 128, 5),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn family_names_round_trip() {
        for f in TaskFamily::ALL {
            assert_eq!(f.name().parse::<TaskFamily>().unwrap(), f);
        }
        assert!("cnn".parse::<TaskFamily>().is_err());
    }
}
