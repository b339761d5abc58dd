//! Batch gradient descent for linear models.
//!
//! The objective is the summed per-record loss `sum l(<x, w>, y)` and each
//! iteration takes the step `w <- w - eta * sum grad l`. There is no `1/|D|`
//! factor, so `eta` has to shrink as the dataset grows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggtree::Combiner;
use crate::engine::{LoopProgram, LoopState, MapReduce, ProgramError, Sequential, Step};

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("feature {position}: index {index} is not greater than previous index {prev}")]
    Unsorted {
        position: usize,
        prev: u32,
        index: u32,
    },
    #[error("feature {position}: duplicate index {index}")]
    Duplicate { position: usize, index: u32 },
    #[error("feature {position}: value is not finite")]
    NonFiniteValue { position: usize },
    #[error("label is not finite")]
    NonFiniteLabel,
}

#[derive(Debug, Error, PartialEq)]
pub enum BgdError {
    #[error("feature index {index} is outside model dimension {dim}")]
    Dimension { index: u32, dim: usize },
    #[error("logistic loss needs a label of -1 or +1, got {0}")]
    LogisticLabel(f64),
    #[error("statistic dimension {got} does not match model dimension {expected}")]
    StatisticDimension { expected: usize, got: usize },
    #[error("step size must be > 0, got {0}")]
    StepSize(f64),
    #[error("invalid stopping rule: {0}")]
    Stop(String),
    #[error("model dimension must be >= 1")]
    ZeroDimension,
    #[error(transparent)]
    Program(#[from] ProgramError),
}

/// One training record: a label and a sparse feature vector with strictly
/// increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    label: f64,
    features: Vec<(u32, f64)>,
}

impl SparseExample {
    pub fn new(label: f64, features: Vec<(u32, f64)>) -> Result<Self, RecordError> {
        if !label.is_finite() {
            return Err(RecordError::NonFiniteLabel);
        }
        for (position, &(index, value)) in features.iter().enumerate() {
            if !value.is_finite() {
                return Err(RecordError::NonFiniteValue { position });
            }
            if position > 0 {
                let prev = features[position - 1].0;
                if index == prev {
                    return Err(RecordError::Duplicate { position, index });
                }
                if index < prev {
                    return Err(RecordError::Unsorted {
                        position,
                        prev,
                        index,
                    });
                }
            }
        }
        Ok(SparseExample { label, features })
    }

    pub fn label(&self) -> f64 {
        self.label
    }

    pub fn features(&self) -> &[(u32, f64)] {
        &self.features
    }

    pub fn nnz(&self) -> usize {
        self.features.len()
    }

    /// Largest feature index, if any.
    pub fn max_index(&self) -> Option<u32> {
        self.features.last().map(|&(i, _)| i)
    }

    fn check_dim(&self, dim: usize) -> Result<(), BgdError> {
        match self.max_index() {
            Some(index) if index as usize >= dim => Err(BgdError::Dimension { index, dim }),
            _ => Ok(()),
        }
    }

    fn dot(&self, w: &[f64]) -> f64 {
        self.features.iter().map(|&(i, v)| w[i as usize] * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    pub w: Vec<f64>,
    pub eta: f64,
}

impl ModelVector {
    pub fn zeros(dim: usize, eta: f64) -> Self {
        ModelVector {
            w: vec![0.0; dim],
            eta,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Model store layout: dimension (u64 LE), iteration (u64 LE), then the
    /// components as f64 LE.
    pub fn to_store_bytes(&self, iteration: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.w.len());
        out.extend_from_slice(&(self.w.len() as u64).to_le_bytes());
        out.extend_from_slice(&iteration.to_le_bytes());
        for x in &self.w {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_store_bytes`](Self::to_store_bytes): `(weights, iteration)`.
    pub fn from_store_bytes(bytes: &[u8]) -> Option<(Vec<f64>, u64)> {
        let word = |i: usize| -> Option<[u8; 8]> { bytes.get(i * 8..i * 8 + 8)?.try_into().ok() };
        let dim = u64::from_le_bytes(word(0)?) as usize;
        let iteration = u64::from_le_bytes(word(1)?);
        if bytes.len() != 16 + 8 * dim {
            return None;
        }
        let w = (0..dim)
            .map(|i| word(2 + i).map(f64::from_le_bytes))
            .collect::<Option<Vec<_>>>()?;
        Some((w, iteration))
    }
}

/// Summed gradient, summed loss and record count over some set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStatistic {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub count: u64,
}

impl GradientStatistic {
    pub fn zeros(dim: usize) -> Self {
        GradientStatistic {
            grad: vec![0.0; dim],
            loss: 0.0,
            count: 0,
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Componentwise sum of gradient statistics.
#[derive(Debug, Clone, Copy)]
pub struct GradientSum {
    pub dim: usize,
}

impl Combiner<GradientStatistic> for GradientSum {
    fn identity(&self) -> GradientStatistic {
        GradientStatistic::zeros(self.dim)
    }

    fn combine(&self, acc: &mut GradientStatistic, item: GradientStatistic) {
        for (a, b) in acc.grad.iter_mut().zip(&item.grad) {
            *a += b;
        }
        acc.loss += item.loss;
        acc.count += item.count;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `1/2 (<x,w> - y)^2`
    Squared,
    /// `ln(1 + exp(-y <x,w>))` with `y` in `{-1, +1}`
    Logistic,
}

impl LossKind {
    /// Loss and its derivative with respect to the prediction.
    pub fn eval(&self, prediction: f64, label: f64) -> (f64, f64) {
        match self {
            LossKind::Squared => {
                let r = prediction - label;
                (0.5 * r * r, r)
            }
            LossKind::Logistic => {
                let z = -label * prediction;
                (softplus(z), -label * sigmoid(z))
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Add one record's loss and gradient into `acc` without allocating.
pub fn accumulate_gradient(
    acc: &mut GradientStatistic,
    example: &SparseExample,
    model: &ModelVector,
    loss: LossKind,
) -> Result<(), BgdError> {
    example.check_dim(model.dim())?;
    if acc.grad.len() != model.dim() {
        return Err(BgdError::StatisticDimension {
            expected: model.dim(),
            got: acc.grad.len(),
        });
    }
    if loss == LossKind::Logistic && example.label != 1.0 && example.label != -1.0 {
        return Err(BgdError::LogisticLabel(example.label));
    }
    let (l, dl) = loss.eval(example.dot(&model.w), example.label);
    for &(i, v) in &example.features {
        acc.grad[i as usize] += dl * v;
    }
    acc.loss += l;
    acc.count += 1;
    Ok(())
}

pub fn record_gradient(
    example: &SparseExample,
    model: &ModelVector,
    loss: LossKind,
) -> Result<GradientStatistic, BgdError> {
    let mut stat = GradientStatistic::zeros(model.dim());
    accumulate_gradient(&mut stat, example, model, loss)?;
    Ok(stat)
}

/// `w - eta * grad`.
pub fn apply_update(
    model: &ModelVector,
    stat: &GradientStatistic,
) -> Result<ModelVector, BgdError> {
    if stat.grad.len() != model.dim() {
        return Err(BgdError::StatisticDimension {
            expected: model.dim(),
            got: stat.grad.len(),
        });
    }
    let w = model
        .w
        .iter()
        .zip(&stat.grad)
        .map(|(w, g)| w - model.eta * g)
        .collect();
    Ok(ModelVector { w, eta: model.eta })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// Run exactly `k` iterations.
    MaxIter(u64),
    /// Stop once the summed gradient norm drops below `eps`.
    GradNorm(f64),
    /// Whichever of the two comes first.
    GradNormOrMaxIter(f64, u64),
}

impl Stop {
    fn validate(&self) -> Result<(), BgdError> {
        let bad_k = |k: u64| k == 0;
        let bad_eps = |e: f64| !(e > 0.0 && e.is_finite());
        match *self {
            Stop::MaxIter(k) if bad_k(k) => Err(BgdError::Stop("MaxIter needs k >= 1".into())),
            Stop::GradNorm(e) if bad_eps(e) => Err(BgdError::Stop("GradNorm needs eps > 0".into())),
            Stop::GradNormOrMaxIter(e, k) if bad_eps(e) || bad_k(k) => {
                Err(BgdError::Stop("needs eps > 0 and k >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// `true` to run another iteration.
    pub fn should_continue(&self, state: &LoopState<'_, ModelVector, GradientStatistic>) -> bool {
        let small_grad = |eps: f64| state.outputs.last().is_some_and(|s| s.grad_norm() < eps);
        match *self {
            Stop::MaxIter(k) => state.iteration < k,
            Stop::GradNorm(eps) => !small_grad(eps),
            Stop::GradNormOrMaxIter(eps, k) => state.iteration < k && !small_grad(eps),
        }
    }
}

/// Loop program: map = per-record gradient, reduce = [`GradientSum`],
/// sequential = [`apply_update`], condition = `stop`. Starts from `w = 0`.
pub fn bgd_program(
    loss: LossKind,
    eta: f64,
    stop: Stop,
    dim: usize,
) -> Result<LoopProgram<ModelVector, GradientStatistic>, BgdError> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(BgdError::StepSize(eta));
    }
    if dim == 0 {
        return Err(BgdError::ZeroDimension);
    }
    stop.validate()?;
    let map = MapReduce::new(
        "gradient",
        GradientSum { dim },
        move |model: &ModelVector, ex: &SparseExample, acc: &mut GradientStatistic| {
            accumulate_gradient(acc, ex, model, loss).map_err(|e| e.to_string())
        },
    );
    let update = Sequential::new("update", |model: &ModelVector, stat: &GradientStatistic| {
        apply_update(model, stat).map_err(|e| e.to_string())
    });
    Ok(LoopProgram::new(
        move || ModelVector::zeros(dim, eta),
        vec![Step::MapReduce(map), Step::Sequential(update)],
        move |state| stop.should_continue(state),
    )?)
}

/// Seeded synthetic dataset: `n` records with up to `nnz` features each,
/// values in `[-1, 1]`, labelled by a hidden weight vector. Squared-loss
/// labels are the clean linear response; logistic labels are its sign.
pub fn synthetic_dataset(
    n: usize,
    dim: usize,
    nnz: usize,
    seed: u64,
    loss: LossKind,
) -> Vec<SparseExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let all: Vec<u32> = (0..dim as u32).collect();
    (0..n)
        .map(|_| {
            let mut idx: Vec<u32> = all
                .choose_multiple(&mut rng, nnz.min(dim))
                .copied()
                .collect();
            idx.sort_unstable();
            let features: Vec<(u32, f64)> = idx
                .into_iter()
                .map(|i| (i, rng.gen_range(-1.0..1.0)))
                .collect();
            let response: f64 = features.iter().map(|&(i, v)| hidden[i as usize] * v).sum();
            let label = match loss {
                LossKind::Squared => response,
                LossKind::Logistic if response >= 0.0 => 1.0,
                LossKind::Logistic => -1.0,
            };
            SparseExample { label, features }
        })
        .collect()
}
