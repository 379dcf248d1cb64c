//! Soft-margin kernel SVM trained by sequential minimal optimization.
//!
//! The dual is maximized as
//! W(α) = Σα_i − ½ Σ_ij α_i α_j y_i y_j K(x_i, x_j), 0 ≤ α_i ≤ C, Σ α_i y_i = 0,
//! using maximal-violating-pair selection with second-order working-set
//! choice. Kernel rows are computed on demand and kept in a bounded cache,
//! so training sets of a few ten-thousand samples stay within memory.

use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::ClassifierError;
use crate::state::IonState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        match self {
            KernelSpec::Rbf { gamma } if !(*gamma > 0.0 && gamma.is_finite()) => Err(
                ClassifierError::InvalidParameter(format!("rbf gamma must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64, ClassifierError> {
    if x.len() != y.len() {
        return Err(ClassifierError::DimensionMismatch(x.len(), y.len()));
    }
    Ok(spec.eval_unchecked(x, y))
}

pub fn kernel_matrix(spec: &KernelSpec, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    xs.iter()
        .map(|a| xs.iter().map(|b| spec.eval_unchecked(a, b)).collect())
        .collect()
}

/// `1 / (n_features · variance of all feature entries)`; 1 when the data is constant.
pub fn default_gamma(features: &[Vec<f64>]) -> f64 {
    let d = features.first().map(|f| f.len()).unwrap_or(0);
    let n = (features.len() * d) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let mean = features.iter().flatten().sum::<f64>() / n;
    let var = features.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

/// Trained classifier; only samples with α > 0 are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: KernelSpec,
    pub c: f64,
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub labels: Vec<f64>,
    pub bias: f64,
}

impl SvmModel {
    pub fn n_support(&self) -> usize {
        self.alphas.len()
    }
}

/// Σ α_i y_i K(x_i, x) + b.
pub fn decision_value(model: &SvmModel, x: &[f64]) -> f64 {
    model
        .support_vectors
        .iter()
        .zip(model.alphas.iter().zip(&model.labels))
        .map(|(sv, (a, y))| a * y * model.kernel.eval_unchecked(sv, x))
        .sum::<f64>()
        + model.bias
}

/// Negative side → bright (class −1); positive or zero → dark (class +1).
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> IonState {
    if decision_value(model, x) < 0.0 {
        IonState::Bright
    } else {
        IonState::Dark
    }
}

/// W(α) evaluated directly from a kernel matrix.
pub fn dual_objective(alphas: &[f64], labels: &[f64], kernel: &[Vec<f64>]) -> f64 {
    let mut quad = 0.0;
    for i in 0..alphas.len() {
        for j in 0..alphas.len() {
            quad += alphas[i] * alphas[j] * labels[i] * labels[j] * kernel[i][j];
        }
    }
    alphas.iter().sum::<f64>() - 0.5 * quad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub kernel: KernelSpec,
    pub c: f64,
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep W(α) after every pair update in [`SvmTraining::objective_history`].
    pub record_history: bool,
    pub cache_bytes: usize,
}

impl SvmParams {
    pub fn new(kernel: KernelSpec) -> Self {
        Self {
            kernel,
            c: 10.0,
            tol: 1e-4,
            max_iter: 10_000_000,
            record_history: false,
            cache_bytes: 128 << 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvmTraining {
    pub model: SvmModel,
    /// Full α vector over the training set.
    pub alphas: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub objective_history: Vec<f64>,
}

struct RowCache<'a> {
    xs: &'a [Vec<f64>],
    kernel: KernelSpec,
    rows: HashMap<usize, Rc<Vec<f64>>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> RowCache<'a> {
    fn new(xs: &'a [Vec<f64>], kernel: KernelSpec, bytes: usize) -> Self {
        let per_row = (xs.len() * 8).max(1);
        Self {
            xs,
            kernel,
            rows: HashMap::new(),
            order: VecDeque::new(),
            capacity: (bytes / per_row).clamp(2, xs.len().max(2)),
        }
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        if let Some(r) = self.rows.get(&i) {
            return Rc::clone(r);
        }
        if self.rows.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.rows.remove(&old);
            }
        }
        let xi = &self.xs[i];
        let r = Rc::new(self.xs.iter().map(|x| self.kernel.eval_unchecked(xi, x)).collect::<Vec<_>>());
        self.rows.insert(i, Rc::clone(&r));
        self.order.push_back(i);
        r
    }
}

const TAU: f64 = 1e-12;

pub fn svm_train(
    features: &[Vec<f64>],
    labels: &[f64],
    params: &SvmParams,
) -> Result<SvmTraining, ClassifierError> {
    let l = features.len();
    if l == 0 {
        return Err(ClassifierError::Empty);
    }
    if labels.len() != l {
        return Err(ClassifierError::DimensionMismatch(l, labels.len()));
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(ClassifierError::DimensionMismatch(dim, f.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(ClassifierError::InvalidLabel(bad));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(ClassifierError::SingleClass);
    }
    params.kernel.validate()?;
    if !(params.c > 0.0) {
        return Err(ClassifierError::InvalidParameter("C must be positive".into()));
    }
    let c = params.c;
    let y = labels;
    let diag: Vec<f64> = features.iter().map(|x| params.kernel.eval_unchecked(x, x)).collect();
    let mut cache = RowCache::new(features, params.kernel, params.cache_bytes);

    let mut alpha = vec![0.0; l];
    // G = Qα − e with Q_ij = y_i y_j K_ij
    let mut grad = vec![-1.0; l];
    let mut objective = 0.0; // W(0)
    let mut history = Vec::new();
    if params.record_history {
        history.push(objective);
    }
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    loop {
        // working set: i maximizes −y G over I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            if up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        if i != usize::MAX {
            let ki = cache.row(i);
            let mut best = f64::INFINITY;
            for t in 0..l {
                if low(alpha[t], y[t]) {
                    let v = -y[t] * grad[t];
                    gmin = gmin.min(v);
                    let b = gmax - v;
                    if b > 0.0 {
                        let mut a = diag[i] + diag[t] - 2.0 * ki[t];
                        if a <= 0.0 {
                            a = TAU;
                        }
                        let score = -(b * b) / a;
                        if score < best {
                            best = score;
                            j = t;
                        }
                    }
                }
            }
        }
        let violation = gmax - gmin;
        if i == usize::MAX || j == usize::MAX || violation < params.tol {
            break;
        }
        if iterations >= params.max_iter {
            return Err(ClassifierError::NonConvergence {
                iterations,
                violation,
            });
        }
        iterations += 1;

        let ki = cache.row(i);
        let kj = cache.row(j);
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let kij = ki[j];
        let mut quad = diag[i] + diag[j] - 2.0 * kij;
        if quad <= 0.0 {
            quad = TAU;
        }
        let (mut ai, mut aj);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai_old - aj_old;
            ai = ai_old + delta;
            aj = aj_old + delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai_old + aj_old;
            ai = ai_old - delta;
            aj = aj_old + delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        let (di, dj) = (ai - ai_old, aj - aj_old);
        // exact change of f = −W for the two-coordinate move, using G before update
        let qij = y[i] * y[j] * kij;
        let df = grad[i] * di + grad[j] * dj + 0.5 * (diag[i] * di * di + diag[j] * dj * dj) + qij * di * dj;
        objective -= df;
        if params.record_history {
            history.push(objective);
        }
        alpha[i] = ai;
        alpha[j] = aj;
        for t in 0..l {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    // bias: mean over free vectors of y_i − Σ_j α_j y_j K_ij = −y_i G_i
    let (mut sum, mut n_free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..l {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else {
            n_free += 1;
            sum += yg;
        }
    }
    let rho = if n_free > 0 {
        sum / n_free as f64
    } else {
        0.5 * (ub + lb)
    };

    let final_objective = -0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>();
    let keep: Vec<usize> = (0..l).filter(|&t| alpha[t] > 0.0).collect();
    let model = SvmModel {
        kernel: params.kernel,
        c,
        support_vectors: keep.iter().map(|&t| features[t].clone()).collect(),
        alphas: keep.iter().map(|&t| alpha[t]).collect(),
        labels: keep.iter().map(|&t| y[t]).collect(),
        bias: -rho,
    };
    Ok(SvmTraining {
        model,
        alphas: alpha,
        iterations,
        objective: final_objective,
        objective_history: history,
    })
}
