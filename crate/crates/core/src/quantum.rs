//! QUBO-based classifiers: the per-ion "Quant" rule and an SVM whose dual
//! variables are binary-encoded and found by a QUBO solver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{calibrate_cut, default_gamma, kernel_matrix, ClassifierError, KernelSpec, Orientation, SvmModel};
use crate::qubo::{QuboError, QuboProblem, Sense, SolverConfig};
use crate::state::IonState;

#[derive(Debug, Error)]
pub enum QuantumError {
    #[error("intensity {0} outside [0, 255]")]
    InvalidIntensity(f64),
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),
    #[error("no support vectors")]
    NoSupportVectors,
    #[error(transparent)]
    Qubo(#[from] QuboError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

pub const DEFAULT_EPSILON: f64 = 152.8;

fn check_intensity(v: f64) -> Result<(), QuantumError> {
    if (0.0..=255.0).contains(&v) {
        Ok(())
    } else {
        Err(QuantumError::InvalidIntensity(v))
    }
}

/// Two-variable maximization problem for one ion of intensity `sigma`:
/// `Q₁₁ = σ`, `Q₂₂ = −ε`, `Q₂₁ = (σ+ε)/2`.
///
/// The values over `x = 00, 01, 10, 11` are `0, −ε, σ, (3σ−ε)/2`, so the
/// maximizer is `11` iff `σ > ε` and `10` otherwise.
pub fn quant_qubo(sigma: f64, epsilon: f64) -> Result<QuboProblem, QuantumError> {
    check_intensity(sigma)?;
    check_intensity(epsilon)?;
    let mut q = QuboProblem::new(2, Sense::Maximize);
    q.set(0, 0, sigma)?;
    q.set(1, 1, -epsilon)?;
    q.set(1, 0, (sigma + epsilon) / 2.0)?;
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub epsilon: f64,
    pub solver: SolverConfig,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            solver: SolverConfig::Exhaustive,
        }
    }
}

/// Bright iff the solver returns `x = 11`. With the exhaustive solver a
/// tie `σ = ε` resolves to `10`, i.e. dark.
pub fn quant_classify(sigma: f64, config: &QuantConfig, seed: u64) -> Result<IonState, QuantumError> {
    let q = quant_qubo(sigma, config.epsilon)?;
    let sol = config.solver.solve(&q, seed)?;
    Ok(if sol.x == [1, 1] {
        IonState::Bright
    } else {
        IonState::Dark
    })
}

/// Independent per-ion problems; ion `i` uses solver seed `seed + i`.
pub fn quant_classify_chain(sigmas: &[f64], config: &QuantConfig, seed: u64) -> Result<Vec<IonState>, QuantumError> {
    sigmas
        .par_iter()
        .enumerate()
        .map(|(i, &s)| quant_classify(s, config, seed.wrapping_add(i as u64)))
        .collect()
}

/// F1-optimal ε from labeled `(intensity, state)` pairs.
pub fn calibrate_epsilon(samples: &[(f64, IonState)]) -> Result<f64, QuantumError> {
    Ok(calibrate_cut(samples, Orientation::HighIsBright)?.0)
}

/// Coefficients of the Quant matrix in the Pauli basis.
///
/// `c_proj·(I − σᶻ) + c_x·σˣ` alone leaves `σ·σᶻ` unaccounted for, so the
/// residual z coefficient is returned as well.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantDecomposition {
    pub c_proj: f64,
    pub c_x: f64,
    pub c_z_residual: f64,
}

impl QuantDecomposition {
    /// `c_proj·(I − σᶻ) + c_x·σˣ + c_z_residual·σᶻ` as a dense matrix.
    pub fn reconstruct(&self) -> [[f64; 2]; 2] {
        let mut m = self.two_term();
        m[0][0] += self.c_z_residual;
        m[1][1] -= self.c_z_residual;
        m
    }

    /// `c_proj·(I − σᶻ) + c_x·σˣ` only.
    pub fn two_term(&self) -> [[f64; 2]; 2] {
        [[0.0, self.c_x], [self.c_x, 2.0 * self.c_proj]]
    }
}

/// Symmetric 2×2 form of the Quant matrix, off-diagonal split evenly.
pub fn quant_matrix(sigma: f64, epsilon: f64) -> [[f64; 2]; 2] {
    let off = (sigma + epsilon) / 2.0;
    [[sigma, off], [off, -epsilon]]
}

pub fn quant_decompose(sigma: f64, epsilon: f64) -> QuantDecomposition {
    QuantDecomposition {
        c_proj: (sigma - epsilon) / 2.0,
        c_x: (sigma + epsilon) / 2.0,
        c_z_residual: sigma,
    }
}

/// Binary encoding `α = Σ_k B^k a_k` of each dual variable, with the
/// equality constraint `Σ α_i y_i = 0` folded in as a quadratic penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QsvmEncoding {
    pub bits: usize,
    pub base: f64,
    pub penalty: f64,
    /// `None` selects an RBF kernel with [`default_gamma`] of the training features.
    pub kernel: Option<KernelSpec>,
}

impl Default for QsvmEncoding {
    fn default() -> Self {
        Self {
            bits: 3,
            base: 2.0,
            penalty: 5.0,
            kernel: None,
        }
    }
}

impl QsvmEncoding {
    pub fn validate(&self) -> Result<(), QuantumError> {
        if self.bits == 0 {
            return Err(QuantumError::InvalidEncoding("bits must be at least 1".into()));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(QuantumError::InvalidEncoding("base must be positive".into()));
        }
        if !(self.penalty >= 0.0 && self.penalty.is_finite()) {
            return Err(QuantumError::InvalidEncoding("penalty must be >= 0".into()));
        }
        Ok(())
    }

    /// Largest representable α.
    pub fn alpha_max(&self) -> f64 {
        (0..self.bits).map(|k| self.base.powi(k as i32)).sum()
    }

    pub fn decode(&self, x: &[u8]) -> Vec<f64> {
        x.chunks(self.bits)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .filter(|(_, &b)| b != 0)
                    .map(|(k, _)| self.base.powi(k as i32))
                    .sum()
            })
            .collect()
    }
}

fn check_labels(labels: &[f64]) -> Result<(), QuantumError> {
    if let Some(&bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(ClassifierError::InvalidLabel(bad).into());
    }
    if labels.is_empty() {
        return Err(ClassifierError::Empty.into());
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(ClassifierError::SingleClass.into());
    }
    Ok(())
}

/// Maximization problem over `l·bits` binaries whose objective is
/// `Σα − ½ Σ α_n α_m y_n y_m K_nm − ξ (Σ α_n y_n)²`.
pub fn qsvm_build_qubo(kernel: &[Vec<f64>], labels: &[f64], enc: &QsvmEncoding) -> Result<QuboProblem, QuantumError> {
    enc.validate()?;
    check_labels(labels)?;
    let l = labels.len();
    if kernel.len() != l || kernel.iter().any(|r| r.len() != l) {
        return Err(ClassifierError::DimensionMismatch(kernel.len(), l).into());
    }
    let kb = enc.bits;
    let pw: Vec<f64> = (0..kb).map(|k| enc.base.powi(k as i32)).collect();
    let xi = enc.penalty;
    let mut q = QuboProblem::new(l * kb, Sense::Maximize);
    for n in 0..l {
        for k in 0..kb {
            let u = n * kb + k;
            let a = 0.5 * kernel[n][n] + xi;
            q.add(u, u, pw[k] - a * pw[k] * pw[k])?;
            for m in 0..=n {
                let c = -2.0 * labels[n] * labels[m] * (0.5 * kernel[n][m] + xi);
                let top = if m == n { k } else { kb };
                for kk in 0..top {
                    q.add(u, m * kb + kk, c * pw[k] * pw[kk])?;
                }
            }
        }
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct QsvmTraining {
    pub model: SvmModel,
    /// Decoded α over the whole training set.
    pub alphas: Vec<f64>,
    /// QUBO objective of the returned assignment.
    pub objective: f64,
}

pub fn qsvm_train(
    features: &[Vec<f64>],
    labels: &[f64],
    enc: &QsvmEncoding,
    solver: &SolverConfig,
    seed: u64,
) -> Result<QsvmTraining, QuantumError> {
    check_labels(labels)?;
    if features.len() != labels.len() {
        return Err(ClassifierError::DimensionMismatch(features.len(), labels.len()).into());
    }
    let kernel = enc.kernel.unwrap_or(KernelSpec::Rbf {
        gamma: default_gamma(features),
    });
    kernel.validate()?;
    let k = kernel_matrix(&kernel, features);
    let q = qsvm_build_qubo(&k, labels, enc)?;
    let sol = solver.solve(&q, seed)?;
    let alphas = enc.decode(&sol.x);
    let support: Vec<usize> = (0..alphas.len()).filter(|&i| alphas[i] > 0.0).collect();
    if support.is_empty() {
        return Err(QuantumError::NoSupportVectors);
    }
    let bias = support
        .iter()
        .map(|&i| labels[i] - (0..alphas.len()).map(|j| alphas[j] * labels[j] * k[j][i]).sum::<f64>())
        .sum::<f64>()
        / support.len() as f64;
    let model = SvmModel {
        kernel,
        c: enc.alpha_max(),
        support_vectors: support.iter().map(|&i| features[i].clone()).collect(),
        alphas: support.iter().map(|&i| alphas[i]).collect(),
        labels: support.iter().map(|&i| labels[i]).collect(),
        bias,
    };
    Ok(QsvmTraining {
        model,
        alphas,
        objective: sol.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{decision_value, dual_objective, svm_predict, svm_train, SvmParams};
    use crate::qubo::{all_assignments, solve_exhaustive};
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn quant_values_enumerate() {
        let q = quant_qubo(200.0, 152.8).unwrap();
        let v: Vec<f64> = all_assignments(2).map(|x| q.value(&x).unwrap()).collect();
        let expect = [0.0, -152.8, 200.0, (3.0 * 200.0 - 152.8) / 2.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((v[3] - 223.6).abs() < 1e-12);
        let q = quant_qubo(100.0, 100.0).unwrap();
        let v: Vec<f64> = all_assignments(2).map(|x| q.value(&x).unwrap()).collect();
        assert_eq!(v, vec![0.0, -100.0, 100.0, 100.0]);
        let q = quant_qubo(0.0, 0.0).unwrap();
        assert!(all_assignments(2).all(|x| q.value(&x).unwrap() == 0.0));
        assert!(quant_qubo(256.0, 1.0).is_err());
    }

    #[test]
    fn quant_classification_examples() {
        let c = QuantConfig::default();
        assert_eq!(quant_classify(200.0, &c, 0).unwrap(), IonState::Bright);
        assert_eq!(quant_classify(100.0, &c, 0).unwrap(), IonState::Dark);
        assert_eq!(quant_classify(152.8, &c, 0).unwrap(), IonState::Dark);
        let chain = quant_classify_chain(&[200.0, 100.0], &c, 0).unwrap();
        assert_eq!(crate::state::format_bitstring(&chain), "01");
        let chain = quant_classify_chain(&[255.0; 10], &c, 0).unwrap();
        assert_eq!(crate::state::format_bitstring(&chain), "0000000000");
    }

    #[test]
    fn quant_agrees_with_strict_threshold_on_coarse_grid() {
        let c = |eps| QuantConfig {
            epsilon: eps,
            solver: SolverConfig::Exhaustive,
        };
        for s in (0..=255).step_by(5) {
            for e in (0..=255).step_by(5) {
                let got = quant_classify(s as f64, &c(e as f64), 0).unwrap();
                assert_eq!(got.is_bright(), s > e, "{s} {e}");
            }
        }
    }

    #[test]
    fn decomposition() {
        let d = quant_decompose(200.0, 152.8);
        assert!((d.c_proj - 23.6).abs() < 1e-12);
        assert!((d.c_x - 176.4).abs() < 1e-12);
        let target = quant_matrix(200.0, 152.8);
        let r = d.reconstruct();
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[i][j] - target[i][j]).abs() < 1e-12);
            }
        }
        // the two named terms alone miss exactly σ·σᶻ
        let t = d.two_term();
        assert!((target[0][0] - t[0][0] - 200.0).abs() < 1e-12);
        assert!((target[1][1] - t[1][1] + 200.0).abs() < 1e-12);
        let e = quant_decompose(100.0, 100.0);
        assert_eq!(e.c_proj, 0.0);
        let m = quant_decompose(50.0, -50.0);
        assert_eq!(m.c_x, 0.0);
        assert_eq!(m.reconstruct()[0][1], 0.0);
    }

    #[test]
    fn calibrated_epsilon_separates() {
        let s = [(200.0, IonState::Bright), (180.0, IonState::Bright), (20.0, IonState::Dark)];
        let eps = calibrate_epsilon(&s).unwrap();
        assert_eq!(eps, 100.0);
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 3.0], vec![4.0, 3.0]],
            vec![-1.0, -1.0, 1.0, 1.0],
        )
    }

    #[test]
    fn qubo_matches_penalized_dual_on_every_encoding() {
        let (x, y) = toy();
        let enc = QsvmEncoding {
            bits: 2,
            kernel: Some(KernelSpec::Rbf { gamma: 0.3 }),
            ..Default::default()
        };
        let k = kernel_matrix(&enc.kernel.unwrap(), &x);
        let q = qsvm_build_qubo(&k, &y, &enc).unwrap();
        assert_eq!(q.n(), 8);
        let mut best = f64::NEG_INFINITY;
        for bits in all_assignments(8) {
            let a = enc.decode(&bits);
            let eq: f64 = a.iter().zip(&y).map(|(a, y)| a * y).sum();
            let f = dual_objective(&a, &y, &k) - enc.penalty * eq * eq;
            assert!((q.value(&bits).unwrap() - f).abs() < 1e-10);
            best = best.max(f);
        }
        let sol = solve_exhaustive(&q).unwrap();
        assert!((sol.value - best).abs() < 1e-10);
        let two = qsvm_build_qubo(&k[..2].iter().map(|r| r[..2].to_vec()).collect::<Vec<_>>(), &[1.0, -1.0], &enc);
        assert_eq!(two.unwrap().n(), 4);
    }

    #[test]
    fn exhaustive_qsvm_separates_toy_set() {
        let (x, y) = toy();
        let enc = QsvmEncoding {
            bits: 2,
            ..Default::default()
        };
        let t = qsvm_train(&x, &y, &enc, &SolverConfig::Exhaustive, 0).unwrap();
        assert!(t.alphas.iter().all(|&a| (0.0..=enc.alpha_max()).contains(&a)));
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(svm_predict(&t.model, xi).svm_label(), yi);
        }
        // mirrored held-out points
        for (p, label) in [([-1.0, 0.5], -1.0), ([5.0, 3.5], 1.0), ([0.5, -1.0], -1.0), ([3.5, 4.0], 1.0)] {
            assert_eq!(svm_predict(&t.model, &p).svm_label(), label);
        }
        // same signs as the exact dual solution on the training points
        let exact = svm_train(&x, &y, &SvmParams::new(t.model.kernel)).unwrap();
        for xi in &x {
            assert_eq!(
                decision_value(&t.model, xi).signum(),
                decision_value(&exact.model, xi).signum()
            );
        }
    }

    #[test]
    fn annealed_qsvm_on_blobs() {
        let mut rng = substream(31, 0, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = if i % 2 == 0 { 1.5 } else { -1.5 };
            x.push(vec![c + rng.random_range(-1.0..1.0), c + rng.random_range(-1.0..1.0)]);
            y.push(if c > 0.0 { 1.0 } else { -1.0 });
        }
        let t = qsvm_train(&x, &y, &QsvmEncoding::default(), &SolverConfig::anneal(), 5).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(p, &l)| svm_predict(&t.model, p).svm_label() == l)
            .count();
        assert!(correct >= 58, "{correct}");
    }

    #[test]
    fn qsvm_input_errors() {
        let (x, _) = toy();
        let single = qsvm_train(&x, &[1.0; 4], &QsvmEncoding::default(), &SolverConfig::Exhaustive, 0);
        assert!(matches!(single, Err(QuantumError::Classifier(ClassifierError::SingleClass))));
        let bad = QsvmEncoding {
            bits: 0,
            ..Default::default()
        };
        assert!(qsvm_train(&x, &[1.0, -1.0, 1.0, -1.0], &bad, &SolverConfig::Exhaustive, 0).is_err());
        // with α ∈ {0, 1} and a large kernel every nonzero α lowers the dual
        let unit = QsvmEncoding {
            bits: 1,
            base: 1.0,
            penalty: 0.0,
            kernel: Some(KernelSpec::Linear),
        };
        let far = vec![vec![10.0], vec![-10.0]];
        let r = qsvm_train(&far, &[1.0, -1.0], &unit, &SolverConfig::Exhaustive, 0);
        assert!(matches!(r, Err(QuantumError::NoSupportVectors)));
        assert_eq!(QuantumError::NoSupportVectors.to_string(), "no support vectors");
    }
}
