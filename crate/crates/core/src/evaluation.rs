//! Fidelity and classification metrics, grid search, and the benchmark
//! harness that runs every classifier over a labeled dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{
    default_gamma, kmeans2_classify, svm_predict, svm_train, threshold_classify,
    ConvolutionClassifier, KernelSpec, ReferenceChoice, SvmParams, DEFAULT_THRESHOLD,
};
use crate::features::{flatten, FeatureError, FeatureExtractor, FeatureScaler, FeatureVector, PixelVector};
use crate::imaging::Frame;
use crate::localization::{anchor_boxes, IonChainLayout, DEFAULT_BOX_HEIGHT, DEFAULT_BOX_WIDTH};
use crate::quantum::{calibrate_epsilon, qsvm_train, quant_classify, QsvmEncoding, QuantConfig, QuantumError};
use crate::qubo::SolverConfig;
use crate::rng::{substream, DOMAIN_SPLIT};
use crate::state::{format_bitstring, IonState};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distributions are over different outcome sets")]
    OutcomeMismatch,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),
    #[error("unknown method '{0}' (expected stats, conv, kmeans, svm, quant or qsvm)")]
    UnknownMethod(String),
    #[error("dataset has no labels; use statistics labels instead")]
    Unlabeled,
    #[error("{method}: {reason}")]
    Method { method: Method, reason: String },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("report output: {0}")]
    Output(String),
}

/// `2TP / (2TP + FP + FN)`, and 0 when there are no true positives.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDistribution {
    outcomes: Vec<String>,
    weights: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn new(outcomes: Vec<String>, weights: Vec<f64>) -> Result<Self, EvaluationError> {
        if outcomes.len() != weights.len() {
            return Err(EvaluationError::LengthMismatch(outcomes.len(), weights.len()));
        }
        if outcomes.is_empty() {
            return Err(EvaluationError::Empty);
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(EvaluationError::InvalidDistribution("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EvaluationError::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self { outcomes, weights })
    }

    /// Normalize nonnegative counts.
    pub fn from_counts(outcomes: Vec<String>, counts: &[usize]) -> Result<Self, EvaluationError> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(EvaluationError::Empty);
        }
        Self::new(outcomes, counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn outcomes(&self) -> &[String] {
        &self.outcomes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, outcome: &str) -> Option<f64> {
        self.outcomes.iter().position(|o| o == outcome).map(|i| self.weights[i])
    }
}

/// `Σ √(p_i q_i)`, matching outcomes by label.
pub fn classical_fidelity(p: &ProbabilityDistribution, q: &ProbabilityDistribution) -> Result<f64, EvaluationError> {
    if p.outcomes.len() != q.outcomes.len() {
        return Err(EvaluationError::OutcomeMismatch);
    }
    let mut f = 0.0;
    for (o, pw) in p.outcomes.iter().zip(&p.weights) {
        let qw = q.get(o).ok_or(EvaluationError::OutcomeMismatch)?;
        f += (pw * qw).sqrt();
    }
    Ok(f.clamp(0.0, 1.0))
}

/// Class frequencies over `bright`, `dark` (in that order).
pub fn empirical_distribution(states: &[IonState]) -> Result<ProbabilityDistribution, EvaluationError> {
    if states.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let bright = states.iter().filter(|s| s.is_bright()).count();
    ProbabilityDistribution::from_counts(
        vec!["bright".into(), "dark".into()],
        &[bright, states.len() - bright],
    )
}

/// Fidelity between the whole-chain bitstring distributions of two sets of
/// frames; outcomes seen in only one set get probability 0 in the other.
pub fn bitstring_fidelity(pred: &[Vec<IonState>], truth: &[Vec<IonState>]) -> Result<f64, EvaluationError> {
    if pred.is_empty() || truth.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let count = |rows: &[Vec<IonState>]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for r in rows {
            *m.entry(format_bitstring(r)).or_default() += 1;
        }
        m
    };
    let (a, b) = (count(pred), count(truth));
    let (na, nb) = (pred.len() as f64, truth.len() as f64);
    let f: f64 = a
        .iter()
        .filter_map(|(k, &ca)| b.get(k).map(|&cb| (ca as f64 / na * cb as f64 / nb).sqrt()))
        .sum();
    Ok(f.clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct DensityMatrix(DMatrix<Complex64>);

const DENSITY_TOL: f64 = 1e-10;

impl DensityMatrix {
    /// Checks Hermiticity, unit trace and positivity, each to 1e-10.
    pub fn new(m: DMatrix<Complex64>) -> Result<Self, EvaluationError> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(EvaluationError::InvalidDensity("matrix must be square and non-empty".into()));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in 0..n {
                if (m[(i, j)] - m[(j, i)].conj()).norm() > DENSITY_TOL {
                    return Err(EvaluationError::InvalidDensity("not Hermitian".into()));
                }
            }
        }
        let trace = m.trace();
        if (trace.re - 1.0).abs() > DENSITY_TOL || trace.im.abs() > DENSITY_TOL {
            return Err(EvaluationError::InvalidDensity(format!("trace {trace}")));
        }
        let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -DENSITY_TOL {
            return Err(EvaluationError::InvalidDensity(format!("eigenvalue {min_eig:e} < 0")));
        }
        Ok(Self(m))
    }

    pub fn pure(psi: &[Complex64]) -> Result<Self, EvaluationError> {
        let v = nalgebra::DVector::from_column_slice(psi);
        let norm = v.norm();
        if norm == 0.0 {
            return Err(EvaluationError::InvalidDensity("zero state vector".into()));
        }
        let v = v / Complex64::new(norm, 0.0);
        Self::new(&v * v.adjoint())
    }

    pub fn diagonal(p: &[f64]) -> Result<Self, EvaluationError> {
        let d = nalgebra::DVector::from_iterator(p.len(), p.iter().map(|&x| Complex64::new(x, 0.0)));
        Self::new(DMatrix::from_diagonal(&d))
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Principal square root of a Hermitian PSD matrix; tiny negative
/// eigenvalues are clamped to 0.
fn psd_sqrt(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let e = m.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|l| Complex64::new(l.max(0.0).sqrt(), 0.0));
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.adjoint()
}

/// `Tr √(√ρ₀ ρ₁ √ρ₀)`.
pub fn quantum_fidelity(rho0: &DensityMatrix, rho1: &DensityMatrix) -> Result<f64, EvaluationError> {
    if rho0.dim() != rho1.dim() {
        return Err(EvaluationError::LengthMismatch(rho0.dim(), rho1.dim()));
    }
    let s = psd_sqrt(&rho0.0);
    let mut inner = &s * &rho1.0 * &s;
    // restore exact Hermiticity lost to rounding
    inner = (&inner + inner.adjoint()) * Complex64::new(0.5, 0.0);
    let f: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok(f.clamp(0.0, 1.0))
}

/// Counts with bright as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[IonState], truth: &[IonState]) -> Result<Self, EvaluationError> {
        if pred.len() != truth.len() {
            return Err(EvaluationError::LengthMismatch(pred.len(), truth.len()));
        }
        if pred.is_empty() {
            return Err(EvaluationError::Empty);
        }
        let mut c = Confusion::default();
        for (p, t) in pred.iter().zip(truth) {
            match (p.is_bright(), t.is_bright()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

pub fn f1_accuracy_confusion(pred: &[IonState], truth: &[IonState]) -> Result<(f64, f64, Confusion), EvaluationError> {
    let c = Confusion::from_predictions(pred, truth)?;
    Ok((c.f1(), c.accuracy(), c))
}

/// Index and score of the best grid point; earlier points win ties and
/// NaN scores never win. `None` for an empty grid.
pub fn grid_search<P>(grid: &[P], mut objective: impl FnMut(&P) -> f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in grid.iter().enumerate() {
        let v = objective(p);
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stats,
    Conv,
    Kmeans,
    Svm,
    Quant,
    Qsvm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Stats,
        Method::Conv,
        Method::Kmeans,
        Method::Svm,
        Method::Quant,
        Method::Qsvm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Stats => "stats",
            Method::Conv => "conv",
            Method::Kmeans => "kmeans",
            Method::Svm => "svm",
            Method::Quant => "quant",
            Method::Qsvm => "qsvm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvaluationError;
    fn from_str(s: &str) -> Result<Self, EvaluationError> {
        match s.trim() {
            "stats" | "threshold" => Ok(Method::Stats),
            "conv" | "convolution" => Ok(Method::Conv),
            "kmeans" => Ok(Method::Kmeans),
            "svm" => Ok(Method::Svm),
            "quant" => Ok(Method::Quant),
            "qsvm" => Ok(Method::Qsvm),
            other => Err(EvaluationError::UnknownMethod(other.to_string())),
        }
    }
}

/// Comma-separated method list, e.g. `stats,svm,quant`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>, EvaluationError> {
    let methods: Vec<Method> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(EvaluationError::Empty);
    }
    Ok(methods)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Labels stored with the dataset.
    GroundTruth,
    /// Labels produced by the threshold rule, as for unlabeled camera data.
    Statistics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub labels: LabelSource,
    pub box_width: usize,
    pub box_height: usize,
    pub threshold: f64,
    /// Fixed θ; `None` calibrates on the training frames.
    pub conv_theta: Option<f64>,
    pub conv_reference: ReferenceChoice,
    /// Fixed ε; `None` calibrates on the training frames.
    pub quant_epsilon: Option<f64>,
    pub quant_solver: SolverConfig,
    /// Fraction of frames used to fit SVM, θ and ε; the rest are tested.
    pub train_fraction: f64,
    pub svm_c: f64,
    /// RBF width; `None` uses 1 / (n_features · variance).
    pub svm_gamma: Option<f64>,
    pub qsvm_train_fraction: f64,
    /// Upper bound on QSVM training samples (drawn from the training frames).
    pub qsvm_max_train: usize,
    pub qsvm_encoding: QsvmEncoding,
    pub qsvm_solver: SolverConfig,
    /// Also compare whole-chain bitstring distributions.
    pub bitstring_fidelity: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            labels: LabelSource::GroundTruth,
            box_width: DEFAULT_BOX_WIDTH,
            box_height: DEFAULT_BOX_HEIGHT,
            threshold: DEFAULT_THRESHOLD,
            conv_theta: None,
            conv_reference: ReferenceChoice::FirstBright,
            quant_epsilon: None,
            quant_solver: SolverConfig::Exhaustive,
            train_fraction: 0.10,
            svm_c: 10.0,
            svm_gamma: None,
            qsvm_train_fraction: 0.05,
            qsvm_max_train: 300,
            qsvm_encoding: QsvmEncoding::default(),
            qsvm_solver: SolverConfig::anneal(),
            bitstring_fidelity: false,
        }
    }
}

/// One ion in one frame.
#[derive(Debug, Clone)]
pub struct IonSample {
    pub frame: usize,
    pub ion: usize,
    pub pixels: PixelVector,
    pub features: FeatureVector,
}

impl IonSample {
    /// Peak box intensity, the σ of the threshold and Quant rules.
    pub fn intensity(&self) -> f64 {
        self.features.max
    }
}

/// Anchor-box pixels and features for every ion of every frame,
/// frame-major.
pub fn extract_samples(
    frames: &[Frame],
    layout: &IonChainLayout,
    box_width: usize,
    box_height: usize,
) -> Result<Vec<IonSample>, EvaluationError> {
    let per_frame: Vec<Vec<IonSample>> = frames
        .par_iter()
        .enumerate()
        .map_init(FeatureExtractor::new, |ex, (fi, frame)| {
            anchor_boxes(layout, box_width, box_height, (frame.width(), frame.height()))
                .iter()
                .enumerate()
                .map(|(ion, b)| {
                    let pixels = flatten(frame, b)?;
                    let features = ex.extract(&pixels)?;
                    Ok(IonSample {
                        frame: fi,
                        ion,
                        pixels,
                        features,
                    })
                })
                .collect::<Result<Vec<_>, FeatureError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub fidelity: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub n_train: usize,
    pub n_evaluated: usize,
    /// Fitted parameters, e.g. `theta=0.0123`.
    pub detail: String,
    pub bitstring_fidelity: Option<f64>,
    /// Wall-clock seconds of the classification pass.
    pub seconds: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub n_frames: usize,
    pub n_ions: usize,
    pub seed: u64,
    pub labels: LabelSource,
    pub methods: Vec<MethodReport>,
}

impl EvaluationReport {
    pub fn row(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == method)
    }

    /// Same report with all timing fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for m in &mut r.methods {
            m.seconds = 0.0;
            m.train_seconds = 0.0;
        }
        r
    }

    pub fn to_csv(&self, include_timing: bool) -> Result<String, EvaluationError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "method",
            "fidelity",
            "f1",
            "accuracy",
            "tp",
            "fp",
            "tn",
            "fn",
            "n_train",
            "n_evaluated",
            "bitstring_fidelity",
            "detail",
        ];
        if include_timing {
            header.extend(["seconds", "train_seconds"]);
        }
        let out = |e: csv::Error| EvaluationError::Output(e.to_string());
        w.write_record(&header).map_err(out)?;
        for m in &self.methods {
            let mut rec = vec![
                m.method.to_string(),
                format!("{:.6}", m.fidelity),
                format!("{:.6}", m.f1),
                format!("{:.6}", m.accuracy),
                m.confusion.tp.to_string(),
                m.confusion.fp.to_string(),
                m.confusion.tn.to_string(),
                m.confusion.fn_.to_string(),
                m.n_train.to_string(),
                m.n_evaluated.to_string(),
                m.bitstring_fidelity.map(|f| format!("{f:.6}")).unwrap_or_default(),
                m.detail.clone(),
            ];
            if include_timing {
                rec.push(format!("{:.4}", m.seconds));
                rec.push(format!("{:.4}", m.train_seconds));
            }
            w.write_record(&rec).map_err(out)?;
        }
        let bytes = w.into_inner().map_err(|e| EvaluationError::Output(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvaluationError::Output(e.to_string()))
    }

    /// `report.csv`, `report.json` (with timing) and `metrics.json` (without).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), EvaluationError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| EvaluationError::Output(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("report.csv"), self.to_csv(true)?).map_err(io)?;
        let json = |r: &EvaluationReport| {
            serde_json::to_string_pretty(r).map_err(|e| EvaluationError::Output(e.to_string()))
        };
        fs::write(dir.join("report.json"), json(self)?).map_err(io)?;
        fs::write(dir.join("metrics.json"), json(&self.without_timing())?).map_err(io)?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            "method", "fidelity", "f1", "accuracy", "TP", "FP", "TN", "FN", "seconds"
        );
        for m in &self.methods {
            s.push_str(&format!(
                "{:<8} {:>9.6} {:>9.6} {:>9.6} {:>8} {:>8} {:>8} {:>8} {:>9.3}\n",
                m.method.name(),
                m.fidelity,
                m.f1,
                m.accuracy,
                m.confusion.tp,
                m.confusion.fp,
                m.confusion.tn,
                m.confusion.fn_,
                m.seconds
            ));
        }
        s
    }
}

struct Split {
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Shuffled frame indices; the first `ceil(fraction · n)` train.
fn split_frames(n_frames: usize, fraction: f64, seed: u64, stream: u64) -> Split {
    let mut idx: Vec<usize> = (0..n_frames).collect();
    idx.shuffle(&mut substream(seed, DOMAIN_SPLIT, stream));
    let k = ((fraction * n_frames as f64).ceil() as usize).clamp(1, n_frames.saturating_sub(1).max(1));
    let test = idx.split_off(k.min(idx.len()));
    Split { train: idx, test }
}

fn sample_indices(frames: &[usize], n_ions: usize) -> Vec<usize> {
    let mut out: Vec<usize> = frames
        .iter()
        .flat_map(|&f| (0..n_ions).map(move |i| f * n_ions + i))
        .collect();
    out.sort_unstable();
    out
}

struct Outcome {
    predictions: Vec<IonState>,
    evaluated: Vec<usize>,
    n_train: usize,
    detail: String,
    train_seconds: f64,
    seconds: f64,
}

fn method_err(method: Method) -> impl Fn(&dyn fmt::Display) -> EvaluationError {
    move |e| EvaluationError::Method {
        method,
        reason: e.to_string(),
    }
}

fn svm_rows(samples: &[IonSample], idx: &[usize], scaler: &FeatureScaler) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| scaler.transform(&samples[i].features.to_array())).collect()
}

fn run_method(
    method: Method,
    samples: &[IonSample],
    labels: &[IonState],
    n_ions: usize,
    n_frames: usize,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<Outcome, EvaluationError> {
    let err = method_err(method);
    let all: Vec<usize> = (0..samples.len()).collect();
    let split = split_frames(n_frames, config.train_fraction, seed, 0);
    let train = sample_indices(&split.train, n_ions);
    let test = sample_indices(&split.test, n_ions);
    let t_train = Instant::now();
    match method {
        Method::Stats => {
            let t = Instant::now();
            let predictions = samples
                .par_iter()
                .map(|s| threshold_classify(s.intensity(), config.threshold))
                .collect();
            Ok(Outcome {
                predictions,
                evaluated: all,
                n_train: 0,
                detail: format!("tau={}", config.threshold),
                train_seconds: 0.0,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
        Method::Kmeans => {
            let t = Instant::now();
            let feats: Vec<FeatureVector> = samples.iter().map(|s| s.features).collect();
            let predictions = kmeans2_classify(&feats, seed).map_err(|e| err(&e))?;
            Ok(Outcome {
                predictions,
                evaluated: all,
                n_train: 0,
                detail: "k=2".into(),
                train_seconds: 0.0,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
        Method::Conv => {
            let boxes: Vec<PixelVector> = train.iter().map(|&i| samples[i].pixels.clone()).collect();
            let train_labels: Vec<IonState> = train.iter().map(|&i| labels[i]).collect();
            let mut clf = ConvolutionClassifier::calibrate(&boxes, &train_labels, config.conv_reference)
                .map_err(|e| err(&e))?;
            if let Some(theta) = config.conv_theta {
                clf.theta = theta;
            }
            let train_seconds = t_train.elapsed().as_secs_f64();
            let t = Instant::now();
            let predictions = test
                .par_iter()
                .map(|&i| clf.classify(&samples[i].pixels))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(&e))?;
            Ok(Outcome {
                predictions,
                evaluated: test,
                n_train: train.len(),
                detail: format!("theta={:.6} orientation={:?}", clf.theta, clf.orientation),
                train_seconds,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
        Method::Quant => {
            let epsilon = match config.quant_epsilon {
                Some(e) => e,
                None => calibrate_epsilon(
                    &train
                        .iter()
                        .map(|&i| (samples[i].intensity(), labels[i]))
                        .collect::<Vec<_>>(),
                )
                .map_err(|e| err(&e))?,
            };
            let qc = QuantConfig {
                epsilon,
                solver: config.quant_solver.clone(),
            };
            let train_seconds = t_train.elapsed().as_secs_f64();
            let t = Instant::now();
            let predictions = test
                .par_iter()
                .map(|&i| quant_classify(samples[i].intensity(), &qc, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>, QuantumError>>()
                .map_err(|e| err(&e))?;
            Ok(Outcome {
                predictions,
                evaluated: test,
                n_train: train.len(),
                detail: format!("epsilon={epsilon:.4} solver={}", qc.solver.name()),
                train_seconds,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
        Method::Svm => {
            let rows: Vec<[f64; 11]> = train.iter().map(|&i| samples[i].features.to_array()).collect();
            let scaler = FeatureScaler::fit(&rows);
            let x = svm_rows(samples, &train, &scaler);
            let y: Vec<f64> = train.iter().map(|&i| labels[i].svm_label()).collect();
            let gamma = config.svm_gamma.unwrap_or_else(|| default_gamma(&x));
            let mut params = SvmParams::new(KernelSpec::Rbf { gamma });
            params.c = config.svm_c;
            let fit = svm_train(&x, &y, &params).map_err(|e| err(&e))?;
            let train_seconds = t_train.elapsed().as_secs_f64();
            let t = Instant::now();
            let predictions = test
                .par_iter()
                .map(|&i| svm_predict(&fit.model, &scaler.transform(&samples[i].features.to_array())))
                .collect();
            Ok(Outcome {
                predictions,
                evaluated: test,
                n_train: train.len(),
                detail: format!("gamma={gamma:.6} C={} n_sv={}", config.svm_c, fit.model.n_support()),
                train_seconds,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
        Method::Qsvm => {
            let split = split_frames(n_frames, config.qsvm_train_fraction, seed, 1);
            let test = sample_indices(&split.test, n_ions);
            let mut pool = sample_indices(&split.train, n_ions);
            pool.shuffle(&mut substream(seed, DOMAIN_SPLIT, 2));
            pool.truncate(config.qsvm_max_train.max(2));
            pool.sort_unstable();
            let rows: Vec<[f64; 11]> = pool.iter().map(|&i| samples[i].features.to_array()).collect();
            let scaler = FeatureScaler::fit(&rows);
            let x = svm_rows(samples, &pool, &scaler);
            let y: Vec<f64> = pool.iter().map(|&i| labels[i].svm_label()).collect();
            let fit = qsvm_train(&x, &y, &config.qsvm_encoding, &config.qsvm_solver, seed).map_err(|e| err(&e))?;
            let train_seconds = t_train.elapsed().as_secs_f64();
            let t = Instant::now();
            let predictions = test
                .par_iter()
                .map(|&i| svm_predict(&fit.model, &scaler.transform(&samples[i].features.to_array())))
                .collect();
            Ok(Outcome {
                predictions,
                evaluated: test,
                n_train: pool.len(),
                detail: format!(
                    "bits={} base={} penalty={} solver={} n_sv={}",
                    config.qsvm_encoding.bits,
                    config.qsvm_encoding.base,
                    config.qsvm_encoding.penalty,
                    config.qsvm_solver.name(),
                    fit.model.n_support()
                ),
                train_seconds,
                seconds: t.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Run each method in turn over a dataset and score it against the
/// chosen labels. Supervised and calibrated methods are scored on the
/// held-out frames only; `stats` and `kmeans` are scored on every frame.
pub fn benchmark(
    name: &str,
    frames: &[Frame],
    ground_truth: Option<&[Vec<IonState>]>,
    layout: &IonChainLayout,
    methods: &[Method],
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<EvaluationReport, EvaluationError> {
    if frames.len() < 2 {
        return Err(EvaluationError::Method {
            method: methods.first().copied().unwrap_or(Method::Stats),
            reason: "need at least two frames".into(),
        });
    }
    if methods.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let n_ions = layout.len();
    let samples = extract_samples(frames, layout, config.box_width, config.box_height)?;
    let labels: Vec<IonState> = match config.labels {
        LabelSource::GroundTruth => {
            let gt = ground_truth.ok_or(EvaluationError::Unlabeled)?;
            if gt.len() != frames.len() {
                return Err(EvaluationError::LengthMismatch(gt.len(), frames.len()));
            }
            if let Some(bad) = gt.iter().find(|r| r.len() != n_ions) {
                return Err(EvaluationError::LengthMismatch(bad.len(), n_ions));
            }
            gt.iter().flatten().copied().collect()
        }
        LabelSource::Statistics => samples
            .iter()
            .map(|s| threshold_classify(s.intensity(), config.threshold))
            .collect(),
    };

    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let out = run_method(method, &samples, &labels, n_ions, frames.len(), config, seed)?;
        let truth: Vec<IonState> = out.evaluated.iter().map(|&i| labels[i]).collect();
        let (f1, accuracy, confusion) = f1_accuracy_confusion(&out.predictions, &truth)?;
        let fidelity = classical_fidelity(
            &empirical_distribution(&out.predictions)?,
            &empirical_distribution(&truth)?,
        )?;
        let bitstring = if config.bitstring_fidelity {
            let mut pred_rows: BTreeMap<usize, Vec<IonState>> = BTreeMap::new();
            let mut true_rows: BTreeMap<usize, Vec<IonState>> = BTreeMap::new();
            for (k, &i) in out.evaluated.iter().enumerate() {
                pred_rows.entry(samples[i].frame).or_default().push(out.predictions[k]);
                true_rows.entry(samples[i].frame).or_default().push(labels[i]);
            }
            let p: Vec<_> = pred_rows.into_values().collect();
            let t: Vec<_> = true_rows.into_values().collect();
            Some(bitstring_fidelity(&p, &t)?)
        } else {
            None
        };
        rows.push(MethodReport {
            method,
            fidelity,
            f1,
            accuracy,
            confusion,
            n_train: out.n_train,
            n_evaluated: out.evaluated.len(),
            detail: out.detail,
            bitstring_fidelity: bitstring,
            seconds: out.seconds,
            train_seconds: out.train_seconds,
        });
    }
    Ok(EvaluationReport {
        dataset: name.to_string(),
        n_frames: frames.len(),
        n_ions,
        seed,
        labels: config.labels,
        methods: rows,
    })
}
