//! Conventional per-ion classifiers: max-brightness threshold, cosine
//! "convolution" against a reference box, 2-means clustering and a kernel
//! SVM.

mod svm;

pub use svm::{
    decision_value, default_gamma, dual_objective, kernel_eval, kernel_matrix, svm_predict,
    svm_train, KernelSpec, SvmModel, SvmParams, SvmTraining,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::f1_from_counts;
use crate::features::{normalize_features, FeatureVector, PixelVector};
use crate::localization::{kmeans, LocalizationError};
use crate::state::IonState;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector in convolution score")]
    ZeroNorm,
    #[error("labels must be -1 or +1, found {0}")]
    InvalidLabel(f64),
    #[error("SMO did not converge within {iterations} iterations (violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("no support vectors")]
    NoSupportVectors,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl From<LocalizationError> for ClassifierError {
    fn from(e: LocalizationError) -> Self {
        ClassifierError::Degenerate(e.to_string())
    }
}

/// Max-brightness threshold used for the benchmark data.
pub const DEFAULT_THRESHOLD: f64 = 153.0;

/// Bright iff `max_brightness ≥ tau`.
pub fn threshold_classify(max_brightness: f64, tau: f64) -> IonState {
    if max_brightness >= tau {
        IonState::Bright
    } else {
        IonState::Dark
    }
}

/// Which side of a scalar cut is called bright.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// score ≥ cut → bright
    HighIsBright,
    /// score ≥ cut → dark
    HighIsDark,
}

impl Orientation {
    pub fn classify(self, score: f64, cut: f64) -> IonState {
        let high = score >= cut;
        match (self, high) {
            (Orientation::HighIsBright, true) | (Orientation::HighIsDark, false) => IonState::Bright,
            _ => IonState::Dark,
        }
    }
}

/// Best cut for `orientation` among midpoints of consecutive distinct
/// scores, by F1 of the bright class. Ties keep the smallest cut.
/// Returns `(cut, f1)`.
pub fn calibrate_cut(
    samples: &[(f64, IonState)],
    orientation: Orientation,
) -> Result<(f64, f64), ClassifierError> {
    if samples.is_empty() {
        return Err(ClassifierError::Empty);
    }
    if samples.iter().any(|s| !s.0.is_finite()) {
        return Err(ClassifierError::InvalidParameter("non-finite score".into()));
    }
    let bright_total = samples.iter().filter(|s| s.1.is_bright()).count();
    if bright_total == 0 || bright_total == samples.len() {
        return Err(ClassifierError::SingleClass);
    }
    let mut sorted: Vec<(f64, IonState)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (value, bright count, dark count) per distinct score
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &(v, s) in &sorted {
        match groups.last_mut() {
            Some(g) if g.0 == v => {
                if s.is_bright() {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((v, s.is_bright() as usize, (!s.is_bright()) as usize)),
        }
    }
    if groups.len() == 1 {
        // every sample shares one score; any cut at or below it is equivalent
        let v = groups[0].0;
        let pred_bright = orientation.classify(v, v).is_bright();
        let (tp, fp) = if pred_bright {
            (bright_total, samples.len() - bright_total)
        } else {
            (0, 0)
        };
        let fn_ = bright_total - tp;
        return Ok((v, f1_from_counts(tp, fp, fn_)));
    }

    let dark_total = samples.len() - bright_total;
    let (mut below_b, mut below_d) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    for k in 0..groups.len() - 1 {
        below_b += groups[k].1;
        below_d += groups[k].2;
        let cut = 0.5 * (groups[k].0 + groups[k + 1].0);
        let (above_b, above_d) = (bright_total - below_b, dark_total - below_d);
        let (tp, fp) = match orientation {
            Orientation::HighIsBright => (above_b, above_d),
            Orientation::HighIsDark => (below_b, below_d),
        };
        let f1 = f1_from_counts(tp, fp, bright_total - tp);
        if best.is_none_or(|(_, bf)| f1 > bf) {
            best = Some((cut, f1));
        }
    }
    Ok(best.expect("at least two distinct scores"))
}

/// F1-optimal brightness threshold from labeled `(max brightness, state)` pairs.
pub fn calibrate_threshold(samples: &[(f64, IonState)]) -> Result<f64, ClassifierError> {
    calibrate_cut(samples, Orientation::HighIsBright).map(|(t, _)| t)
}

/// Cut values quoted for the convolution method; only the calibrated value
/// is used by default.
pub const CONVOLUTION_THETA_PRESETS: [f64; 2] = [0.001523, 0.012];

/// 1 − cos∠(x, reference) at zero shift, in [0, 2].
pub fn convolution_score(x: &PixelVector, reference: &PixelVector) -> Result<f64, ClassifierError> {
    if x.len() != reference.len() {
        return Err(ClassifierError::DimensionMismatch(x.len(), reference.len()));
    }
    let (mut dot, mut nx, mut nr) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.values().iter().zip(reference.values()) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nx += a * a;
        nr += b * b;
    }
    if nx == 0.0 || nr == 0.0 {
        return Err(ClassifierError::ZeroNorm);
    }
    Ok((1.0 - dot / (nx.sqrt() * nr.sqrt())).clamp(0.0, 2.0))
}

pub fn convolution_classify(
    x: &PixelVector,
    reference: &PixelVector,
    theta: f64,
    orientation: Orientation,
) -> Result<IonState, ClassifierError> {
    Ok(orientation.classify(convolution_score(x, reference)?, theta))
}

/// How the convolution reference box is picked from the calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceChoice {
    First,
    FirstBright,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionClassifier {
    pub reference: PixelVector,
    pub theta: f64,
    pub orientation: Orientation,
}

impl ConvolutionClassifier {
    /// Pick the reference, then the cut and orientation with the best F1.
    /// Boxes with zero norm are skipped during calibration.
    pub fn calibrate(
        boxes: &[PixelVector],
        labels: &[IonState],
        choice: ReferenceChoice,
    ) -> Result<Self, ClassifierError> {
        if boxes.len() != labels.len() {
            return Err(ClassifierError::DimensionMismatch(boxes.len(), labels.len()));
        }
        let nonzero = |b: &PixelVector| b.values().iter().any(|&v| v > 0);
        let reference = boxes
            .iter()
            .zip(labels)
            .find(|(b, l)| nonzero(b) && (choice == ReferenceChoice::First || l.is_bright()))
            .map(|(b, _)| b.clone())
            .ok_or(ClassifierError::Empty)?;
        let mut scored = Vec::with_capacity(boxes.len());
        for (b, &l) in boxes.iter().zip(labels) {
            if nonzero(b) {
                scored.push((convolution_score(b, &reference)?, l));
            }
        }
        let mut best: Option<ConvolutionClassifier> = None;
        let mut best_f1 = f64::NEG_INFINITY;
        for orientation in [Orientation::HighIsBright, Orientation::HighIsDark] {
            let (theta, f1) = calibrate_cut(&scored, orientation)?;
            if f1 > best_f1 {
                best_f1 = f1;
                best = Some(ConvolutionClassifier {
                    reference: reference.clone(),
                    theta,
                    orientation,
                });
            }
        }
        Ok(best.expect("two orientations tried"))
    }

    /// An all-zero box has no direction; it is reported dark.
    pub fn classify(&self, x: &PixelVector) -> Result<IonState, ClassifierError> {
        match convolution_score(x, &self.reference) {
            Ok(s) => Ok(self.orientation.classify(s, self.theta)),
            Err(ClassifierError::ZeroNorm) => Ok(IonState::Dark),
            Err(e) => Err(e),
        }
    }
}

/// Unsupervised split into two clusters on z-scored features; the cluster
/// whose members have the larger mean max-brightness is bright.
pub fn kmeans2_classify(features: &[FeatureVector], seed: u64) -> Result<Vec<IonState>, ClassifierError> {
    if features.len() < 2 {
        return Err(ClassifierError::Degenerate("need at least two samples".into()));
    }
    let (z, _) = normalize_features(features);
    let fit = kmeans(&z, None, 2, seed, 300, 0.0).map_err(|e| match e {
        LocalizationError::TooFewPoints { .. } => {
            ClassifierError::Degenerate("all feature vectors are identical".into())
        }
        other => other.into(),
    })?;
    let mut sum = [0.0; 2];
    let mut count = [0usize; 2];
    for (f, &a) in features.iter().zip(&fit.assignments) {
        sum[a] += f.max;
        count[a] += 1;
    }
    if count.contains(&0) {
        return Err(ClassifierError::Degenerate("a cluster ended up empty".into()));
    }
    let mean = [sum[0] / count[0] as f64, sum[1] / count[1] as f64];
    if mean[0] == mean[1] {
        return Err(ClassifierError::Degenerate(
            "clusters have equal mean brightness".into(),
        ));
    }
    let bright_cluster = if mean[0] > mean[1] { 0 } else { 1 };
    Ok(fit
        .assignments
        .iter()
        .map(|&a| {
            if a == bright_cluster {
                IonState::Bright
            } else {
                IonState::Dark
            }
        })
        .collect())
}
