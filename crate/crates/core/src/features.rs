//! Anchor-box pixel vectors and their 11 summary statistics.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Frame;
use crate::localization::AnchorBox;
use crate::state::IonState;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("anchor box is empty")]
    EmptyBox,
    #[error("anchor box ({x0},{y0}) {width}x{height} exceeds the {frame_w}x{frame_h} frame")]
    BoxOutsideFrame {
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
        frame_w: usize,
        frame_h: usize,
    },
    #[error("need at least 2 pixel values, got {0}")]
    TooShort(usize),
    #[error("feature table {path}: {reason}")]
    Table { path: String, reason: String },
}

/// Box pixels in row-major order, top-left to bottom-right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelVector(pub Vec<u8>);

impl PixelVector {
    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> u8 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

pub fn flatten(frame: &Frame, anchor: &AnchorBox) -> Result<PixelVector, FeatureError> {
    if anchor.width == 0 || anchor.height == 0 {
        return Err(FeatureError::EmptyBox);
    }
    if anchor.x0 + anchor.width > frame.width() || anchor.y0 + anchor.height > frame.height() {
        return Err(FeatureError::BoxOutsideFrame {
            x0: anchor.x0,
            y0: anchor.y0,
            width: anchor.width,
            height: anchor.height,
            frame_w: frame.width(),
            frame_h: frame.height(),
        });
    }
    let mut out = Vec::with_capacity(anchor.pixel_count());
    for y in anchor.y0..anchor.y0 + anchor.height {
        let row = &frame.pixels()[y * frame.width()..(y + 1) * frame.width()];
        out.extend_from_slice(&row[anchor.x0..anchor.x0 + anchor.width]);
    }
    Ok(PixelVector(out))
}

pub const FEATURE_COUNT: usize = 11;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "max",
    "min",
    "range",
    "mean",
    "median",
    "std",
    "variance",
    "skewness",
    "kurtosis",
    "fundamental_freq",
    "fundamental_power",
];

/// Brightness statistics of one anchor box.
///
/// Moments are population moments; kurtosis is the non-excess m₄/m₂².
/// Skewness and kurtosis are 0 when the variance is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub max: f64,
    pub min: f64,
    pub range: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    /// Normalized frequency (bin / n) of the strongest non-DC DFT bin.
    pub fundamental_freq: f64,
    /// |X_k|² at that bin.
    pub fundamental_power: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.max,
            self.min,
            self.range,
            self.mean,
            self.median,
            self.std,
            self.variance,
            self.skewness,
            self.kurtosis,
            self.fundamental_freq,
            self.fundamental_power,
        ]
    }
}

/// Reusable extractor; caches FFT plans across boxes of the same size.
pub struct FeatureExtractor {
    planner: FftPlanner<f64>,
    cached: Option<Arc<dyn Fft<f64>>>,
    buffer: Vec<Complex<f64>>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self {
            planner: FftPlanner::new(),
            cached: None,
            buffer: Vec::new(),
        }
    }

    pub fn extract(&mut self, v: &PixelVector) -> Result<FeatureVector, FeatureError> {
        self.extract_values(&v.to_f64())
    }

    pub fn extract_values(&mut self, values: &[f64]) -> Result<FeatureVector, FeatureError> {
        let n = values.len();
        if n < 2 {
            return Err(FeatureError::TooShort(n));
        }
        let nf = n as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = values.iter().sum::<f64>() / nf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &v in values {
            let d = v - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        m2 /= nf;
        m3 /= nf;
        m4 /= nf;
        let (skewness, kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2))
        } else {
            (0.0, 0.0)
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[(n - 1) / 2];

        let (bin, power) = self.dominant_bin(values);
        Ok(FeatureVector {
            max,
            min,
            range: max - min,
            mean,
            median,
            std: m2.sqrt(),
            variance: m2,
            skewness,
            kurtosis,
            fundamental_freq: bin as f64 / nf,
            fundamental_power: power,
        })
    }

    /// Strongest bin among 1..=n/2; ties keep the lowest index.
    fn dominant_bin(&mut self, values: &[f64]) -> (usize, f64) {
        let n = values.len();
        let fft = match &self.cached {
            Some(f) if f.len() == n => Arc::clone(f),
            _ => {
                let f = self.planner.plan_fft_forward(n);
                self.cached = Some(Arc::clone(&f));
                f
            }
        };
        self.buffer.clear();
        self.buffer.extend(values.iter().map(|&v| Complex::new(v, 0.0)));
        fft.process(&mut self.buffer);
        let mut best = (1, self.buffer[1].norm_sqr());
        for k in 2..=n / 2 {
            let p = self.buffer[k].norm_sqr();
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }
}

pub fn extract_features(v: &PixelVector) -> Result<FeatureVector, FeatureError> {
    FeatureExtractor::new().extract(v)
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; FEATURE_COUNT],
    pub std: [f64; FEATURE_COUNT],
}

impl FeatureScaler {
    pub fn fit(rows: &[[f64; FEATURE_COUNT]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; FEATURE_COUNT];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; FEATURE_COUNT];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.map(|s| (s / n).sqrt());
        Self { mean, std }
    }

    /// z-score; constant features (std 0, or std lost in rounding) map to 0.
    pub fn transform(&self, row: &[f64; FEATURE_COUNT]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| {
                if *s > 1e-12 * m.abs().max(1.0) {
                    (v - m) / s
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Z-score every feature across the dataset.
pub fn normalize_features(features: &[FeatureVector]) -> (Vec<Vec<f64>>, FeatureScaler) {
    let rows: Vec<[f64; FEATURE_COUNT]> = features.iter().map(|f| f.to_array()).collect();
    let scaler = FeatureScaler::fit(&rows);
    let out = rows.iter().map(|r| scaler.transform(r)).collect();
    (out, scaler)
}

/// One row of the exported feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub frame: usize,
    pub ion: usize,
    pub label: Option<IonState>,
    pub features: FeatureVector,
}

pub fn write_feature_table(path: impl AsRef<Path>, rows: &[FeatureRow]) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let err = |e: &dyn std::fmt::Display| FeatureError::Table {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    let mut header = vec!["frame", "ion"];
    header.extend(FEATURE_NAMES);
    header.push("label");
    w.write_record(&header).map_err(|e| err(&e))?;
    for r in rows {
        let mut rec = vec![r.frame.to_string(), r.ion.to_string()];
        rec.extend(r.features.to_array().iter().map(|v| format!("{v}")));
        rec.push(r.label.map(|s| s.bit().to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn boxed(x0: usize, y0: usize, width: usize, height: usize) -> AnchorBox {
        AnchorBox {
            center: (0, 0),
            x0,
            y0,
            width,
            height,
        }
    }

    #[test]
    fn flatten_order() {
        let f = Frame::new(3, 2, vec![1, 2, 9, 3, 4, 9]).unwrap();
        assert_eq!(flatten(&f, &boxed(0, 0, 2, 2)).unwrap().0, vec![1, 2, 3, 4]);
        assert_eq!(flatten(&f, &boxed(2, 1, 1, 1)).unwrap().0, vec![9]);
        assert_eq!(flatten(&f, &boxed(0, 0, 3, 2)).unwrap().0, f.pixels());
        assert!(matches!(flatten(&f, &boxed(0, 0, 0, 2)), Err(FeatureError::EmptyBox)));
        assert!(flatten(&f, &boxed(2, 0, 2, 2)).is_err());
    }

    #[test]
    fn constant_vector() {
        let fv = extract_features(&PixelVector(vec![7; 4])).unwrap();
        assert_eq!((fv.max, fv.min, fv.median, fv.mean), (7.0, 7.0, 7.0, 7.0));
        assert_eq!((fv.std, fv.variance, fv.skewness, fv.kurtosis), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(fv.fundamental_power, 0.0);
        assert_eq!(fv.fundamental_freq, 0.25);
    }

    #[test]
    fn alternating_vector_hits_nyquist() {
        let fv = extract_features(&PixelVector(vec![0, 255, 0, 255])).unwrap();
        assert_eq!(fv.mean, 127.5);
        assert_eq!(fv.range, 255.0);
        assert_eq!(fv.fundamental_freq, 0.5);
        assert!((fv.fundamental_power - 260_100.0).abs() < 1e-6);
    }

    #[test]
    fn too_short() {
        assert!(matches!(
            extract_features(&PixelVector(vec![3])),
            Err(FeatureError::TooShort(1))
        ));
    }

    #[test]
    fn median_is_lower_middle() {
        let fv = extract_features(&PixelVector(vec![4, 1, 3, 2])).unwrap();
        assert_eq!(fv.median, 2.0);
        let fv = extract_features(&PixelVector(vec![5, 1, 3])).unwrap();
        assert_eq!(fv.median, 3.0);
    }

    struct Oracle {
        mean: f64,
        var: f64,
        skew: f64,
        kurt: f64,
        powers: Vec<f64>,
    }

    /// Straight-from-definition moments and an O(n²) DFT.
    fn oracle(v: &[f64]) -> Oracle {
        let n = v.len() as f64;
        let mut total = 0.0;
        for x in v {
            total += x;
        }
        let mean = total / n;
        let central = |p: i32| v.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
        let var = central(2);
        let (skew, kurt) = if var > 0.0 {
            (central(3) / var.powf(1.5), central(4) / var.powi(2))
        } else {
            (0.0, 0.0)
        };
        let powers = (0..=v.len() / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, x) in v.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect();
        Oracle {
            mean,
            var,
            skew,
            kurt,
            powers,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300).max(1.0)
    }

    #[test]
    fn matches_definition_oracle_on_random_vectors() {
        let mut rng = substream(31, 0, 0);
        let mut ex = FeatureExtractor::new();
        for trial in 0..200 {
            let n = [2usize, 3, 16, 64, 256, 100][trial % 6];
            let v: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            let fv = ex.extract(&PixelVector(v.clone())).unwrap();
            let o = oracle(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
            assert!(rel(fv.mean, o.mean) < 1e-9);
            assert!(rel(fv.variance, o.var) < 1e-9);
            assert!(rel(fv.skewness, o.skew) < 1e-9);
            assert!(rel(fv.kurtosis, o.kurt) < 1e-9);
            let k = (fv.fundamental_freq * n as f64).round() as usize;
            assert!(rel(fv.fundamental_power, o.powers[k]) < 1e-9);
            // strongest non-DC bin
            for (j, p) in o.powers.iter().enumerate().skip(1) {
                assert!(fv.fundamental_power >= p * (1.0 - 1e-9), "bin {j}");
            }
            assert_eq!(fv.max, *v.iter().max().unwrap() as f64);
        }
    }

    proptest! {
        #[test]
        fn shift_leaves_shape_moments_alone(v in proptest::collection::vec(0u8..200, 2..80), c in 0u8..55) {
            let a = extract_features(&PixelVector(v.clone())).unwrap();
            let b = extract_features(&PixelVector(v.iter().map(|x| x + c).collect())).unwrap();
            let c = c as f64;
            prop_assert!((b.mean - a.mean - c).abs() < 1e-9);
            prop_assert!((b.median - a.median - c).abs() < 1e-9);
            prop_assert!((b.max - a.max - c).abs() < 1e-9);
            prop_assert!((b.min - a.min - c).abs() < 1e-9);
            prop_assert!((b.std - a.std).abs() < 1e-9);
            prop_assert!((b.variance - a.variance).abs() < 1e-9 * a.variance.max(1.0));
            prop_assert!((b.skewness - a.skewness).abs() < 1e-9);
            prop_assert!((b.kurtosis - a.kurtosis).abs() < 1e-9 * a.kurtosis.max(1.0));
        }

        #[test]
        fn invariants_hold(v in proptest::collection::vec(any::<u8>(), 2..300)) {
            let f = extract_features(&PixelVector(v)).unwrap();
            prop_assert_eq!(f.range, f.max - f.min);
            prop_assert!((f.variance - f.std * f.std).abs() <= 1e-9 * f.variance.max(1.0));
            prop_assert!(f.min <= f.median && f.median <= f.max);
            prop_assert!(f.fundamental_freq > 0.0 && f.fundamental_freq <= 0.5);
        }
    }

    #[test]
    fn max_feature_matches_scan_of_box() {
        let mut rng = substream(2, 0, 0);
        let pixels: Vec<u8> = (0..200 * 32).map(|_| rng.random()).collect();
        let frame = Frame::new(200, 32, pixels).unwrap();
        let b = boxed(40, 7, 16, 16);
        let mut scan = 0;
        for y in 7..23 {
            for x in 40..56 {
                scan = scan.max(frame.get(x, y));
            }
        }
        let fv = extract_features(&flatten(&frame, &b).unwrap()).unwrap();
        assert_eq!(fv.max, scan as f64);
    }

    fn with_max(max: f64) -> FeatureVector {
        FeatureVector {
            max,
            min: 3.0,
            range: max - 3.0,
            mean: 1.0,
            median: 1.0,
            std: 0.0,
            variance: 0.0,
            skewness: 0.0,
            kurtosis: 0.0,
            fundamental_freq: 0.25,
            fundamental_power: 0.0,
        }
    }

    #[test]
    fn normalization() {
        let (z, scaler) = normalize_features(&[with_max(0.0), with_max(2.0)]);
        assert_eq!(z[0][0], -1.0);
        assert_eq!(z[1][0], 1.0);
        // min is constant
        assert_eq!(z[0][1], 0.0);
        assert_eq!(z[1][1], 0.0);
        assert_eq!(scaler.mean[0], 1.0);
    }

    #[test]
    fn normalized_columns_are_standard() {
        let mut rng = substream(3, 0, 0);
        let mut ex = FeatureExtractor::new();
        let feats: Vec<FeatureVector> = (0..500)
            .map(|_| {
                let v: Vec<u8> = (0..64).map(|_| rng.random()).collect();
                ex.extract(&PixelVector(v)).unwrap()
            })
            .collect();
        let (z, _) = normalize_features(&feats);
        for j in 0..FEATURE_COUNT {
            let n = z.len() as f64;
            let m = z.iter().map(|r| r[j]).sum::<f64>() / n;
            let s = (z.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-12, "feature {j} mean {m}");
            if s > 0.0 {
                assert!((s - 1.0).abs() < 1e-12, "feature {j} std {s}");
            }
        }
    }

    #[test]
    fn feature_table_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![FeatureRow {
            frame: 0,
            ion: 3,
            label: Some(IonState::Dark),
            features: with_max(9.0),
        }];
        write_feature_table(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 14);
        assert!(lines.next().unwrap().starts_with("0,3,9,"));
    }
}
