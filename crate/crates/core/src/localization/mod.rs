//! Ion positions: the physical equilibrium of a harmonically trapped
//! Coulomb chain, and the image-space chain found by clustering bright pixels.

mod kmeans;

pub use kmeans::{kmeans, wcss, KMeansFit};

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Frame;

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("equilibrium solve did not converge after {iterations} iterations (gradient max-norm {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("k = {k} exceeds the number of distinct points ({distinct})")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("no signal pixels above the background level")]
    NoSignal,
    #[error("only {found} signal pixels for {n_ions} ions")]
    NotEnoughSignal { found: usize, n_ions: usize },
    #[error("degenerate line fit: {0}")]
    DegenerateFit(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("layout file {path}: {reason}")]
    LayoutFile { path: String, reason: String },
}

/// Physical constants of a linear Paul trap, SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapParameters {
    pub ion_mass: f64,
    /// Axial angular frequency (rad/s).
    pub trap_frequency: f64,
    pub ionization_degree: f64,
    pub vacuum_permittivity: f64,
    pub electron_charge: f64,
}

impl Default for TrapParameters {
    /// ¹⁷¹Yb⁺ in a 2π × 1 MHz axial potential.
    fn default() -> Self {
        Self {
            ion_mass: 171.0 * 1.660_539_066_60e-27,
            trap_frequency: 2.0 * std::f64::consts::PI * 1.0e6,
            ionization_degree: 1.0,
            vacuum_permittivity: 8.854_187_8128e-12,
            electron_charge: 1.602_176_634e-19,
        }
    }
}

impl TrapParameters {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        let all_positive = [
            self.ion_mass,
            self.trap_frequency,
            self.ionization_degree,
            self.vacuum_permittivity,
            self.electron_charge,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if all_positive {
            Ok(())
        } else {
            Err(LocalizationError::InvalidInput(
                "trap parameters must all be strictly positive".into(),
            ))
        }
    }

    /// ℓ = (Z²e² / (4π ε₀ M ν²))^{1/3}, the natural length of the chain.
    pub fn length_scale(&self) -> f64 {
        let num = self.ionization_degree.powi(2) * self.electron_charge.powi(2);
        let den = 4.0
            * std::f64::consts::PI
            * self.vacuum_permittivity
            * self.ion_mass
            * self.trap_frequency.powi(2);
        (num / den).cbrt()
    }
}

const EQUILIBRIUM_TOL: f64 = 1e-10;
const EQUILIBRIUM_MAX_ITER: usize = 200;

/// Dimensionless potential Σ u²/2 + Σ_{n<m} 1/|u_m − u_n|; +∞ unless strictly ordered.
pub fn chain_potential(u: &[f64]) -> f64 {
    let mut v = 0.5 * u.iter().map(|x| x * x).sum::<f64>();
    for m in 0..u.len() {
        for n in 0..m {
            let d = u[m] - u[n];
            if d <= 0.0 {
                return f64::INFINITY;
            }
            v += 1.0 / d;
        }
    }
    v
}

/// ∂V/∂u_m = u_m − Σ_{n<m} (u_m−u_n)⁻² + Σ_{n>m} (u_m−u_n)⁻².
pub fn chain_gradient(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|m| {
            let mut g = u[m];
            for k in 0..n {
                if k == m {
                    continue;
                }
                let d = u[m] - u[k];
                g -= d.signum() / (d * d);
            }
            g
        })
        .collect()
}

fn chain_hessian(u: &[f64]) -> DMatrix<f64> {
    let n = u.len();
    let mut h = DMatrix::zeros(n, n);
    for m in 0..n {
        h[(m, m)] = 1.0;
        for k in 0..n {
            if k == m {
                continue;
            }
            let c = 2.0 / (u[m] - u[k]).abs().powi(3);
            h[(m, m)] += c;
            h[(m, k)] = -c;
        }
    }
    h
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Dimensionless equilibrium positions u_m of an `n_ions` chain, ascending.
pub fn equilibrium_positions_dimensionless(n_ions: usize) -> Result<Vec<f64>, LocalizationError> {
    if n_ions == 0 {
        return Err(LocalizationError::InvalidInput("n_ions must be at least 1".into()));
    }
    if n_ions == 1 {
        return Ok(vec![0.0]);
    }
    let half = n_ions as f64 / 2.0;
    let mut u: Vec<f64> = (0..n_ions)
        .map(|i| 0.8 * (-half + 2.0 * half * i as f64 / (n_ions - 1) as f64))
        .collect();
    let mut grad = chain_gradient(&u);
    for _ in 0..EQUILIBRIUM_MAX_ITER {
        if max_norm(&grad) < EQUILIBRIUM_TOL {
            return Ok(u);
        }
        let h = chain_hessian(&u);
        let g = DVector::from_column_slice(&grad);
        let step = h
            .cholesky()
            .map(|c| c.solve(&g))
            .unwrap_or_else(|| g.clone());
        let v0 = chain_potential(&u);
        let g0 = max_norm(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(x, s)| x - t * s).collect();
            let v = chain_potential(&trial);
            // near the minimum V is flat to rounding, so a smaller gradient also counts
            if v < v0 || (v.is_finite() && max_norm(&chain_gradient(&trial)) < g0) {
                u = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad = chain_gradient(&u);
        if !accepted {
            break;
        }
    }
    let residual = max_norm(&grad);
    if residual < EQUILIBRIUM_TOL {
        Ok(u)
    } else {
        Err(LocalizationError::NonConvergence {
            iterations: EQUILIBRIUM_MAX_ITER,
            residual,
        })
    }
}

/// Equilibrium axial positions in meters, ascending and symmetric about 0.
pub fn equilibrium_positions(n_ions: usize, trap: &TrapParameters) -> Result<Vec<f64>, LocalizationError> {
    trap.validate()?;
    let scale = trap.length_scale();
    Ok(equilibrium_positions_dimensionless(n_ions)?
        .into_iter()
        .map(|u| u * scale)
        .collect())
}

/// Fitted ion chain in image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonChainLayout {
    centers: Vec<(f64, f64)>,
    #[serde(rename = "m")]
    slope: f64,
    #[serde(rename = "b")]
    intercept: f64,
}

impl IonChainLayout {
    /// Sorts the centers by x and fits the chain line. A single ion gets a
    /// horizontal line through its center.
    pub fn from_centers(mut centers: Vec<(f64, f64)>) -> Result<Self, LocalizationError> {
        if centers.is_empty() {
            return Err(LocalizationError::InvalidInput("layout needs at least one center".into()));
        }
        if centers.iter().any(|c| !c.0.is_finite() || !c.1.is_finite()) {
            return Err(LocalizationError::InvalidInput("non-finite center".into()));
        }
        centers.sort_by(|a, b| a.0.total_cmp(&b.0));
        if centers.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(LocalizationError::InvalidInput(
                "ion centers must have strictly increasing x".into(),
            ));
        }
        let (slope, intercept) = if centers.len() == 1 {
            (0.0, centers[0].1)
        } else {
            fit_line(&centers)?
        };
        Ok(Self {
            centers,
            slope,
            intercept,
        })
    }

    pub fn centers(&self) -> &[(f64, f64)] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn line_y(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LocalizationError> {
        let path = path.as_ref();
        let err = |reason: String| LocalizationError::LayoutFile {
            path: path.display().to_string(),
            reason,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LocalizationError> {
        let path = path.as_ref();
        let err = |reason: String| LocalizationError::LayoutFile {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let raw: IonChainLayout = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let mut checked = IonChainLayout::from_centers(raw.centers)?;
        // keep the stored line; it may come from a different fit
        checked.slope = raw.slope;
        checked.intercept = raw.intercept;
        Ok(checked)
    }
}

/// Ordinary least squares of y on x.
pub fn fit_line(centers: &[(f64, f64)]) -> Result<(f64, f64), LocalizationError> {
    if centers.len() < 2 {
        return Err(LocalizationError::DegenerateFit("need at least two centers".into()));
    }
    let n = centers.len() as f64;
    let mx = centers.iter().map(|c| c.0).sum::<f64>() / n;
    let my = centers.iter().map(|c| c.1).sum::<f64>() / n;
    let sxx: f64 = centers.iter().map(|c| (c.0 - mx).powi(2)).sum();
    let sxy: f64 = centers.iter().map(|c| (c.0 - mx) * (c.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(LocalizationError::DegenerateFit("all x coordinates are equal".into()));
    }
    let m = sxy / sxx;
    Ok((m, my - m * mx))
}

pub const DEFAULT_BACKGROUND_PERCENTILE: f64 = 90.0;
pub const DEFAULT_BOX_WIDTH: usize = 16;
pub const DEFAULT_BOX_HEIGHT: usize = 16;

/// Fraction of the way from the background level to the brightest mean
/// pixel that a pixel must exceed to count as ion signal.
pub const SIGNAL_FRACTION: f64 = 0.1;

/// Find `n_ions` ion centers from a stack of frames.
///
/// The `background_percentile` intensity of the mean image sets the
/// background level; pixels more than [`SIGNAL_FRACTION`] of the way from
/// there to the peak are clustered by k-means, weighted by their excess
/// over the background.
pub fn locate_ions(
    frames: &[Frame],
    n_ions: usize,
    background_percentile: f64,
    seed: u64,
) -> Result<IonChainLayout, LocalizationError> {
    let first = frames
        .first()
        .ok_or_else(|| LocalizationError::InvalidInput("no frames".into()))?;
    if n_ions == 0 {
        return Err(LocalizationError::InvalidInput("n_ions must be at least 1".into()));
    }
    if !(0.0..=100.0).contains(&background_percentile) {
        return Err(LocalizationError::InvalidInput(
            "background percentile must lie in [0, 100]".into(),
        ));
    }
    let (w, h) = (first.width(), first.height());
    if frames.iter().any(|f| f.width() != w || f.height() != h) {
        return Err(LocalizationError::InvalidInput("frames differ in size".into()));
    }
    // integer sums keep the mean image independent of frame order
    let sums = frames
        .par_iter()
        .fold(
            || vec![0u64; w * h],
            |mut acc, f| {
                for (a, &p) in acc.iter_mut().zip(f.pixels()) {
                    *a += p as u64;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; w * h],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let mean: Vec<f64> = sums.iter().map(|&s| s as f64 / frames.len() as f64).collect();

    let mut sorted = mean.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((background_percentile / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    let background = sorted[rank];
    let peak = sorted[sorted.len() - 1];
    let level = background + SIGNAL_FRACTION * (peak - background);

    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (idx, &v) in mean.iter().enumerate() {
        if v > level {
            points.push(vec![(idx % w) as f64, (idx / w) as f64]);
            weights.push(v - background);
        }
    }
    if points.is_empty() {
        return Err(LocalizationError::NoSignal);
    }
    if points.len() < n_ions {
        return Err(LocalizationError::NotEnoughSignal {
            found: points.len(),
            n_ions,
        });
    }
    let fit = kmeans(&points, Some(&weights), n_ions, seed, 300, 1e-9)?;
    IonChainLayout::from_centers(fit.centroids.iter().map(|c| (c[0], c[1])).collect())
}

/// Per-ion region of interest, already clipped to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    /// Pixel the box is centered on (x from the ion, y snapped to the chain line).
    pub center: (i64, i64),
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl AnchorBox {
    pub fn x1(&self) -> usize {
        self.x0 + self.width - 1
    }

    pub fn y1(&self) -> usize {
        self.y0 + self.height - 1
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

fn clipped_span(center: i64, size: usize, limit: usize) -> Option<(usize, usize)> {
    let lo = center - (size / 2) as i64;
    let hi = lo + size as i64 - 1;
    let lo = lo.max(0);
    let hi = hi.min(limit as i64 - 1);
    (lo <= hi).then(|| (lo as usize, (hi - lo + 1) as usize))
}

/// One box per ion, ordered by x.
pub fn anchor_boxes(
    layout: &IonChainLayout,
    box_width: usize,
    box_height: usize,
    frame_dims: (usize, usize),
) -> Vec<AnchorBox> {
    let (fw, fh) = frame_dims;
    let (bw, bh) = (box_width.max(1), box_height.max(1));
    layout
        .centers()
        .iter()
        .map(|&(x, _)| {
            let cx = x.round() as i64;
            let cy = layout.line_y(x).round() as i64;
            // a center outside the frame still yields a 1-pixel box on the nearest edge
            let (x0, width) = clipped_span(cx, bw, fw)
                .unwrap_or_else(|| ((cx.clamp(0, fw as i64 - 1)) as usize, 1));
            let (y0, height) = clipped_span(cy, bh, fh)
                .unwrap_or_else(|| ((cy.clamp(0, fh as i64 - 1)) as usize, 1));
            AnchorBox {
                center: (cx, cy),
                x0,
                y0,
                width,
                height,
            }
        })
        .collect()
}
