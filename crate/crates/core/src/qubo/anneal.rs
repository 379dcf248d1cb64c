//! State-vector simulation of a transverse-field anneal for a few spins.
//!
//! H(t) = (1 − t/T)·H₀ + (t/T)·H_P with H₀ = −Σσˣ_i and H_P the Ising
//! energy, diagonal in the computational basis (basis bit i set ↔ s_i = +1).
//! The state starts in the ground state of H₀ and is integrated with RK4.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{IsingModel, QuboError};

pub const MAX_EXACT_SPINS: usize = 10;
pub const DEFAULT_DT: f64 = 0.01;
const MAX_DRIFT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealOutcome {
    /// Probability mass on the ground-state manifold of H_P at t = T.
    pub success_probability: f64,
    /// Largest |‖ψ‖² − 1| seen during the evolution.
    pub norm_drift: f64,
    pub steps: usize,
    /// Number of degenerate ground states of H_P.
    pub ground_states: usize,
}

fn apply_h(psi: &[Complex64], diag: &[f64], n: usize, a: f64, b: f64, out: &mut [Complex64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let mut flip = Complex64::new(0.0, 0.0);
        for i in 0..n {
            flip += psi[k ^ (1 << i)];
        }
        *o = -a * flip + b * diag[k] * psi[k];
    }
}

/// dψ/dt = −i H(t) ψ
fn derivative(psi: &[Complex64], diag: &[f64], n: usize, t: f64, total: f64, out: &mut [Complex64]) {
    let s = t / total;
    apply_h(psi, diag, n, 1.0 - s, s, out);
    for o in out.iter_mut() {
        *o *= Complex64::new(0.0, -1.0);
    }
}

pub fn anneal_exact_small(model: &IsingModel, total_time: f64, dt: f64) -> Result<AnnealOutcome, QuboError> {
    let n = model.n();
    if n > MAX_EXACT_SPINS {
        return Err(QuboError::TooLarge {
            n,
            max: MAX_EXACT_SPINS,
        });
    }
    if !(total_time >= 0.0 && total_time.is_finite()) {
        return Err(QuboError::InvalidSchedule("total time must be >= 0".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(QuboError::InvalidSchedule("dt must be positive".into()));
    }
    let dim = 1usize << n;
    let diag: Vec<f64> = (0..dim)
        .map(|k| {
            let s: Vec<i8> = (0..n).map(|i| if (k >> i) & 1 == 1 { 1 } else { -1 }).collect();
            model.energy_unchecked(&s)
        })
        .collect();
    let e_min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + e_min.abs());
    let ground: Vec<usize> = (0..dim).filter(|&k| diag[k] <= e_min + tol).collect();

    let amp = 1.0 / (dim as f64).sqrt();
    let mut psi = vec![Complex64::new(amp, 0.0); dim];
    let steps = if total_time == 0.0 {
        0
    } else {
        (total_time / dt).ceil() as usize
    };
    let h = if steps > 0 { total_time / steps as f64 } else { 0.0 };
    let mut k1 = vec![Complex64::default(); dim];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tmp = k1.clone();
    let mut drift: f64 = 0.0;
    for step in 0..steps {
        let t = step as f64 * h;
        derivative(&psi, &diag, n, t, total_time, &mut k1);
        for k in 0..dim {
            tmp[k] = psi[k] + 0.5 * h * k1[k];
        }
        derivative(&tmp, &diag, n, t + 0.5 * h, total_time, &mut k2);
        for k in 0..dim {
            tmp[k] = psi[k] + 0.5 * h * k2[k];
        }
        derivative(&tmp, &diag, n, t + 0.5 * h, total_time, &mut k3);
        for k in 0..dim {
            tmp[k] = psi[k] + h * k3[k];
        }
        derivative(&tmp, &diag, n, t + h, total_time, &mut k4);
        for k in 0..dim {
            psi[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
        let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
        drift = drift.max((norm - 1.0).abs());
        if drift > MAX_DRIFT {
            return Err(QuboError::NormDrift { drift });
        }
    }
    Ok(AnnealOutcome {
        success_probability: ground.iter().map(|&k| psi[k].norm_sqr()).sum(),
        norm_drift: drift,
        steps,
        ground_states: ground.len(),
    })
}
