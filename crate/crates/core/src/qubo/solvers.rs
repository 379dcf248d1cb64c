//! Exact enumeration, simulated annealing and a mean-field amplitude solver.
//!
//! Every solver optimizes in the problem's own sense and reports the value
//! of the assignment it returns, recomputed from scratch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{QuboError, QuboProblem};
use crate::rng::{substream, DOMAIN_ANNEAL, DOMAIN_MEAN_FIELD};

pub const MAX_EXHAUSTIVE_VARS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub x: Vec<u8>,
    pub value: f64,
}

/// Dense view used by the local-search solvers. `g = sign · value` is
/// always maximized.
struct Dense {
    n: usize,
    w: Vec<f64>,
    d: Vec<f64>,
    sign: f64,
    /// Scale for "equal within rounding" comparisons.
    eps: f64,
}

impl Dense {
    fn new(q: &QuboProblem) -> Self {
        let (w, d) = q.dense();
        let mag = q.offset().abs() + q.entries().map(|e| e.2.abs()).sum::<f64>();
        Self {
            n: q.n(),
            w,
            d,
            sign: q.sense().sign(),
            eps: 1e-9 * (1.0 + mag),
        }
    }

    fn fields(&self, x: &[u8]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.w[i * self.n..(i + 1) * self.n];
                row.iter().zip(x).filter(|(_, &b)| b != 0).map(|(v, _)| v).sum()
            })
            .collect()
    }

    /// Change of `g` when bit `i` flips.
    #[inline]
    fn delta(&self, x: &[u8], f: &[f64], i: usize) -> f64 {
        let dv = self.d[i] + f[i];
        self.sign * if x[i] == 0 { dv } else { -dv }
    }

    #[inline]
    fn flip(&self, x: &mut [u8], f: &mut [f64], i: usize) {
        let s = if x[i] == 0 { 1.0 } else { -1.0 };
        x[i] ^= 1;
        let row = &self.w[i * self.n..(i + 1) * self.n];
        for (fj, wij) in f.iter_mut().zip(row) {
            *fj += s * wij;
        }
    }

    fn polish(&self, x: &mut [u8]) {
        let mut f = self.fields(x);
        loop {
            let mut best = (usize::MAX, self.eps);
            for i in 0..self.n {
                let dg = self.delta(x, &f, i);
                if dg > best.1 {
                    best = (i, dg);
                }
            }
            if best.0 == usize::MAX {
                return;
            }
            self.flip(x, &mut f, best.0);
        }
    }
}

/// Steepest single-bit ascent (in the problem's sense) until no flip helps.
pub fn greedy_polish(q: &QuboProblem, x: &mut [u8]) -> Result<(), QuboError> {
    if x.len() != q.n() {
        return Err(QuboError::LengthMismatch {
            expected: q.n(),
            got: x.len(),
        });
    }
    Dense::new(q).polish(x);
    Ok(())
}

fn finish(q: &QuboProblem, x: Vec<u8>) -> Solution {
    let value = q.value_unchecked(&x);
    Solution { x, value }
}

/// Global optimum by Gray-code enumeration. Assignments whose values agree
/// to rounding are tied, and the lexicographically smallest one wins.
pub fn solve_exhaustive(q: &QuboProblem) -> Result<Solution, QuboError> {
    let n = q.n();
    if n > MAX_EXHAUSTIVE_VARS {
        return Err(QuboError::TooLarge {
            n,
            max: MAX_EXHAUSTIVE_VARS,
        });
    }
    if n == 0 {
        return Ok(Solution {
            x: vec![],
            value: q.offset(),
        });
    }
    let dense = Dense::new(q);
    // x_0 is the most significant position for the tie order
    let key = |mask: u64| mask.reverse_bits() >> (64 - n);
    let mut x = vec![0u8; n];
    let mut f = vec![0.0; n];
    let mut g = dense.sign * q.offset();
    let mut mask = 0u64;
    let (mut best_g, mut best_mask) = (g, 0u64);
    for step in 1u64..1 << n {
        let i = step.trailing_zeros() as usize;
        g += dense.delta(&x, &f, i);
        dense.flip(&mut x, &mut f, i);
        mask ^= 1 << i;
        if step % 4096 == 0 {
            f = dense.fields(&x);
            g = dense.sign * q.value_unchecked(&x);
        }
        if g > best_g + dense.eps || (g >= best_g - dense.eps && key(mask) < key(best_mask)) {
            best_g = g.max(best_g);
            best_mask = mask;
        }
    }
    let x: Vec<u8> = (0..n).map(|i| ((best_mask >> i) & 1) as u8).collect();
    Ok(finish(q, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    Random,
    Zeros,
}

/// Geometric cooling from `temp_start` to `temp_end` over `sweeps` sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetropolisSchedule {
    pub temp_start: f64,
    pub temp_end: f64,
    pub sweeps: usize,
    pub init: InitialState,
}

impl Default for MetropolisSchedule {
    fn default() -> Self {
        Self {
            temp_start: 10.0,
            temp_end: 0.01,
            sweeps: 2000,
            init: InitialState::Random,
        }
    }
}

impl MetropolisSchedule {
    pub fn validate(&self) -> Result<(), QuboError> {
        if self.sweeps == 0 {
            return Err(QuboError::InvalidSchedule("sweeps must be at least 1".into()));
        }
        if !(self.temp_end > 0.0 && self.temp_start >= self.temp_end && self.temp_start.is_finite()) {
            return Err(QuboError::InvalidSchedule(format!(
                "need temp_start >= temp_end > 0, got {} -> {}",
                self.temp_start, self.temp_end
            )));
        }
        Ok(())
    }

    pub fn temperature(&self, sweep: usize) -> f64 {
        if self.sweeps == 1 {
            return self.temp_end;
        }
        let t = sweep as f64 / (self.sweeps - 1) as f64;
        self.temp_start * (self.temp_end / self.temp_start).powf(t)
    }
}

fn anneal_once(q: &QuboProblem, dense: &Dense, schedule: &MetropolisSchedule, seed: u64, restart: usize) -> Solution {
    let n = dense.n;
    let mut rng = substream(seed, DOMAIN_ANNEAL, restart as u64);
    let mut x: Vec<u8> = match schedule.init {
        InitialState::Zeros => vec![0; n],
        InitialState::Random => (0..n).map(|_| rng.random_range(0..2)).collect(),
    };
    let mut f = dense.fields(&x);
    let mut g = dense.sign * q.value_unchecked(&x);
    let (mut best_g, mut best_x) = (g, x.clone());
    for sweep in 0..schedule.sweeps {
        let temp = schedule.temperature(sweep);
        for i in 0..n {
            let dg = dense.delta(&x, &f, i);
            if dg >= 0.0 || rng.random::<f64>() < (dg / temp).exp() {
                dense.flip(&mut x, &mut f, i);
                g += dg;
            }
        }
        if g > best_g {
            best_g = g;
            best_x.copy_from_slice(&x);
        }
    }
    dense.polish(&mut best_x);
    finish(q, best_x)
}

/// Best of `restarts` independent Metropolis runs, each followed by a
/// greedy polish. Restarts run in parallel on their own random streams;
/// the result depends only on `seed`.
pub fn solve_sim_anneal(
    q: &QuboProblem,
    schedule: &MetropolisSchedule,
    restarts: usize,
    seed: u64,
) -> Result<Solution, QuboError> {
    schedule.validate()?;
    if restarts == 0 {
        return Err(QuboError::InvalidSchedule("restarts must be at least 1".into()));
    }
    let dense = Dense::new(q);
    let runs: Vec<Solution> = (0..restarts)
        .into_par_iter()
        .map(|r| anneal_once(q, &dense, schedule, seed, r))
        .collect();
    Ok(pick_best(q, runs))
}

fn pick_best(q: &QuboProblem, runs: Vec<Solution>) -> Solution {
    let sign = q.sense().sign();
    runs.into_iter()
        .reduce(|a, b| if sign * b.value > sign * a.value { b } else { a })
        .expect("at least one run")
}

/// Pump ramp and integration settings for [`solve_mean_field`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanFieldSchedule {
    pub steps: usize,
    pub step_size: f64,
    pub pump_start: f64,
    pub pump_end: f64,
    /// Standard deviation of the Gaussian kick added every step.
    pub noise: f64,
}

impl Default for MeanFieldSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            step_size: 0.05,
            pump_start: 0.0,
            pump_end: 1.0,
            noise: 0.01,
        }
    }
}

impl MeanFieldSchedule {
    pub fn validate(&self) -> Result<(), QuboError> {
        if self.steps == 0 {
            return Err(QuboError::InvalidSchedule("steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(QuboError::InvalidSchedule("step_size must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.pump_start.is_finite() && self.pump_end.is_finite()) {
            return Err(QuboError::InvalidSchedule("noise must be >= 0 and pumps finite".into()));
        }
        Ok(())
    }
}

/// Amplitudes `a ∈ [−1,1]ⁿ` (with `x = (1+a)/2`) follow the normalized
/// gradient of the objective against a loss `(p − 1)·a`, where the pump `p`
/// ramps linearly; seeded Gaussian noise is added each step. Bits are read
/// from the signs (`a ≤ 0 → 0`) and then greedily polished.
pub fn solve_mean_field(q: &QuboProblem, schedule: &MeanFieldSchedule, seed: u64) -> Result<Solution, QuboError> {
    schedule.validate()?;
    let dense = Dense::new(q);
    let n = dense.n;
    let mut rng = substream(seed, DOMAIN_MEAN_FIELD, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // gradient components bounded by 1
    let scale = (0..n)
        .map(|i| 0.5 * (dense.d[i].abs() + dense.w[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>()))
        .fold(0.0, f64::max);
    let zeta = if scale > 0.0 { 1.0 / scale } else { 0.0 };
    let mut a = vec![0.0; n];
    let mut grad = vec![0.0; n];
    for step in 0..schedule.steps {
        let t = if schedule.steps == 1 {
            1.0
        } else {
            step as f64 / (schedule.steps - 1) as f64
        };
        let pump = schedule.pump_start + (schedule.pump_end - schedule.pump_start) * t;
        for i in 0..n {
            let row = &dense.w[i * n..(i + 1) * n];
            let field: f64 = row.iter().zip(&a).map(|(w, aj)| w * 0.5 * (1.0 + aj)).sum();
            grad[i] = dense.sign * 0.5 * (dense.d[i] + field);
        }
        for i in 0..n {
            let kick = if schedule.noise > 0.0 {
                schedule.noise * normal.sample(&mut rng)
            } else {
                0.0
            };
            a[i] = (a[i] + schedule.step_size * ((pump - 1.0) * a[i] + zeta * grad[i]) + kick).clamp(-1.0, 1.0);
        }
    }
    let mut x: Vec<u8> = a.iter().map(|&v| (v > 0.0) as u8).collect();
    dense.polish(&mut x);
    Ok(finish(q, x))
}

/// Solver choice shared by the classifiers and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SolverConfig {
    Exhaustive,
    Anneal {
        #[serde(default)]
        schedule: MetropolisSchedule,
        #[serde(default = "default_restarts")]
        restarts: usize,
    },
    #[serde(alias = "mean_field")]
    MeanField {
        #[serde(default)]
        schedule: MeanFieldSchedule,
    },
}

fn default_restarts() -> usize {
    8
}

impl SolverConfig {
    pub fn anneal() -> Self {
        SolverConfig::Anneal {
            schedule: MetropolisSchedule::default(),
            restarts: default_restarts(),
        }
    }

    pub fn mean_field() -> Self {
        SolverConfig::MeanField {
            schedule: MeanFieldSchedule::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverConfig::Exhaustive => "exhaustive",
            SolverConfig::Anneal { .. } => "anneal",
            SolverConfig::MeanField { .. } => "meanfield",
        }
    }

    pub fn solve(&self, q: &QuboProblem, seed: u64) -> Result<Solution, QuboError> {
        match self {
            SolverConfig::Exhaustive => solve_exhaustive(q),
            SolverConfig::Anneal { schedule, restarts } => solve_sim_anneal(q, schedule, *restarts, seed),
            SolverConfig::MeanField { schedule } => solve_mean_field(q, schedule, seed),
        }
    }
}

impl std::str::FromStr for SolverConfig {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exhaustive" => Ok(SolverConfig::Exhaustive),
            "anneal" => Ok(SolverConfig::anneal()),
            "meanfield" | "mean_field" => Ok(SolverConfig::mean_field()),
            other => Err(format!("unknown solver '{other}' (expected exhaustive, anneal or meanfield)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{all_assignments, Sense};
    use super::*;

    fn quant(sigma: f64, eps: f64) -> QuboProblem {
        let mut q = QuboProblem::new(2, Sense::Maximize);
        q.set(0, 0, sigma).unwrap();
        q.set(1, 1, -eps).unwrap();
        q.set(1, 0, (sigma + eps) / 2.0).unwrap();
        q
    }

    fn random_qubo(n: usize, seed: u64, sense: Sense) -> QuboProblem {
        let mut rng = substream(seed, 99, 0);
        let mut q = QuboProblem::new(n, sense);
        for i in 0..n {
            for j in 0..=i {
                q.set(i, j, rng.random_range(-1.0..1.0)).unwrap();
            }
        }
        q
    }

    /// First maximizer (of sign · value) in lexicographic order.
    fn brute(q: &QuboProblem) -> Solution {
        let s = q.sense().sign();
        let mut best: Option<Solution> = None;
        for x in all_assignments(q.n()) {
            let v = q.value(&x).unwrap();
            if best.as_ref().is_none_or(|b| s * v > s * b.value + 1e-9) {
                best = Some(Solution { x, value: v });
            }
        }
        best.unwrap()
    }

    fn is_local_opt(q: &QuboProblem, x: &[u8]) -> bool {
        let s = q.sense().sign();
        let v = q.value(x).unwrap();
        (0..x.len()).all(|i| {
            let mut y = x.to_vec();
            y[i] ^= 1;
            s * q.value(&y).unwrap() <= s * v + 1e-9
        })
    }

    #[test]
    fn exhaustive_quant_instances() {
        let s = solve_exhaustive(&quant(200.0, 152.8)).unwrap();
        assert_eq!(s.x, vec![1, 1]);
        assert!((s.value - 223.6).abs() < 1e-12);
        let s = solve_exhaustive(&quant(100.0, 152.8)).unwrap();
        assert_eq!(s.x, vec![1, 0]);
        assert_eq!(s.value, 100.0);
        let s = solve_exhaustive(&quant(100.0, 100.0)).unwrap();
        assert_eq!(s.x, vec![1, 0]);
    }

    #[test]
    fn exhaustive_zero_problem_takes_all_zeros() {
        let s = solve_exhaustive(&QuboProblem::new(6, Sense::Maximize)).unwrap();
        assert_eq!(s.x, vec![0; 6]);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn exhaustive_matches_brute_force() {
        for n in 1..=10 {
            for sense in [Sense::Maximize, Sense::Minimize] {
                let q = random_qubo(n, n as u64, sense);
                let a = solve_exhaustive(&q).unwrap();
                let b = brute(&q);
                assert_eq!(a.x, b.x);
                assert!((a.value - b.value).abs() < 1e-12);
            }
        }
        // integer coefficients force ties; the first maximizer must win
        for seed in 0..20 {
            let mut rng = substream(seed, 7, 0);
            let mut q = QuboProblem::new(6, Sense::Maximize);
            for i in 0..6 {
                for j in 0..=i {
                    q.set(i, j, rng.random_range(-1..=1) as f64).unwrap();
                }
            }
            assert_eq!(solve_exhaustive(&q).unwrap().x, brute(&q).x);
        }
    }

    #[test]
    fn exhaustive_size_limit() {
        let q = QuboProblem::new(25, Sense::Maximize);
        assert!(matches!(solve_exhaustive(&q), Err(QuboError::TooLarge { n: 25, .. })));
    }

    #[test]
    fn anneal_matches_exhaustive_on_random_instances() {
        let mut hits = 0;
        let total = 40;
        for seed in 0..total {
            let q = random_qubo(16, 1000 + seed, Sense::Maximize);
            let exact = solve_exhaustive(&q).unwrap();
            let sa = solve_sim_anneal(&q, &MetropolisSchedule::default(), 8, seed).unwrap();
            assert!(sa.value <= exact.value + 1e-9);
            assert_eq!(sa.value, q.value(&sa.x).unwrap());
            if (sa.value - exact.value).abs() < 1e-9 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn anneal_respects_minimize() {
        let q = random_qubo(10, 5, Sense::Minimize);
        let sa = solve_sim_anneal(&q, &MetropolisSchedule::default(), 4, 1).unwrap();
        assert!((sa.value - solve_exhaustive(&q).unwrap().value).abs() < 1e-9);
    }

    #[test]
    fn cold_single_sweep_reaches_local_optimum() {
        let schedule = MetropolisSchedule {
            temp_start: 1e-9,
            temp_end: 1e-9,
            sweeps: 1,
            init: InitialState::Zeros,
        };
        for seed in 0..10 {
            let q = random_qubo(12, 300 + seed, Sense::Maximize);
            let s = solve_sim_anneal(&q, &schedule, 1, seed).unwrap();
            assert!(is_local_opt(&q, &s.x));
        }
    }

    #[test]
    fn anneal_is_deterministic_across_thread_counts() {
        let q = random_qubo(14, 77, Sense::Maximize);
        let a = solve_sim_anneal(&q, &MetropolisSchedule::default(), 6, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| solve_sim_anneal(&q, &MetropolisSchedule::default(), 6, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mean_field_quality() {
        let runs = 50;
        let mut close = 0;
        for seed in 0..runs {
            let q = random_qubo(12, 500 + seed, Sense::Maximize);
            let exact = solve_exhaustive(&q).unwrap();
            let mf = solve_mean_field(&q, &MeanFieldSchedule::default(), seed).unwrap();
            assert!(mf.value <= exact.value + 1e-9);
            assert_eq!(mf.value, q.value(&mf.x).unwrap());
            if exact.value - mf.value <= 0.02 * exact.value.abs() {
                close += 1;
            }
        }
        assert!(close as f64 >= 0.9 * runs as f64, "{close}/{runs}");
    }

    #[test]
    fn heuristics_solve_quant_instances() {
        let mut rng = substream(1, 2, 3);
        for k in 0..500 {
            let q = quant(rng.random_range(0.0..255.0), rng.random_range(0.0..255.0));
            let exact = solve_exhaustive(&q).unwrap();
            assert_eq!(solve_sim_anneal(&q, &MetropolisSchedule::default(), 2, k).unwrap().x, exact.x);
            assert_eq!(solve_mean_field(&q, &MeanFieldSchedule::default(), k).unwrap().x, exact.x);
        }
    }

    #[test]
    fn trivial_problem_returns_offset() {
        let mut q = QuboProblem::new(5, Sense::Maximize);
        q.set_offset(2.5);
        assert_eq!(solve_mean_field(&q, &MeanFieldSchedule::default(), 0).unwrap().value, 2.5);
        assert_eq!(solve_sim_anneal(&q, &MetropolisSchedule::default(), 2, 0).unwrap().value, 2.5);
    }

    #[test]
    fn schedules_are_validated() {
        let bad = MetropolisSchedule {
            temp_start: 0.01,
            temp_end: 1.0,
            ..Default::default()
        };
        assert!(solve_sim_anneal(&quant(1.0, 1.0), &bad, 1, 0).is_err());
        let bad = MeanFieldSchedule {
            steps: 0,
            ..Default::default()
        };
        assert!(solve_mean_field(&quant(1.0, 1.0), &bad, 0).is_err());
        let s = MetropolisSchedule::default();
        assert_eq!(s.temperature(0), 10.0);
        assert!((s.temperature(1999) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn solver_config_parses_and_serializes() {
        assert_eq!("exhaustive".parse::<SolverConfig>().unwrap(), SolverConfig::Exhaustive);
        assert_eq!("meanfield".parse::<SolverConfig>().unwrap().name(), "meanfield");
        assert!("dwave".parse::<SolverConfig>().unwrap_err().contains("dwave"));
        let json = serde_json::to_string(&SolverConfig::anneal()).unwrap();
        let back: SolverConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SolverConfig::anneal());
        let short: SolverConfig = serde_json::from_str(r#"{"method":"anneal"}"#).unwrap();
        assert_eq!(short, SolverConfig::anneal());
    }
}
