//! QUBO and Ising problems, the transforms between them, a plain-text
//! file format, and solvers.
//!
//! A QUBO objective is `Σ_i Σ_{j≤i} Q_ij x_i x_j + C` over `x ∈ {0,1}ⁿ`;
//! the Ising energy is `−Σ h_i s_i − Σ_{i<j} J_ij s_i s_j` over `s ∈ {±1}ⁿ`.
//! The two are linked by `s = 2x − 1`, so `x_i = 1` means spin up.

mod anneal;
mod solvers;

pub use anneal::{anneal_exact_small, AnnealOutcome, DEFAULT_DT, MAX_EXACT_SPINS};
pub use solvers::{
    greedy_polish, solve_exhaustive, solve_mean_field, solve_sim_anneal, InitialState,
    MeanFieldSchedule, MetropolisSchedule, Solution, SolverConfig, MAX_EXHAUSTIVE_VARS,
};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuboError {
    #[error("assignment has length {got}, problem has {expected} variables")]
    LengthMismatch { expected: usize, got: usize },
    #[error("index ({i}, {j}) out of range for {n} variables")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("coupling on the diagonal ({0}, {0})")]
    SelfCoupling(usize),
    #[error("non-finite coefficient")]
    NonFinite,
    #[error("{n} variables exceed the limit of {max} for this solver")]
    TooLarge { n: usize, max: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("norm drift {drift:e} exceeds 1e-4; reduce dt")]
    NormDrift { drift: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Maximize,
    Minimize,
}

impl Sense {
    /// +1 for maximize, −1 for minimize: solvers maximize `sign · value`.
    pub fn sign(self) -> f64 {
        match self {
            Sense::Maximize => 1.0,
            Sense::Minimize => -1.0,
        }
    }
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sense::Maximize => "maximize",
            Sense::Minimize => "minimize",
        })
    }
}

impl FromStr for Sense {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "maximize" | "max" => Ok(Sense::Maximize),
            "minimize" | "min" => Ok(Sense::Minimize),
            other => Err(format!("unknown sense '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsingModel {
    n: usize,
    h: Vec<f64>,
    /// Keys satisfy `i < j`.
    j: BTreeMap<(usize, usize), f64>,
}

impl IsingModel {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            h: vec![0.0; n],
            j: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn couplings(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.j
    }

    pub fn set_field(&mut self, i: usize, value: f64) -> Result<(), QuboError> {
        if i >= self.n {
            return Err(QuboError::IndexOutOfRange { i, j: i, n: self.n });
        }
        if !value.is_finite() {
            return Err(QuboError::NonFinite);
        }
        self.h[i] = value;
        Ok(())
    }

    /// Order of `i` and `j` does not matter; a zero value removes the coupling.
    pub fn set_coupling(&mut self, i: usize, j: usize, value: f64) -> Result<(), QuboError> {
        if i >= self.n || j >= self.n {
            return Err(QuboError::IndexOutOfRange { i, j, n: self.n });
        }
        if i == j {
            return Err(QuboError::SelfCoupling(i));
        }
        if !value.is_finite() {
            return Err(QuboError::NonFinite);
        }
        let key = (i.min(j), i.max(j));
        if value == 0.0 {
            self.j.remove(&key);
        } else {
            self.j.insert(key, value);
        }
        Ok(())
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.j.get(&(i.min(j), i.max(j))).copied().unwrap_or(0.0)
    }

    pub fn energy(&self, s: &[i8]) -> Result<f64, QuboError> {
        if s.len() != self.n {
            return Err(QuboError::LengthMismatch {
                expected: self.n,
                got: s.len(),
            });
        }
        Ok(self.energy_unchecked(s))
    }

    pub(crate) fn energy_unchecked(&self, s: &[i8]) -> f64 {
        let field: f64 = self.h.iter().zip(s).map(|(h, &si)| h * si as f64).sum();
        let pair: f64 = self
            .j
            .iter()
            .map(|(&(i, j), v)| v * (s[i] * s[j]) as f64)
            .sum();
        -field - pair
    }
}

/// Spins for a bit assignment: `s = 2x − 1`.
pub fn spins_from_bits(x: &[u8]) -> Vec<i8> {
    x.iter().map(|&b| if b != 0 { 1 } else { -1 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuboProblem {
    n: usize,
    /// Row-major lower triangle: `(i, j)` with `j ≤ i` lives at `i(i+1)/2 + j`.
    coeffs: Vec<f64>,
    offset: f64,
    sense: Sense,
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl QuboProblem {
    pub fn new(n: usize, sense: Sense) -> Self {
        Self {
            n,
            coeffs: vec![0.0; n * (n + 1) / 2],
            offset: 0.0,
            sense,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn set_offset(&mut self, c: f64) {
        self.offset = c;
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn set_sense(&mut self, sense: Sense) {
        self.sense = sense;
    }

    fn check(&self, i: usize, j: usize) -> Result<usize, QuboError> {
        if i >= self.n || j >= self.n {
            return Err(QuboError::IndexOutOfRange { i, j, n: self.n });
        }
        Ok(tri(i.max(j), i.min(j)))
    }

    /// `Q_ij` for either index order.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.check(i, j).map(|k| self.coeffs[k]).unwrap_or(0.0)
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<(), QuboError> {
        if !value.is_finite() {
            return Err(QuboError::NonFinite);
        }
        let k = self.check(i, j)?;
        self.coeffs[k] = value;
        Ok(())
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) -> Result<(), QuboError> {
        if !value.is_finite() {
            return Err(QuboError::NonFinite);
        }
        let k = self.check(i, j)?;
        self.coeffs[k] += value;
        Ok(())
    }

    /// Nonzero entries `(i, j, Q_ij)` with `j ≤ i`, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n)
            .flat_map(move |i| (0..=i).map(move |j| (i, j, self.coeffs[tri(i, j)])))
            .filter(|e| e.2 != 0.0)
    }

    pub fn value(&self, x: &[u8]) -> Result<f64, QuboError> {
        if x.len() != self.n {
            return Err(QuboError::LengthMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(self.value_unchecked(x))
    }

    pub(crate) fn value_unchecked(&self, x: &[u8]) -> f64 {
        let mut v = self.offset;
        for i in 0..self.n {
            if x[i] == 0 {
                continue;
            }
            let row = &self.coeffs[tri(i, 0)..=tri(i, i)];
            v += row.iter().zip(&x[..=i]).filter(|(_, &b)| b != 0).map(|(q, _)| q).sum::<f64>();
        }
        v
    }

    /// Symmetric off-diagonal couplings and the diagonal, as dense arrays.
    pub(crate) fn dense(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut w = vec![0.0; n * n];
        let mut d = vec![0.0; n];
        for i in 0..n {
            d[i] = self.coeffs[tri(i, i)];
            for j in 0..i {
                let q = self.coeffs[tri(i, j)];
                w[i * n + j] = q;
                w[j * n + i] = q;
            }
        }
        (w, d)
    }

    pub fn write_to(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "{} {} {}", self.n, self.offset, self.sense)?;
        for (i, j, v) in self.entries() {
            writeln!(out, "{i} {j} {v}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), QuboError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuboError> {
        fs::read_to_string(path)?.parse()
    }
}

impl FromStr for QuboProblem {
    type Err = QuboError;

    /// Header `n C sense`, then `i j value` lines with `j ≤ i` (0-based).
    /// Blank lines and `#` comments are skipped; repeated entries add up.
    fn from_str(text: &str) -> Result<Self, QuboError> {
        let perr = |line: usize, reason: String| QuboError::Parse { line, reason };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hl, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 {
            return Err(perr(hl, format!("header needs 'n C sense', got '{header}'")));
        }
        let n: usize = h[0].parse().map_err(|_| perr(hl, format!("bad variable count '{}'", h[0])))?;
        let c: f64 = h[1].parse().map_err(|_| perr(hl, format!("bad offset '{}'", h[1])))?;
        let sense: Sense = h[2].parse().map_err(|e| perr(hl, e))?;
        if !c.is_finite() {
            return Err(perr(hl, "non-finite offset".into()));
        }
        let mut q = QuboProblem::new(n, sense);
        q.offset = c;
        for (ln, line) in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 3 {
                return Err(perr(ln, format!("expected 'i j value', got '{line}'")));
            }
            let i: usize = t[0].parse().map_err(|_| perr(ln, format!("bad index '{}'", t[0])))?;
            let j: usize = t[1].parse().map_err(|_| perr(ln, format!("bad index '{}'", t[1])))?;
            let v: f64 = t[2].parse().map_err(|_| perr(ln, format!("bad value '{}'", t[2])))?;
            if j > i {
                return Err(perr(ln, format!("entry ({i}, {j}) is above the diagonal")));
            }
            q.add(i, j, v).map_err(|e| perr(ln, e.to_string()))?;
        }
        Ok(q)
    }
}

/// Substitute `s = 2x − 1`. The result is a minimization problem whose
/// value equals the Ising energy on every assignment.
pub fn ising_to_qubo(m: &IsingModel) -> QuboProblem {
    let mut q = QuboProblem::new(m.n, Sense::Minimize);
    let mut c = 0.0;
    for (i, &h) in m.h.iter().enumerate() {
        q.coeffs[tri(i, i)] -= 2.0 * h;
        c += h;
    }
    for (&(i, j), &v) in &m.j {
        q.coeffs[tri(j, i)] -= 4.0 * v;
        q.coeffs[tri(i, i)] += 2.0 * v;
        q.coeffs[tri(j, j)] += 2.0 * v;
        c -= v;
    }
    q.offset = c;
    q
}

/// Inverse transform: `q.value(x) = energy(s(x)) + offset`.
pub fn qubo_to_ising(q: &QuboProblem) -> (IsingModel, f64) {
    let mut m = IsingModel::new(q.n);
    let mut offset = q.offset;
    for i in 0..q.n {
        let d = q.coeffs[tri(i, i)];
        m.h[i] -= d / 2.0;
        offset += d / 2.0;
        for j in 0..i {
            let v = q.coeffs[tri(i, j)];
            if v == 0.0 {
                continue;
            }
            *m.j.entry((j, i)).or_insert(0.0) -= v / 4.0;
            m.h[i] -= v / 4.0;
            m.h[j] -= v / 4.0;
            offset += v / 4.0;
        }
    }
    m.j.retain(|_, v| *v != 0.0);
    (m, offset)
}

/// All `2ⁿ` assignments in counting order, `x_0` as the most significant bit.
pub fn all_assignments(n: usize) -> impl Iterator<Item = Vec<u8>> {
    (0u64..1 << n).map(move |m| (0..n).map(|i| ((m >> (n - 1 - i)) & 1) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn naive_value(q: &QuboProblem, x: &[u8]) -> f64 {
        let mut v = q.offset();
        for i in 0..q.n() {
            for j in 0..=i {
                v += q.get(i, j) * (x[i] * x[j]) as f64;
            }
        }
        v
    }

    fn random_ising(n: usize, rng: &mut impl Rng) -> IsingModel {
        let mut m = IsingModel::new(n);
        for i in 0..n {
            m.set_field(i, rng.random_range(-1.0..1.0)).unwrap();
            for j in i + 1..n {
                if rng.random_bool(0.6) {
                    m.set_coupling(i, j, rng.random_range(-1.0..1.0)).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn single_spin_field() {
        let mut m = IsingModel::new(1);
        m.set_field(0, 1.0).unwrap();
        let q = ising_to_qubo(&m);
        assert_eq!(q.get(0, 0), -2.0);
        assert_eq!(q.offset(), 1.0);
    }

    #[test]
    fn two_spin_ferromagnet() {
        let mut m = IsingModel::new(2);
        m.set_coupling(0, 1, 1.0).unwrap();
        let q = ising_to_qubo(&m);
        assert_eq!((q.get(0, 0), q.get(1, 1), q.get(1, 0), q.offset()), (2.0, 2.0, -4.0, -1.0));
        for x in all_assignments(2) {
            let s = spins_from_bits(&x);
            assert_eq!(q.value(&x).unwrap(), m.energy(&s).unwrap());
        }
    }

    #[test]
    fn transform_identity_exhaustive() {
        let mut rng = substream(3, 0, 0);
        for n in 1..=8 {
            let m = random_ising(n, &mut rng);
            let q = ising_to_qubo(&m);
            let (back, off) = qubo_to_ising(&q);
            for x in all_assignments(n) {
                let s = spins_from_bits(&x);
                let e = m.energy(&s).unwrap();
                assert!((q.value(&x).unwrap() - e).abs() < 1e-12);
                assert!((back.energy(&s).unwrap() + off - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_from_random_qubo() {
        let mut rng = substream(4, 0, 0);
        let n = 30;
        let mut q = QuboProblem::new(n, Sense::Maximize);
        for i in 0..n {
            for j in 0..=i {
                q.set(i, j, rng.random_range(-1.0..1.0)).unwrap();
            }
        }
        q.set_offset(0.25);
        let (m, off) = qubo_to_ising(&q);
        let q2 = ising_to_qubo(&m);
        for _ in 0..1000 {
            let x: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let v = q.value(&x).unwrap();
            assert!((q2.value(&x).unwrap() + off - v).abs() < 1e-10);
            assert!((naive_value(&q, &x) - v).abs() < 1e-10);
        }
    }

    #[test]
    fn value_basics() {
        let mut q = QuboProblem::new(3, Sense::Maximize);
        q.set_offset(1.5);
        assert_eq!(q.value(&[0, 0, 0]).unwrap(), 1.5);
        assert!(matches!(q.value(&[0, 1]), Err(QuboError::LengthMismatch { .. })));
        q.set(0, 2, 2.0).unwrap();
        assert_eq!(q.get(2, 0), 2.0);
        assert_eq!(q.value(&[1, 0, 1]).unwrap(), 3.5);
        assert!(q.set(3, 0, 1.0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let mut q = QuboProblem::new(3, Sense::Maximize);
        q.set(0, 0, 200.0).unwrap();
        q.set(1, 1, -152.8).unwrap();
        q.set(1, 0, 176.4).unwrap();
        q.set(2, 1, 1.0 / 3.0).unwrap();
        q.set_offset(-0.5);
        let mut buf = Vec::new();
        q.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("3 -0.5 maximize\n0 0 200\n"));
        let back: QuboProblem = text.parse().unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = "2 0 maximize\n0 1 3\n".parse::<QuboProblem>().unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        assert!("2 0 upward\n".parse::<QuboProblem>().is_err());
        assert!("2 0 min\n5 0 1\n".parse::<QuboProblem>().is_err());
        let q: QuboProblem = "# comment\n2 1 min\n\n1 1 2 # diag\n1 1 3\n".parse().unwrap();
        assert_eq!(q.get(1, 1), 5.0);
        assert_eq!(q.sense(), Sense::Minimize);
    }

    #[test]
    fn coupling_key_is_ordered() {
        let mut m = IsingModel::new(3);
        m.set_coupling(2, 0, 0.5).unwrap();
        assert_eq!(m.couplings().keys().next(), Some(&(0, 2)));
        assert_eq!(m.coupling(0, 2), 0.5);
        assert!(matches!(m.set_coupling(1, 1, 1.0), Err(QuboError::SelfCoupling(1))));
    }
}
