//! Finite Markov chains in the column-stochastic convention.
//!
//! `entries[i][j]` is the probability of moving from state `j` to state
//! `i`, so a distribution is a column vector and one step is `P·q`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::math;
use crate::{COMPUTED_TOL, INPUT_TOL};

/// Column-stochastic transition matrix over labeled states.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    labels: Vec<String>,
    entries: Matrix,
}

impl TransitionMatrix {
    /// Validates shape, label uniqueness, entry range and column sums.
    pub fn new(labels: Vec<String>, entries: Matrix) -> Result<Self> {
        if !entries.is_square() || entries.rows() == 0 {
            return Err(Error::InvalidChain(format!(
                "matrix must be square and non-empty, got {}x{}",
                entries.rows(),
                entries.cols()
            )));
        }
        if labels.len() != entries.rows() {
            return Err(Error::InvalidChain(format!(
                "{} labels for {} states",
                labels.len(),
                entries.rows()
            )));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::InvalidChain("labels are not unique".into()));
        }
        if let Some(v) = validate_matrix(&entries).stochastic_violations.first() {
            return Err(Error::InvalidChain(v.to_string()));
        }
        Ok(Self { labels, entries })
    }

    /// Same as [`TransitionMatrix::new`] with labels `"0"…"N-1"`.
    pub fn from_matrix(entries: Matrix) -> Result<Self> {
        let labels = (0..entries.rows()).map(|i| i.to_string()).collect();
        Self::new(labels, entries)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::from_matrix(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.entries.rows()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    /// `p_{to,from}`.
    #[inline]
    pub fn prob(&self, to: usize, from: usize) -> f64 {
        self.entries[(to, from)]
    }

    /// Column `from`: the successor distribution of state `from`.
    pub fn column(&self, from: usize) -> Vec<f64> {
        self.entries.column(from)
    }

    /// One step `P·q`.
    pub fn step(&self, q: &[f64]) -> Vec<f64> {
        self.entries.mul_vec(q)
    }

    pub fn is_doubly_stochastic(&self) -> bool {
        (0..self.num_states()).all(|i| (self.entries.row(i).iter().sum::<f64>() - 1.0).abs() <= INPUT_TOL)
    }
}

/// Probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("weight {i} is {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > INPUT_TOL {
            return Err(Error::InvalidDistribution(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidDistribution("weights do not have positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut w = vec![0.0; n];
        w[at] = 1.0;
        Self(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `π_* = min_x π_x`.
    pub fn min_weight(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// The all-ones vector `|e⟩` (unnormalized).
pub fn all_ones(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

#[derive(Debug, Clone, PartialEq)]
pub enum StochasticViolation {
    EntryOutOfRange { row: usize, column: usize, value: f64 },
    ColumnSum { column: usize, sum: f64 },
}

impl core::fmt::Display for StochasticViolation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::EntryOutOfRange { row, column, value } => {
                write!(f, "entry P[{row}][{column}] = {value} is outside [0, 1]")
            }
            Self::ColumnSum { column, sum } => write!(f, "column {column} sums to {sum}"),
        }
    }
}

/// Structural report for a candidate transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub stochastic_violations: Vec<StochasticViolation>,
    pub irreducible: bool,
    /// Period of the class of state 0 when the chain is irreducible.
    pub period: Option<usize>,
    pub aperiodic: bool,
    pub ergodic: bool,
}

impl ValidationReport {
    /// Names the first failed ergodicity property.
    pub fn failure(&self) -> Option<String> {
        if let Some(v) = self.stochastic_violations.first() {
            Some(format!("not column-stochastic: {v}"))
        } else if !self.irreducible {
            Some("not irreducible".into())
        } else if !self.aperiodic {
            Some(format!("periodic with period {}", self.period.unwrap_or(0)))
        } else {
            None
        }
    }
}

pub fn validate_chain(p: &TransitionMatrix) -> ValidationReport {
    validate_matrix(p.entries())
}

/// Stochasticity, irreducibility and aperiodicity of an arbitrary square
/// matrix read in the column-stochastic orientation.
pub fn validate_matrix(entries: &Matrix) -> ValidationReport {
    let n = entries.rows();
    let mut violations = Vec::new();
    for j in 0..entries.cols() {
        let mut sum = 0.0;
        for i in 0..n {
            let v = entries[(i, j)];
            if !(-INPUT_TOL..=1.0 + INPUT_TOL).contains(&v) {
                violations.push(StochasticViolation::EntryOutOfRange { row: i, column: j, value: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > INPUT_TOL {
            violations.push(StochasticViolation::ColumnSum { column: j, sum });
        }
    }
    if !entries.is_square() || n == 0 {
        return ValidationReport {
            stochastic_violations: violations,
            irreducible: false,
            period: None,
            aperiodic: false,
            ergodic: false,
        };
    }

    // Support digraph: edge j -> i when P[i][j] > 0.
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|j| (0..n).filter(|&i| entries[(i, j)] > 0.0).collect())
        .collect();
    let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, s) in succ.iter().enumerate() {
        for &i in s {
            pred[i].push(j);
        }
    }
    let forward = bfs_levels(&succ, 0);
    let backward = bfs_levels(&pred, 0);
    let irreducible = forward.iter().all(Option::is_some) && backward.iter().all(Option::is_some);

    let period = if irreducible {
        if (0..n).any(|i| entries[(i, i)] > 0.0) {
            Some(1)
        } else {
            let mut g = 0usize;
            for (u, s) in succ.iter().enumerate() {
                let lu = forward[u].unwrap_or(0);
                for &v in s {
                    let lv = forward[v].unwrap_or(0);
                    g = math::gcd(g, (lu + 1).abs_diff(lv));
                }
            }
            Some(g)
        }
    } else {
        None
    };
    let aperiodic = period == Some(1);
    ValidationReport {
        ergodic: violations.is_empty() && irreducible && aperiodic,
        stochastic_violations: violations,
        irreducible,
        period,
        aperiodic,
    }
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    let mut queue = alloc::collections::VecDeque::new();
    level[start] = Some(0);
    queue.push_back(start);
    while let Some(u) = queue.pop_front() {
        let next = level[u].unwrap_or(0) + 1;
        for &v in &adj[u] {
            if level[v].is_none() {
                level[v] = Some(next);
                queue.push_back(v);
            }
        }
    }
    level
}

pub(crate) fn require_ergodic(p: &TransitionMatrix) -> Result<()> {
    match validate_chain(p).failure() {
        Some(why) => Err(Error::NotErgodic(why)),
        None => Ok(()),
    }
}

/// Solves `(P − I)π = 0` with one equation replaced by `Σπ = 1`, then
/// polishes with power iteration.
pub fn stationary_distribution(p: &TransitionMatrix) -> Result<Distribution> {
    require_ergodic(p)?;
    let n = p.num_states();
    let mut a = p.entries().sub(&Matrix::identity(n));
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0;
    let mut pi = linalg::solve(&a, &rhs)?;

    let residual = |pi: &[f64]| -> f64 {
        p.step(pi)
            .iter()
            .zip(pi)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    };
    for _ in 0..1000 {
        if residual(&pi) <= 1e-12 {
            break;
        }
        pi = p.step(&pi);
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|x| *x /= s);
    }
    if residual(&pi) > COMPUTED_TOL {
        return Err(Error::InvalidArgument(format!(
            "stationary solve did not converge (residual {:e})",
            residual(&pi)
        )));
    }
    if let Some((i, w)) = pi.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(Error::InvalidArgument(format!("stationary weight {i} is {w}")));
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= s);
    Ok(Distribution(pi))
}

pub fn total_variation(p: &Distribution, q: &Distribution) -> Result<f64> {
    tv_slices(p.weights(), q.weights())
}

pub(crate) fn tv_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), found: q.len() });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `d(0), …, d(m_max)`, iterating the distributions of all `N` point-mass
/// starts.
pub fn distance_series(p: &TransitionMatrix, m_max: usize) -> Result<Vec<f64>> {
    let pi = stationary_distribution(p)?;
    Ok(distance_series_with(p, &pi, m_max, |_, _| true))
}

// Calls `keep_going(m, d)` after each value; stops when it returns false.
fn distance_series_with(
    p: &TransitionMatrix,
    pi: &Distribution,
    m_max: usize,
    mut keep_going: impl FnMut(usize, f64) -> bool,
) -> Vec<f64> {
    let n = p.num_states();
    let mut dists = Matrix::identity(n);
    let mut out = Vec::with_capacity(m_max + 1);
    for m in 0..=m_max {
        let d = (0..n)
            .map(|x| {
                let col = dists.column(x);
                0.5 * col.iter().zip(pi.weights()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max);
        out.push(d);
        if !keep_going(m, d) || m == m_max {
            break;
        }
        dists = p.entries().matmul(&dists);
    }
    out
}

/// `d(m) = max_x ½ Σ_{x'} |[P^m]_{x',x} − π_{x'}|`.
pub fn distance_to_stationary(p: &TransitionMatrix, m: usize) -> Result<f64> {
    Ok(distance_series(p, m)?[m])
}

/// `t_mix(ε) = min{m : d(m) ≤ ε}`, searching `m ≤ cap`.
pub fn mixing_time(p: &TransitionMatrix, eps: f64, cap: usize) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
    }
    let pi = stationary_distribution(p)?;
    let series = distance_series_with(p, &pi, cap, |_, d| d > eps);
    match series.iter().position(|&d| d <= eps) {
        Some(m) => Ok(m),
        None => {
            let (best_m, best_d) = series
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap_or((0, 1.0));
            Err(Error::MixingCapExceeded { eps, cap, best_m, best_d })
        }
    }
}

/// One `t_mix(ε) ≤ ⌈log₂ ε⁻¹⌉·t_mix(1/4)` comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingBound {
    pub eps: f64,
    pub t_mix_eps: usize,
    pub bound: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingReport {
    pub ergodic: bool,
    /// `d(0), d(1), …` up to the largest mixing time requested.
    pub distances: Vec<f64>,
    pub t_mix: usize,
    pub bounds: Vec<MixingBound>,
    /// `d(m+1) ≤ d(m) + 1e-12` for every recorded `m`.
    pub monotone: bool,
}

/// `t_mix = t_mix(1/4)` plus `t_mix(ε)` for each requested ε, with the
/// doubling bound evaluated on the computed values.
pub fn mixing_report(p: &TransitionMatrix, eps_list: &[f64], cap: usize) -> Result<MixingReport> {
    let t_mix = mixing_time(p, 0.25, cap)?;
    let mut bounds = Vec::new();
    let mut horizon = t_mix;
    for &eps in eps_list {
        let t = mixing_time(p, eps, cap)?;
        let factor = math::ceil(math::log2(1.0 / eps) - 1e-12).max(0.0) as usize;
        let bound = factor * t_mix;
        bounds.push(MixingBound { eps, t_mix_eps: t, bound, holds: t <= bound });
        horizon = horizon.max(t);
    }
    let distances = distance_series(p, horizon)?;
    let monotone = distances.windows(2).all(|w| w[1] <= w[0] + INPUT_TOL);
    Ok(MixingReport { ergodic: true, distances, t_mix, bounds, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lazy_hypercube(n: usize) -> TransitionMatrix {
        let size = 1usize << n;
        let mut m = Matrix::zeros(size, size);
        for x in 0..size {
            for bit in 0..n {
                for b in 0..2 {
                    let y = (x & !(1 << bit)) | (b << bit);
                    m[(y, x)] += 1.0 / (2 * n) as f64;
                }
            }
        }
        TransitionMatrix::from_matrix(m).unwrap()
    }

    // Dense-power oracle for d(m).
    fn d_by_power(p: &TransitionMatrix, pi: &[f64], m: usize) -> f64 {
        let n = p.num_states();
        let mut pm = Matrix::identity(n);
        for _ in 0..m {
            pm = pm.matmul(p.entries());
        }
        (0..n)
            .map(|x| 0.5 * (0..n).map(|i| (pm[(i, x)] - pi[i]).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    #[test]
    fn swap_chain_is_periodic() {
        let p = TransitionMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = validate_chain(&p);
        assert!(r.irreducible);
        assert_eq!(r.period, Some(2));
        assert!(!r.ergodic);
        assert!(matches!(stationary_distribution(&p), Err(Error::NotErgodic(msg)) if msg.contains("period 2")));
    }

    #[test]
    fn positive_chain_is_ergodic() {
        let p = TransitionMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(validate_chain(&p).ergodic);
    }

    #[test]
    fn short_column_is_reported() {
        let m = Matrix::from_rows(&[[0.5, 0.4], [0.5, 0.5]]).unwrap();
        let r = validate_matrix(&m);
        assert_eq!(r.stochastic_violations.len(), 1);
        assert!(matches!(r.stochastic_violations[0], StochasticViolation::ColumnSum { column: 1, sum } if (sum - 0.9).abs() < 1e-15));
        assert!(!r.ergodic);
        assert!(TransitionMatrix::from_matrix(m).is_err());
    }

    #[test]
    fn reducible_chain_is_flagged() {
        let p = TransitionMatrix::from_rows(&[[1.0, 0.5], [0.0, 0.5]]).unwrap();
        let r = validate_chain(&p);
        assert!(!r.irreducible);
        assert_eq!(r.failure().as_deref(), Some("not irreducible"));
    }

    #[test]
    fn period_three_cycle() {
        let p = TransitionMatrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(validate_chain(&p).period, Some(3));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let m = Matrix::identity(2);
        assert!(TransitionMatrix::new(vec!["a".into(), "a".into()], m).is_err());
    }

    #[test]
    fn two_state_stationary() {
        let (a, b) = (0.3, 0.1);
        // p(1←0) = a, p(0←1) = b
        let p = TransitionMatrix::from_rows(&[[1.0 - a, b], [a, 1.0 - b]]).unwrap();
        let pi = stationary_distribution(&p).unwrap();
        assert!((pi.weights()[0] - b / (a + b)).abs() < 1e-12);
        assert!((pi.weights()[1] - a / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn doubly_stochastic_gives_uniform() {
        let p = TransitionMatrix::from_rows(&[[0.2, 0.5, 0.3], [0.5, 0.1, 0.4], [0.3, 0.4, 0.3]]).unwrap();
        assert!(p.is_doubly_stochastic());
        let pi = stationary_distribution(&p).unwrap();
        assert!(pi.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        let h = lazy_hypercube(3);
        let pi = stationary_distribution(&h).unwrap();
        assert!(pi.weights().iter().all(|w| (w - 0.125).abs() < 1e-12));
    }

    #[test]
    fn total_variation_examples() {
        let p = Distribution::new(vec![0.7, 0.3]).unwrap();
        let q = Distribution::uniform(2);
        assert!((total_variation(&p, &q).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        let a = Distribution::point_mass(3, 0);
        let b = Distribution::point_mass(3, 2);
        assert_eq!(total_variation(&a, &b).unwrap(), 1.0);
        assert!(total_variation(&a, &q).is_err());
    }

    #[test]
    fn d_zero_is_one_minus_min_weight() {
        let p = TransitionMatrix::from_rows(&[[0.7, 0.1], [0.3, 0.9]]).unwrap();
        let pi = stationary_distribution(&p).unwrap();
        let d0 = distance_to_stationary(&p, 0).unwrap();
        assert!((d0 - (1.0 - pi.min_weight())).abs() < 1e-12);
    }

    #[test]
    fn hypercube_two_distances_match_power_oracle() {
        let p = lazy_hypercube(2);
        let pi = vec![0.25; 4];
        let series = distance_series(&p, 60).unwrap();
        // Exact rational values from the power oracle: d(m) = 2^-(m+1), m ≥ 1.
        assert!((series[1] - 0.25).abs() < 1e-15);
        for m in [1, 2, 5, 13] {
            assert!((series[m] - d_by_power(&p, &pi, m)).abs() < 1e-14);
            assert!((series[m] - 0.5f64.powi(m as i32 + 1)).abs() < 1e-15);
        }
        assert!(series.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(series[60] < 1e-6);
    }

    #[test]
    fn mixing_time_examples() {
        let p = TransitionMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_eq!(mixing_time(&p, 0.1, 10).unwrap(), 1);
        assert_eq!(mixing_time(&lazy_hypercube(2), 0.25, 100).unwrap(), 1);
        assert_eq!(mixing_time(&lazy_hypercube(3), 0.25, 100).unwrap(), 3);
        // eps ≥ d(0) = 3/4
        assert_eq!(mixing_time(&lazy_hypercube(2), 0.8, 100).unwrap(), 0);
    }

    #[test]
    fn mixing_cap_reports_best() {
        let p = TransitionMatrix::from_rows(&[[0.99, 0.01], [0.01, 0.99]]).unwrap();
        match mixing_time(&p, 0.01, 3) {
            Err(Error::MixingCapExceeded { best_m, .. }) => assert_eq!(best_m, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn doubling_bound_on_hypercube() {
        let r = mixing_report(&lazy_hypercube(3), &[0.125, 0.0625], 200).unwrap();
        assert_eq!(r.t_mix, 3);
        // d = 8/81 at m = 5, 16/243 at m = 6 (exact rational oracle)
        assert_eq!(r.bounds[0].t_mix_eps, 5);
        assert_eq!(r.bounds[1].t_mix_eps, 7);
        assert!(r.bounds.iter().all(|b| b.holds));
        assert!(r.monotone);
    }
}
