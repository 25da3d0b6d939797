//! Couplings on the pair space `Ω×Ω`.
//!
//! Pairs are indexed `idx(x, y) = x·N + y`. A coupling matrix is stored by
//! columns, each column a sorted list of `(row, value)`; grand couplings
//! have at most `|R|` nonzeros per column.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::chain::{self, TransitionMatrix};
use crate::check::CheckResult;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::rng::{trajectory_stream, Categorical, StreamRng};
use crate::{Guards, COMPUTED_TOL, INPUT_TOL};

#[inline]
pub fn pair_index(x: usize, y: usize, n: usize) -> usize {
    x * n + y
}

#[inline]
pub fn pair_of(idx: usize, n: usize) -> (usize, usize) {
    (idx / n, idx % n)
}

/// Transition matrix `C` of a coupled pair chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    base: TransitionMatrix,
    columns: Vec<Vec<(usize, f64)>>,
}

impl CouplingMatrix {
    /// Accepts any `N²` column lists; validation is left to
    /// [`validate_coupling`].
    pub fn from_columns(base: TransitionMatrix, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n2 = base.num_states() * base.num_states();
        if columns.len() != n2 {
            return Err(Error::DimensionMismatch { expected: n2, found: columns.len() });
        }
        let mut out = Vec::with_capacity(n2);
        for (j, mut col) in columns.into_iter().enumerate() {
            if let Some(&(r, _)) = col.iter().find(|(r, _)| *r >= n2) {
                return Err(Error::InvalidCoupling(format!("column {j} has row index {r} >= {n2}")));
            }
            col.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for (r, v) in col {
                match merged.last_mut() {
                    Some(last) if last.0 == r => last.1 += v,
                    _ => merged.push((r, v)),
                }
            }
            merged.retain(|e| e.1 != 0.0);
            out.push(merged);
        }
        Ok(Self { base, columns: out })
    }

    /// Dense `N² × N²` matrix over pair indices.
    pub fn from_dense(base: TransitionMatrix, c: &Matrix) -> Result<Self> {
        let n2 = base.num_states() * base.num_states();
        if c.rows() != n2 || c.cols() != n2 {
            return Err(Error::DimensionMismatch { expected: n2, found: c.rows().max(c.cols()) });
        }
        let columns = (0..n2)
            .map(|j| (0..n2).filter(|&i| c[(i, j)] != 0.0).map(|i| (i, c[(i, j)])).collect())
            .collect();
        Self::from_columns(base, columns)
    }

    pub fn base(&self) -> &TransitionMatrix {
        &self.base
    }

    pub fn num_states(&self) -> usize {
        self.base.num_states()
    }

    pub fn column(&self, idx: usize) -> &[(usize, f64)] {
        &self.columns[idx]
    }

    /// `c_{(x',y'),(x,y)}` addressed by pair indices.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let c = &self.columns[col];
        match c.binary_search_by_key(&row, |e| e.0) {
            Ok(k) => c[k].1,
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Matrix {
        let n2 = self.columns.len();
        let mut m = Matrix::zeros(n2, n2);
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `C·v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (j, col) in self.columns.iter().enumerate() {
            let vj = v[j];
            if vj != 0.0 {
                for &(i, c) in col {
                    out[i] += c * vj;
                }
            }
        }
        out
    }

    /// `Cᵀ·v`, i.e. `out(s) = Σ_{s'} v(s')·C[s', s]`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|col| col.iter().map(|&(i, c)| c * v[i]).sum())
            .collect()
    }
}

/// Which of the defining conditions a violation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Stochastic,
    /// Row marginal of the first component.
    MarginalFirst,
    /// Row marginal of the second component.
    MarginalSecond,
    Coalescence,
    Symmetry,
}

/// Worst offender for one condition. `row` and `col` are pairs
/// `(x', y')`, `(x, y)`; marginal violations leave the unused coordinate
/// of `row` at `usize::MAX`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub row: (usize, usize),
    pub col: (usize, usize),
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: Condition,
    pub count: usize,
    pub worst: Option<Violation>,
}

impl ConditionReport {
    fn new(condition: Condition) -> Self {
        Self { condition, count: 0, worst: None }
    }

    fn record(&mut self, row: (usize, usize), col: (usize, usize), magnitude: f64, tol: f64) {
        if magnitude <= tol {
            return;
        }
        self.count += 1;
        if self.worst.is_none_or(|w| magnitude > w.magnitude) {
            self.worst = Some(Violation { row, col, magnitude });
        }
    }

    pub fn holds(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingValidation {
    pub conditions: Vec<ConditionReport>,
    pub valid: bool,
}

impl CouplingValidation {
    pub fn condition(&self, c: Condition) -> &ConditionReport {
        self.conditions.iter().find(|r| r.condition == c).expect("all conditions reported")
    }

    pub fn violated(&self) -> impl Iterator<Item = &ConditionReport> {
        self.conditions.iter().filter(|r| !r.holds())
    }
}

/// Checks stochasticity, both marginals, coalescence and symmetry within
/// `1e-12`.
pub fn validate_coupling(c: &CouplingMatrix) -> CouplingValidation {
    let n = c.num_states();
    let p = c.base();
    let mut stoch = ConditionReport::new(Condition::Stochastic);
    let mut m1 = ConditionReport::new(Condition::MarginalFirst);
    let mut m2 = ConditionReport::new(Condition::MarginalSecond);
    let mut coal = ConditionReport::new(Condition::Coalescence);
    let mut sym = ConditionReport::new(Condition::Symmetry);
    let mut first = vec![0.0; n];
    let mut second = vec![0.0; n];

    for col in 0..n * n {
        let (x, y) = pair_of(col, n);
        first.iter_mut().for_each(|v| *v = 0.0);
        second.iter_mut().for_each(|v| *v = 0.0);
        let mut sum = 0.0;
        for &(row, v) in c.column(col) {
            let (xp, yp) = pair_of(row, n);
            if !(-INPUT_TOL..=1.0 + INPUT_TOL).contains(&v) {
                stoch.record((xp, yp), (x, y), v.abs().max((v - 1.0).abs()), 0.0);
            }
            sum += v;
            first[xp] += v;
            second[yp] += v;
            if x == y && xp != yp {
                coal.record((xp, yp), (x, y), v.abs(), INPUT_TOL);
            }
            let mirrored = c.get(pair_index(yp, xp, n), pair_index(y, x, n));
            sym.record((xp, yp), (x, y), (v - mirrored).abs(), INPUT_TOL);
        }
        stoch.record((usize::MAX, usize::MAX), (x, y), (sum - 1.0).abs(), INPUT_TOL);
        for k in 0..n {
            m1.record((k, usize::MAX), (x, y), (first[k] - p.prob(k, x)).abs(), INPUT_TOL);
            m2.record((usize::MAX, k), (x, y), (second[k] - p.prob(k, y)).abs(), INPUT_TOL);
            if x == y {
                let diag = c.get(pair_index(k, k, n), col);
                coal.record((k, k), (x, x), (diag - p.prob(k, x)).abs(), INPUT_TOL);
            }
        }
    }
    let conditions = vec![stoch, m1, m2, coal, sym];
    let valid = conditions.iter().all(ConditionReport::holds);
    CouplingValidation { conditions, valid }
}

pub(crate) fn require_valid(c: &CouplingMatrix) -> Result<()> {
    let v = validate_coupling(c);
    let out = match v.violated().next() {
        None => Ok(()),
        Some(r) => Err(Error::InvalidCoupling(format!(
            "{:?} condition violated ({} entries, worst {:?})",
            r.condition, r.count, r.worst
        ))),
    };
    out
}

/// Components move independently until they meet, then together.
pub fn independent_coupling(p: &TransitionMatrix) -> Result<CouplingMatrix> {
    chain::require_ergodic(p)?;
    let n = p.num_states();
    let supports: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|x| (0..n).filter(|&i| p.prob(i, x) > 0.0).map(|i| (i, p.prob(i, x))).collect())
        .collect();
    let columns = (0..n * n)
        .map(|col| {
            let (x, y) = pair_of(col, n);
            if x == y {
                supports[x].iter().map(|&(k, v)| (pair_index(k, k, n), v)).collect()
            } else {
                let mut out = Vec::with_capacity(supports[x].len() * supports[y].len());
                for &(xp, a) in &supports[x] {
                    for &(yp, b) in &supports[y] {
                        out.push((pair_index(xp, yp, n), a * b));
                    }
                }
                out
            }
        })
        .collect();
    CouplingMatrix::from_columns(p.clone(), columns)
}

/// A map `f(x, r)` driven by a finite random variable `R`.
pub trait RandomMapping: Sync {
    fn num_states(&self) -> usize;
    /// `Pr(r)` for `r = 0..|R|`.
    fn probabilities(&self) -> &[f64];
    fn successor(&self, x: usize, r: usize) -> usize;
}

/// Random mapping representation stored as an explicit `N × |R|` table.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMappingRep {
    num_states: usize,
    labels: Vec<String>,
    probs: Vec<f64>,
    // Row-major: table[x·|R| + r] = f(x, r).
    table: Vec<u32>,
}

impl RandomMappingRep {
    /// Checks `Pr(r) ≥ 0`, `Σ Pr(r) = 1` and successor range.
    pub fn new(num_states: usize, labels: Vec<String>, probs: Vec<f64>, table: Vec<Vec<usize>>) -> Result<Self> {
        let k = probs.len();
        if k == 0 || num_states == 0 {
            return Err(Error::InvalidMapping("empty state space or randomness".into()));
        }
        if labels.len() != k {
            return Err(Error::InvalidMapping(format!("{} labels for {} outcomes", labels.len(), k)));
        }
        if let Some((r, p)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0)) {
            return Err(Error::InvalidMapping(format!("Pr(r = {}) = {p}", labels[r])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > INPUT_TOL {
            return Err(Error::InvalidMapping(format!("probabilities sum to {total}")));
        }
        if table.len() != num_states {
            return Err(Error::InvalidMapping(format!("table has {} rows for {num_states} states", table.len())));
        }
        let mut flat = Vec::with_capacity(num_states * k);
        for (x, row) in table.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidMapping(format!("table row {x} has {} entries, expected {k}", row.len())));
            }
            for &s in row {
                if s >= num_states {
                    return Err(Error::InvalidMapping(format!("f({x}, ·) = {s} is not a state")));
                }
                flat.push(s as u32);
            }
        }
        Ok(Self { num_states, labels, probs, table: flat })
    }

    /// Tabulates any mapping.
    pub fn from_mapping(m: &dyn RandomMapping, labels: Vec<String>) -> Result<Self> {
        let k = m.probabilities().len();
        let table = (0..m.num_states()).map(|x| (0..k).map(|r| m.successor(x, r)).collect()).collect();
        Self::new(m.num_states(), labels, m.probabilities().to_vec(), table)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_outcomes(&self) -> usize {
        self.probs.len()
    }

    /// The chain the mapping induces: `p_{x',x} = Σ_{r: f(x,r)=x'} Pr(r)`.
    pub fn transition_matrix(&self) -> Result<TransitionMatrix> {
        TransitionMatrix::from_matrix(induced_matrix(self))
    }

    /// Largest `|Σ_{r: f(x,r)=x'} Pr(r) − p_{x',x}|`.
    pub fn deviation_from(&self, p: &TransitionMatrix) -> Result<f64> {
        if p.num_states() != self.num_states {
            return Err(Error::DimensionMismatch { expected: p.num_states(), found: self.num_states });
        }
        Ok(induced_matrix(self).max_abs_diff(p.entries()))
    }

    /// Errors unless the mapping induces `p` within `1e-12`.
    pub fn validate_against(&self, p: &TransitionMatrix) -> Result<()> {
        let dev = self.deviation_from(p)?;
        if dev > INPUT_TOL {
            return Err(Error::InvalidMapping(format!("induced kernel deviates from P by {dev:e}")));
        }
        Ok(())
    }
}

/// Dense kernel induced by any mapping, guarded by `dense_states`.
pub fn induced_transition_matrix(m: &dyn RandomMapping, guards: &Guards) -> Result<TransitionMatrix> {
    if m.num_states() > guards.dense_states {
        return Err(Error::GuardExceeded {
            what: "number of states",
            size: m.num_states(),
            limit: guards.dense_states,
            hint: "dense transition matrices are limited; use Monte Carlo routines",
        });
    }
    TransitionMatrix::from_matrix(induced_matrix(m))
}

fn induced_matrix(m: &dyn RandomMapping) -> Matrix {
    let n = m.num_states();
    let mut out = Matrix::zeros(n, n);
    for x in 0..n {
        for (r, &pr) in m.probabilities().iter().enumerate() {
            out[(m.successor(x, r), x)] += pr;
        }
    }
    out
}

impl RandomMapping for RandomMappingRep {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    fn successor(&self, x: usize, r: usize) -> usize {
        self.table[x * self.probs.len() + r] as usize
    }
}

/// `c_{(x',y'),(x,y)} = Σ_{r: f(x,r)=x', f(y,r)=y'} Pr(r)`.
pub fn grand_coupling_matrix(rmr: &dyn RandomMapping) -> Result<CouplingMatrix> {
    grand_coupling_matrix_with(rmr, &Guards::default())
}

pub fn grand_coupling_matrix_with(rmr: &dyn RandomMapping, guards: &Guards) -> Result<CouplingMatrix> {
    let n = rmr.num_states();
    if n > guards.exact_states {
        return Err(Error::GuardExceeded {
            what: "number of states",
            size: n,
            limit: guards.exact_states,
            hint: "use the Monte Carlo coalescence estimator",
        });
    }
    let base = TransitionMatrix::from_matrix(induced_matrix(rmr))
        .map_err(|e| Error::InvalidMapping(e.to_string()))?;
    let probs = rmr.probabilities();
    let columns = (0..n * n)
        .map(|col| {
            let (x, y) = pair_of(col, n);
            probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(r, &p)| (pair_index(rmr.successor(x, r), rmr.successor(y, r), n), p))
                .collect()
        })
        .collect();
    CouplingMatrix::from_columns(base, columns)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TailMode {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

/// Tail estimates for one start pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTail {
    pub x: usize,
    pub y: usize,
    pub tails: Vec<f64>,
    /// 95% half-widths (Monte Carlo only).
    pub half_widths: Vec<f64>,
}

/// `Pr_{x,y}{τ_coal > m}` over a grid of `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalescenceReport {
    pub mode: TailMode,
    pub num_states: usize,
    pub m_grid: Vec<usize>,
    /// Maximum over start pairs at each grid point.
    pub tail_max: Vec<f64>,
    /// Maximum over pairs of the 95% upper confidence limit (Monte Carlo
    /// only).
    pub tail_ci_hi: Option<Vec<f64>>,
    /// Start pair attaining `tail_max` at each grid point.
    pub worst_pairs: Vec<(usize, usize)>,
    /// Per-pair series (Monte Carlo, or exact runs that ask for them).
    pub pairs: Vec<PairTail>,
    /// `max_{x,y} Σ_{m ≤ M} Pr_{x,y}{τ > m}` and the truncation point `M`
    /// (exact mode only).
    pub expected_tau: Option<(f64, usize)>,
    pub t_couple: Option<usize>,
}

impl CoalescenceReport {
    /// `tail_max` at `m`, if `m` is on the grid.
    pub fn tail_at(&self, m: usize) -> Option<f64> {
        self.m_grid.iter().position(|&g| g == m).map(|k| self.tail_max[k])
    }
}

/// Slack on the `≤ 1/4` comparison for exactly computed tails.
pub const EXACT_THRESHOLD_SLACK: f64 = 1e-12;

/// Default search cap `64·N·⌈ln N⌉` (at least 64).
pub fn default_m_cap(n: usize) -> usize {
    let l = math::ceil(math::ln(n.max(2) as f64)) as usize;
    (64 * n * l).max(64)
}

/// Exact tails for every start pair, `m = 0..=m_max`, from
/// `v_{m+1} = Cᵀ v_m` with `v_0` the indicator of off-diagonal pairs.
pub fn coalescence_tail_exact(c: &CouplingMatrix, m_max: usize) -> Result<CoalescenceReport> {
    exact_tails(c, m_max, false, false, &Guards::default())
}

/// Like [`coalescence_tail_exact`] but stops at the first `m` whose tail is
/// at most 1/4.
pub fn coalescence_tail_exact_until_couple(c: &CouplingMatrix, m_cap: usize) -> Result<CoalescenceReport> {
    exact_tails(c, m_cap, true, false, &Guards::default())
}

/// Full options: stop early, keep per-pair series, custom guards.
pub fn exact_tails(
    c: &CouplingMatrix,
    m_max: usize,
    stop_at_couple: bool,
    keep_pairs: bool,
    guards: &Guards,
) -> Result<CoalescenceReport> {
    let n = c.num_states();
    if n > guards.exact_states {
        return Err(Error::GuardExceeded {
            what: "number of states",
            size: n,
            limit: guards.exact_states,
            hint: "use the Monte Carlo coalescence estimator",
        });
    }
    let off: Vec<usize> = (0..n * n).filter(|&s| { let (x, y) = pair_of(s, n); x != y }).collect();
    let mut v: Vec<f64> = (0..n * n).map(|s| { let (x, y) = pair_of(s, n); if x != y { 1.0 } else { 0.0 } }).collect();
    let mut acc = vec![0.0; n * n];
    let mut pairs: Vec<PairTail> = if keep_pairs {
        off.iter().map(|&s| { let (x, y) = pair_of(s, n); PairTail { x, y, tails: Vec::new(), half_widths: Vec::new() } }).collect()
    } else {
        Vec::new()
    };
    let mut m_grid = Vec::new();
    let mut tail_max = Vec::new();
    let mut worst_pairs = Vec::new();
    let mut t_couple = None;
    for m in 0..=m_max {
        let (mut best, mut arg) = (0.0, (0, 0));
        for &s in &off {
            if v[s] > best {
                best = v[s];
                arg = pair_of(s, n);
            }
        }
        if off.is_empty() {
            best = 0.0;
        }
        for (a, b) in acc.iter_mut().zip(&v) {
            *a += b;
        }
        for (pt, &s) in pairs.iter_mut().zip(&off) {
            pt.tails.push(v[s]);
        }
        m_grid.push(m);
        tail_max.push(best);
        worst_pairs.push(arg);
        if t_couple.is_none() && best <= 0.25 + EXACT_THRESHOLD_SLACK {
            t_couple = Some(m);
            if stop_at_couple {
                break;
            }
        }
        if m < m_max {
            v = c.apply_transpose(&v);
        }
    }
    let last = *m_grid.last().unwrap_or(&0);
    let e_tau = off.iter().map(|&s| acc[s]).fold(0.0, f64::max);
    Ok(CoalescenceReport {
        mode: TailMode::Exact,
        num_states: n,
        m_grid,
        tail_max,
        tail_ci_hi: None,
        worst_pairs,
        pairs,
        expected_tau: Some((e_tau, last)),
        t_couple,
    })
}

/// Number of trajectories, among `trajectories`, that have not coalesced
/// by each `m` of the grid. Trajectory `t` uses stream
/// `trajectory_stream(slot, t)`, so the counts for disjoint ranges add up
/// to the count for their union regardless of evaluation order.
pub fn tail_counts(
    rmr: &dyn RandomMapping,
    start: (usize, usize),
    slot: usize,
    m_grid: &[usize],
    seed: u64,
    trajectories: Range<u64>,
) -> Vec<u64> {
    let sampler = Categorical::new(rmr.probabilities());
    let horizon = m_grid.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0u64; m_grid.len()];
    for t in trajectories {
        let mut rng = StreamRng::new(seed, trajectory_stream(slot, t));
        let (mut x, mut y) = start;
        let mut tau = 0usize;
        while x != y && tau < horizon {
            let r = sampler.sample(&mut rng);
            x = rmr.successor(x, r);
            y = rmr.successor(y, r);
            tau += 1;
        }
        // Not coalesced by the horizon: τ > every grid point.
        let tau = if x != y { usize::MAX } else { tau };
        for (k, &m) in m_grid.iter().enumerate() {
            if tau > m {
                counts[k] += 1;
            }
        }
    }
    counts
}

/// `max(1.96·√(p̂(1−p̂)/n), 3/n)`.
pub fn ci_half_width(p_hat: f64, samples: u64) -> f64 {
    let n = samples as f64;
    (1.96 * math::sqrt(p_hat * (1.0 - p_hat) / n)).max(3.0 / n)
}

/// Validates Monte Carlo arguments shared by the sequential and parallel
/// drivers.
pub fn check_mc_args(rmr: &dyn RandomMapping, start_pairs: &[(usize, usize)], m_grid: &[usize], samples: u64) -> Result<()> {
    if start_pairs.is_empty() || m_grid.is_empty() {
        return Err(Error::InvalidArgument("start pairs and m grid must be non-empty".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    if samples >= 1 << crate::rng::TRAJECTORY_BITS {
        return Err(Error::InvalidArgument(format!("samples must be below 2^{}", crate::rng::TRAJECTORY_BITS)));
    }
    let n = rmr.num_states();
    if let Some(p) = start_pairs.iter().find(|(x, y)| *x >= n || *y >= n) {
        return Err(Error::InvalidArgument(format!("start pair {p:?} outside 0..{n}")));
    }
    Ok(())
}

/// Assembles a Monte Carlo report from per-pair counts.
pub fn report_from_counts(
    num_states: usize,
    start_pairs: &[(usize, usize)],
    m_grid: &[usize],
    counts: &[Vec<u64>],
    samples: u64,
    seed: u64,
) -> CoalescenceReport {
    let pairs: Vec<PairTail> = start_pairs
        .iter()
        .zip(counts)
        .map(|(&(x, y), c)| {
            let tails: Vec<f64> = c.iter().map(|&k| k as f64 / samples as f64).collect();
            let half_widths = tails.iter().map(|&p| ci_half_width(p, samples)).collect();
            PairTail { x, y, tails, half_widths }
        })
        .collect();
    let mut tail_max = Vec::with_capacity(m_grid.len());
    let mut ci_hi = Vec::with_capacity(m_grid.len());
    let mut worst_pairs = Vec::with_capacity(m_grid.len());
    for k in 0..m_grid.len() {
        let (mut best, mut arg, mut hi) = (0.0, start_pairs[0], 0.0_f64);
        for p in &pairs {
            if p.tails[k] > best {
                best = p.tails[k];
                arg = (p.x, p.y);
            }
            hi = hi.max((p.tails[k] + p.half_widths[k]).min(1.0));
        }
        tail_max.push(best);
        ci_hi.push(hi);
        worst_pairs.push(arg);
    }
    let t_couple = m_grid.iter().zip(&ci_hi).filter(|(_, &h)| h <= 0.25).map(|(&m, _)| m).min();
    CoalescenceReport {
        mode: TailMode::MonteCarlo { samples, seed },
        num_states,
        m_grid: m_grid.to_vec(),
        tail_max,
        tail_ci_hi: Some(ci_hi),
        worst_pairs,
        pairs,
        expected_tau: None,
        t_couple,
    }
}

/// Sequential Monte Carlo tails; the parallel driver in the `qcoupling`
/// crate produces identical output.
pub fn coalescence_tail_mc(
    rmr: &dyn RandomMapping,
    start_pairs: &[(usize, usize)],
    m_grid: &[usize],
    samples: u64,
    seed: u64,
) -> Result<CoalescenceReport> {
    check_mc_args(rmr, start_pairs, m_grid, samples)?;
    let counts: Vec<Vec<u64>> = start_pairs
        .iter()
        .enumerate()
        .map(|(slot, &pair)| tail_counts(rmr, pair, slot, m_grid, seed, 0..samples))
        .collect();
    Ok(report_from_counts(rmr.num_states(), start_pairs, m_grid, &counts, samples, seed))
}

/// `t_couple = min{m : max Pr{τ > m} ≤ 1/4}` on the report's grid. Monte
/// Carlo reports require the 95% upper limit to be at most 1/4.
pub fn coupling_time(report: &CoalescenceReport) -> Result<usize> {
    let hit = match (&report.mode, &report.tail_ci_hi) {
        (TailMode::MonteCarlo { .. }, Some(hi)) => report
            .m_grid
            .iter()
            .zip(hi)
            .filter(|(_, &h)| h <= 0.25)
            .map(|(&m, _)| m)
            .min(),
        _ => report
            .m_grid
            .iter()
            .zip(&report.tail_max)
            .filter(|(_, &t)| t <= 0.25 + EXACT_THRESHOLD_SLACK)
            .map(|(&m, _)| m)
            .min(),
    };
    hit.ok_or(Error::ThresholdNotResolved { last_m: report.m_grid.iter().copied().max().unwrap_or(0) })
}

/// Exact `t_couple`, searching up to [`default_m_cap`].
pub fn exact_coupling_time(c: &CouplingMatrix) -> Result<usize> {
    let report = coalescence_tail_exact_until_couple(c, default_m_cap(c.num_states()))?;
    coupling_time(&report)
}

/// `Pr_max{τ > l·m} ≤ (Pr_max{τ > m})^l`.
pub fn check_tail_submultiplicativity(c: &CouplingMatrix, m: usize, l: usize) -> Result<CheckResult> {
    if l == 0 {
        return Err(Error::InvalidArgument("l must be at least 1".into()));
    }
    let report = coalescence_tail_exact(c, l * m)?;
    let lhs = report.tail_max[l * m];
    let rhs = math::powi(report.tail_max[m], l as i32);
    Ok(CheckResult::at_most("tail submultiplicativity", lhs, rhs, COMPUTED_TOL, "Pr_max{τ > l·m} ≤ Pr_max{τ > m}^l")
        .with_detail(format!("m = {m}, l = {l}")))
}

/// Restricted to diagonal starts, `C^m` equals `P^m` on the diagonal and
/// puts no mass off it.
pub fn check_diagonal_block(c: &CouplingMatrix, m: usize) -> Result<CheckResult> {
    let n = c.num_states();
    if n > Guards::default().exact_states {
        return Err(Error::GuardExceeded {
            what: "number of states",
            size: n,
            limit: Guards::default().exact_states,
            hint: "block check needs exact powers",
        });
    }
    let p = c.base();
    let mut worst = 0.0_f64;
    for x in 0..n {
        let mut v = vec![0.0; n * n];
        v[pair_index(x, x, n)] = 1.0;
        let mut q = vec![0.0; n];
        q[x] = 1.0;
        for _ in 0..m {
            v = c.apply(&v);
            q = p.step(&q);
        }
        for s in 0..n * n {
            let (a, b) = pair_of(s, n);
            let want = if a == b { q[a] } else { 0.0 };
            worst = worst.max((v[s] - want).abs());
        }
    }
    Ok(CheckResult::residual("diagonal block equals P^m", worst, INPUT_TOL, "C^m restricted to diagonal starts = P^m")
        .with_detail(format!("m = {m}")))
}

/// `d(m) ≤ Pr_max{τ_coal > m}` for `m = 0..=m_max`; reports the smallest
/// slack.
pub fn check_coupling_inequality(c: &CouplingMatrix, m_max: usize) -> Result<CheckResult> {
    let d = chain::distance_series(c.base(), m_max)?;
    let tails = coalescence_tail_exact(c, m_max)?;
    let (mut worst_m, mut worst_gap) = (0, f64::INFINITY);
    for m in 0..=m_max {
        let gap = tails.tail_max[m] - d[m];
        if gap < worst_gap {
            worst_gap = gap;
            worst_m = m;
        }
    }
    Ok(CheckResult::at_most("mixing below coalescence", d[worst_m], tails.tail_max[worst_m], COMPUTED_TOL, "d(m) ≤ Pr_max{τ_coal > m}")
        .with_detail(format!("tightest at m = {worst_m}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Lazy hypercube mapping: r = 2·i + b sets bit i to b.
    struct Cube(usize);

    impl Cube {
        fn probs(&self) -> Vec<f64> {
            vec![1.0 / (2 * self.0) as f64; 2 * self.0]
        }
    }

    fn cube_rmr(n: usize) -> RandomMappingRep {
        let c = Cube(n);
        let k = 2 * n;
        let table = (0..1usize << n)
            .map(|x| (0..k).map(|r| (x & !(1 << (r / 2))) | ((r % 2) << (r / 2))).collect())
            .collect();
        let labels = (0..k).map(|r| format!("{}:{}", r / 2, r % 2)).collect();
        RandomMappingRep::new(1 << n, labels, c.probs(), table).unwrap()
    }

    // Inclusion-exclusion tail for n coordinates, each refreshed w.p. 1/n.
    fn coupon_tail(n: usize, m: usize) -> f64 {
        let mut s = 0.0;
        let mut binom = 1.0;
        for j in 1..=n {
            binom = binom * (n + 1 - j) as f64 / j as f64;
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            s += sign * binom * (1.0 - j as f64 / n as f64).powi(m as i32);
        }
        s
    }

    #[test]
    fn independent_coupling_of_fair_coin() {
        let p = TransitionMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let c = independent_coupling(&p).unwrap();
        let from = pair_index(0, 1, 2);
        for s in 0..4 {
            assert_eq!(c.get(s, from), 0.25);
        }
        let from = pair_index(0, 0, 2);
        assert_eq!(c.get(pair_index(0, 0, 2), from), 0.5);
        assert_eq!(c.get(pair_index(1, 1, 2), from), 0.5);
        assert_eq!(c.get(pair_index(0, 1, 2), from), 0.0);
        assert!(validate_coupling(&c).valid);
    }

    #[test]
    fn independent_coupling_rejects_periodic_base() {
        let p = TransitionMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(independent_coupling(&p), Err(Error::NotErgodic(_))));
    }

    #[test]
    fn broken_symmetry_is_located() {
        let p = TransitionMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let mut d = independent_coupling(&p).unwrap().to_dense();
        // Shift mass inside column (0,1) without touching its marginals'
        // column sums: (0,0)+ε, (0,1)−ε, (1,1)+ε, (1,0)−ε keeps marginals.
        let col = pair_index(0, 1, 2);
        d[(pair_index(0, 0, 2), col)] += 0.1;
        d[(pair_index(0, 1, 2), col)] -= 0.1;
        d[(pair_index(1, 1, 2), col)] += 0.1;
        d[(pair_index(1, 0, 2), col)] -= 0.1;
        let c = CouplingMatrix::from_dense(p, &d).unwrap();
        let v = validate_coupling(&c);
        assert!(!v.valid);
        assert!(v.condition(Condition::MarginalFirst).holds());
        assert!(v.condition(Condition::MarginalSecond).holds());
        let sym = v.condition(Condition::Symmetry);
        assert!(!sym.holds());
        let w = sym.worst.unwrap();
        assert!((w.magnitude - 0.1).abs() < 1e-12);
    }

    #[test]
    fn coalescence_violation_is_flagged() {
        let p = TransitionMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let mut d = independent_coupling(&p).unwrap().to_dense();
        let col = pair_index(1, 1, 2);
        d[(pair_index(1, 1, 2), col)] = 0.0;
        d[(pair_index(1, 0, 2), col)] = 0.5;
        let c = CouplingMatrix::from_dense(p, &d).unwrap();
        let v = validate_coupling(&c);
        assert!(!v.condition(Condition::Coalescence).holds());
    }

    #[test]
    fn grand_coupling_single_bit() {
        let rmr = cube_rmr(1);
        let c = grand_coupling_matrix(&rmr).unwrap();
        let from = pair_index(0, 1, 2);
        assert_eq!(c.get(pair_index(0, 0, 2), from), 0.5);
        assert_eq!(c.get(pair_index(1, 1, 2), from), 0.5);
        assert!(validate_coupling(&c).valid);
        let r = coalescence_tail_exact(&c, 4).unwrap();
        assert_eq!(r.tail_max[0], 1.0);
        assert!(r.tail_max[1..].iter().all(|&t| t == 0.0));
        assert_eq!(coupling_time(&r).unwrap(), 1);
    }

    #[test]
    fn grand_coupling_marginals_match_walk() {
        let rmr = cube_rmr(2);
        let c = grand_coupling_matrix(&rmr).unwrap();
        let v = validate_coupling(&c);
        assert!(v.valid, "{:?}", v);
        // Base kernel: stay w.p. 1/2, flip each bit w.p. 1/4.
        let p = c.base();
        assert_eq!(p.prob(0, 0), 0.5);
        assert_eq!(p.prob(1, 0), 0.25);
        assert_eq!(p.prob(3, 0), 0.0);
    }

    #[test]
    fn hypercube_two_tails_match_coupon_oracle() {
        let c = grand_coupling_matrix(&cube_rmr(2)).unwrap();
        let r = coalescence_tail_exact(&c, 12).unwrap();
        for m in 1..=12 {
            let want = 0.5f64.powi(m as i32 - 1);
            assert!((r.tail_max[m] - want).abs() < 1e-14, "m = {m}");
            assert!((coupon_tail(2, m) - want).abs() < 1e-14);
        }
        assert_eq!(coupling_time(&r).unwrap(), 3);
        assert_eq!(exact_coupling_time(&c).unwrap(), 3);
        assert!(r.tail_max.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn hypercube_three_coupling_time() {
        let c = grand_coupling_matrix(&cube_rmr(3)).unwrap();
        let r = coalescence_tail_exact(&c, 10).unwrap();
        for m in 0..=10 {
            assert!((r.tail_max[m] - coupon_tail(3, m)).abs() < 1e-13);
        }
        assert_eq!(coupling_time(&r).unwrap(), 7);
    }

    #[test]
    fn exact_tail_equals_block_norm() {
        // ‖B^m‖₁ via dense powers of the off-diagonal block.
        let c = grand_coupling_matrix(&cube_rmr(2)).unwrap();
        let d = c.to_dense();
        let n = 4;
        let off: Vec<usize> = (0..16).filter(|&s| s / n != s % n).collect();
        let b = Matrix::from_fn(off.len(), off.len(), |i, j| d[(off[i], off[j])]);
        let r = coalescence_tail_exact(&c, 6).unwrap();
        let mut bm = Matrix::identity(off.len());
        for m in 0..=6 {
            assert!((bm.norm_one() - r.tail_max[m]).abs() < 1e-13);
            bm = b.matmul(&bm);
        }
    }

    #[test]
    fn submultiplicativity_examples() {
        let c = grand_coupling_matrix(&cube_rmr(2)).unwrap();
        let r = check_tail_submultiplicativity(&c, 3, 2).unwrap();
        assert!((r.lhs - 1.0 / 32.0).abs() < 1e-14);
        assert!((r.rhs - 1.0 / 16.0).abs() < 1e-14);
        assert!(r.pass);
        let r = check_tail_submultiplicativity(&c, 4, 1).unwrap();
        assert_eq!(r.lhs, r.rhs);
        assert!(check_diagonal_block(&c, 5).unwrap().pass);
        assert!(check_coupling_inequality(&c, 20).unwrap().pass);
    }

    #[test]
    fn mc_matches_exact_and_is_chunk_invariant() {
        let rmr = cube_rmr(2);
        let grid = [1, 3];
        let r = coalescence_tail_mc(&rmr, &[(0, 3)], &grid, 1, 9).unwrap();
        assert_eq!(r.tail_max[0], 1.0);
        let r = coalescence_tail_mc(&rmr, &[(0, 3)], &grid, 20_000, 9).unwrap();
        let hw = r.pairs[0].half_widths[1];
        assert!((r.tail_max[1] - 0.25).abs() < 2.0 * hw);
        let whole = tail_counts(&rmr, (0, 3), 0, &grid, 9, 0..20_000);
        let a = tail_counts(&rmr, (0, 3), 0, &grid, 9, 0..7_000);
        let b = tail_counts(&rmr, (0, 3), 0, &grid, 9, 7_000..20_000);
        assert_eq!(whole, vec![a[0] + b[0], a[1] + b[1]]);
    }

    #[test]
    fn mc_single_bit_coalesces_immediately() {
        let r = coalescence_tail_mc(&cube_rmr(1), &[(0, 1)], &[1, 2], 500, 3).unwrap();
        assert_eq!(r.tail_max, vec![0.0, 0.0]);
        assert_eq!(coupling_time(&r).unwrap(), 1);
    }

    #[test]
    fn straddling_ci_is_unresolved() {
        // 10 samples: half-width ≥ 3/10, so the upper limit never drops to 1/4.
        let r = coalescence_tail_mc(&cube_rmr(2), &[(0, 3)], &[2, 3, 4], 10, 1).unwrap();
        let e = coupling_time(&r).unwrap_err();
        assert!(e.to_string().contains("threshold not resolved"));
    }

    #[test]
    fn ci_half_width_has_floor() {
        assert_eq!(ci_half_width(0.0, 100), 0.03);
        assert!((ci_half_width(0.5, 10_000) - 1.96 * 0.005).abs() < 1e-15);
    }

    #[test]
    fn rmr_validation() {
        assert!(RandomMappingRep::new(2, vec!["a".into()], vec![0.9], vec![vec![0], vec![1]]).is_err());
        assert!(RandomMappingRep::new(2, vec!["a".into()], vec![1.0], vec![vec![2], vec![1]]).is_err());
        let rmr = cube_rmr(2);
        let p = rmr.transition_matrix().unwrap();
        assert!(rmr.validate_against(&p).is_ok());
        let q = TransitionMatrix::from_matrix(Matrix::from_fn(4, 4, |_, _| 0.25)).unwrap();
        assert!(rmr.validate_against(&q).is_err());
    }

    #[test]
    fn exact_guard_points_to_mc() {
        let rmr = cube_rmr(7);
        match grand_coupling_matrix(&rmr) {
            Err(Error::GuardExceeded { hint, .. }) => assert!(hint.contains("Monte Carlo")),
            other => panic!("{other:?}"),
        }
    }
}
