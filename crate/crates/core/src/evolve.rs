//! Density-matrix evolution toward the qsample and the convergence checks
//! that relate it to classical coalescence.

use alloc::format;
use alloc::vec::Vec;

use crate::chain::Distribution;
use crate::check::CheckResult;
use crate::coupling::{self, CoalescenceReport, CouplingMatrix, TailMode};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::math;
use crate::quantize::{self, Channel, Superoperator};
use crate::rng::StreamRng;
use crate::{Guards, COMPUTED_TOL, INPUT_TOL};

/// Real symmetric, positive semidefinite, trace-one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Matrix);

impl DensityMatrix {
    /// Checks symmetry (`1e-12`), trace (`1e-10`) and eigenvalues
    /// (`≥ −1e-10`).
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidState(format!("{}x{} is not square", m.rows(), m.cols())));
        }
        let asym = m.asymmetry();
        if asym > INPUT_TOL {
            return Err(Error::InvalidState(format!("asymmetric by {asym:e}")));
        }
        let tr = m.trace();
        if (tr - 1.0).abs() > COMPUTED_TOL {
            return Err(Error::InvalidState(format!("trace is {tr}")));
        }
        let min = linalg::symmetric_eigenvalues(&m.symmetrized())[0];
        if min < -COMPUTED_TOL {
            return Err(Error::InvalidState(format!("eigenvalue {min:e} is negative")));
        }
        Ok(Self(m))
    }

    /// `|v⟩⟨v| / ⟨v|v⟩`.
    pub fn pure(v: &[f64]) -> Result<Self> {
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        if !(norm2 > 0.0) {
            return Err(Error::InvalidState("zero vector".into()));
        }
        Ok(Self(Matrix::outer(v, v).scale(1.0 / norm2)))
    }

    pub fn basis(n: usize, x: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        m[(x, x)] = 1.0;
        Self(m)
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self(Matrix::identity(n).scale(1.0 / n as f64))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Seeded random state `G² / tr(G²)` with `G` symmetric, entries uniform
/// in `[−1, 1)`.
pub fn random_density_matrix(n: usize, seed: u64, stream: u64) -> DensityMatrix {
    let mut rng = StreamRng::new(seed, stream);
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = 2.0 * rng.uniform() - 1.0;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let g2 = g.matmul(&g);
    let tr = g2.trace();
    DensityMatrix(g2.scale(1.0 / tr).symmetrized())
}

/// Seeded unit vector with entries drawn uniformly from `[−1, 1)` before
/// normalization.
pub fn random_unit_vector(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = StreamRng::new(seed, stream);
    let v: Vec<f64> = (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / norm).collect()
}

/// Amplitudes `a_x = √π_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qsample {
    amplitudes: Vec<f64>,
}

impl Qsample {
    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    /// `Q = |√π⟩⟨√π|`.
    pub fn projector(&self) -> Matrix {
        Matrix::outer(&self.amplitudes, &self.amplitudes)
    }

    /// `Q⊥ = I − Q`.
    pub fn complement(&self) -> Matrix {
        Matrix::identity(self.dim()).sub(&self.projector())
    }

    pub fn state(&self) -> DensityMatrix {
        DensityMatrix(self.projector())
    }

    /// `tr(Q⊥ M) = tr M − ⟨√π|M|√π⟩`.
    pub fn perp_overlap(&self, m: &Matrix) -> f64 {
        m.trace() - m.quadratic_form(&self.amplitudes)
    }
}

pub fn qsample(pi: &Distribution) -> Result<Qsample> {
    if let Some((x, w)) = pi.weights().iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("weight {x} is {w}")));
    }
    let mut amplitudes: Vec<f64> = pi.weights().iter().map(|&w| math::sqrt(w)).collect();
    let norm = math::sqrt(amplitudes.iter().map(|a| a * a).sum());
    amplitudes.iter_mut().for_each(|a| *a /= norm);
    Ok(Qsample { amplitudes })
}

/// `½‖ρ − σ‖_tr`.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    half_trace_norm_diff(rho.matrix(), sigma.matrix())
}

fn half_trace_norm_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.rows(), found: b.rows() });
    }
    Ok(0.5 * linalg::symmetric_trace_norm(&a.sub(b).symmetrized()))
}

/// One step of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub m: usize,
    /// `½‖ρ_m − Q‖_tr`.
    pub trace_distance: f64,
    /// `tr(Q⊥ ρ_m)`.
    pub qperp_overlap: f64,
    pub classical_tail_max: Option<f64>,
    /// `Pr_max{τ > m} / π_*`.
    pub qperp_bound: Option<f64>,
    /// `min(1, √(Pr_max{τ > m} / π_*))`.
    pub theorem_envelope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub pi_min: f64,
    pub rows: Vec<TraceRow>,
    /// `tr(Q⊥ρ_m)` never increased by more than `1e-10` (recorded only).
    pub overlap_monotone: bool,
    /// Trace distance to `Q` never increased by more than `1e-10`.
    pub distance_monotone: bool,
}

impl ConvergenceTrace {
    /// Largest `tr(Q⊥ρ_m)·π_* / Pr_max{τ > m}` over rows with a positive
    /// tail.
    pub fn worst_ratio(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| match r.classical_tail_max {
                Some(t) if t > 0.0 => Some(r.qperp_overlap * self.pi_min / t),
                _ => None,
            })
            .reduce(f64::max)
    }
}

fn require_cp(t: &dyn Channel) -> Result<()> {
    if t.cp_verified() {
        Ok(())
    } else {
        Err(Error::NotCpVerified)
    }
}

fn step(t: &dyn Channel, rho: &Matrix) -> Result<Matrix> {
    Ok(t.apply_matrix(rho)?.symmetrized())
}

/// Evolves `ρ0` for `m_max` steps, recording distance to `Q` and the
/// overlap with `Q⊥`; attaches classical tails when a report is given.
pub fn evolve_trace(
    t: &dyn Channel,
    rho0: &DensityMatrix,
    q: &Qsample,
    m_max: usize,
    report: Option<&CoalescenceReport>,
) -> Result<ConvergenceTrace> {
    require_cp(t)?;
    if rho0.dim() != t.dim() || q.dim() != t.dim() {
        return Err(Error::DimensionMismatch { expected: t.dim(), found: rho0.dim() });
    }
    let pi_min = q.amplitudes().iter().map(|a| a * a).fold(f64::INFINITY, f64::min);
    let target = q.projector();
    let mut rho = rho0.matrix().clone();
    let mut rows = Vec::with_capacity(m_max + 1);
    for m in 0..=m_max {
        if m > 0 {
            rho = step(t, &rho)?;
        }
        let tail = report.and_then(|r| r.tail_at(m));
        let bound = tail.map(|t| t / pi_min);
        rows.push(TraceRow {
            m,
            trace_distance: half_trace_norm_diff(&rho, &target)?,
            qperp_overlap: q.perp_overlap(&rho),
            classical_tail_max: tail,
            qperp_bound: bound,
            theorem_envelope: bound.map(|b| math::sqrt(b).min(1.0)),
        });
    }
    let overlap_monotone = rows.windows(2).all(|w| w[1].qperp_overlap <= w[0].qperp_overlap + COMPUTED_TOL);
    let distance_monotone = rows.windows(2).all(|w| w[1].trace_distance <= w[0].trace_distance + COMPUTED_TOL);
    Ok(ConvergenceTrace { pi_min, rows, overlap_monotone, distance_monotone })
}

/// Edge state `|−_{x,y}⟩⟨−_{x,y}|` with `|−_{x,y}⟩ = (|x⟩ − |y⟩)/√2`.
pub fn edge_laplacian(n: usize, x: usize, y: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    if x != y {
        m[(x, x)] = 0.5;
        m[(y, y)] = 0.5;
        m[(x, y)] = -0.5;
        m[(y, x)] = -0.5;
    }
    m
}

/// `C*(L_{x,y}) = Σ c_{(x',y'),(x,y)} L_{x',y'}` entrywise.
pub fn laplacian_preservation_check(c: &CouplingMatrix, x: usize, y: usize) -> Result<CheckResult> {
    let n = c.num_states();
    if x == y || x >= n || y >= n {
        return Err(Error::InvalidArgument(format!("need distinct states below {n}, got ({x}, {y})")));
    }
    coupling::require_valid(c)?;
    let lhs = quantize::c_star_apply(c, &edge_laplacian(n, x, y))?;
    let mut rhs = Matrix::zeros(n, n);
    for &(row, v) in c.column(coupling::pair_index(x, y, n)) {
        let (xp, yp) = coupling::pair_of(row, n);
        rhs.add_assign_scaled(&edge_laplacian(n, xp, yp), v);
    }
    Ok(CheckResult::residual("Laplacian preservation", lhs.max_abs_diff(&rhs), INPUT_TOL, "C*(L_xy) = Σ c L_x'y'")
        .with_detail(format!("start pair ({x}, {y})")))
}

/// `D^{1/2} Q⊥ D^{1/2} = Σ_{x,y} π_x π_y L_{x,y}` entrywise.
pub fn rescaled_qperp_decomposition_check(pi: &Distribution) -> Result<CheckResult> {
    let n = pi.len();
    let q = qsample(pi)?;
    let half = Matrix::diag(q.amplitudes());
    let lhs = half.matmul(&q.complement()).matmul(&half);
    let w = pi.weights();
    let mut rhs = Matrix::zeros(n, n);
    for x in 0..n {
        for y in 0..n {
            rhs.add_assign_scaled(&edge_laplacian(n, x, y), w[x] * w[y]);
        }
    }
    Ok(CheckResult::residual("rescaled Q-perp decomposition", lhs.max_abs_diff(&rhs), INPUT_TOL, "D^½ Q⊥ D^½ = Σ π_x π_y L_xy"))
}

/// `Pr_{x,y}{τ > m} = tr((C*)^m(L_{x,y}))` for every `x ≠ y`.
pub fn coalescence_trace_identity_check(c: &CouplingMatrix, m: usize) -> Result<CheckResult> {
    let n = c.num_states();
    let report = coupling::exact_tails(c, m, false, true, &Guards::default())?;
    let mut worst = 0.0_f64;
    for p in &report.pairs {
        let mut l = edge_laplacian(n, p.x, p.y);
        for _ in 0..m {
            l = quantize::c_star_apply(c, &l)?;
        }
        worst = worst.max((l.trace() - p.tails[m]).abs());
    }
    Ok(CheckResult::residual("coalescence trace identity", worst, COMPUTED_TOL, "Pr{τ > m} = tr((C*)^m(L_xy))")
        .with_detail(format!("m = {m}, {} pairs", report.pairs.len())))
}

fn require_exact(report: &CoalescenceReport) -> Result<()> {
    if report.mode != TailMode::Exact {
        return Err(Error::InvalidArgument("missing exact tails: the report is Monte Carlo".into()));
    }
    Ok(())
}

/// `tr(Q⊥ T^m(ρ0)) ≤ Pr_max{τ > m}/π_*` for each `ρ0` and grid point.
/// Rows with a bound of at least 1 are vacuous and excluded.
pub fn qperp_bound_check(
    t: &dyn Channel,
    pi: &Distribution,
    report: &CoalescenceReport,
    rho0_set: &[DensityMatrix],
    m_grid: &[usize],
) -> Result<CheckResult> {
    require_exact(report)?;
    let q = qsample(pi)?;
    let m_max = m_grid.iter().copied().max().unwrap_or(0);
    if let Some(m) = m_grid.iter().find(|&&m| report.tail_at(m).is_none()) {
        return Err(Error::InvalidArgument(format!("report has no tail at m = {m}")));
    }
    let (mut checked, mut vacuous, mut failed) = (0usize, 0usize, 0usize);
    let (mut worst_ratio, mut worst_lhs, mut worst_rhs) = (0.0_f64, 0.0, 0.0);
    for rho0 in rho0_set {
        let tr = evolve_trace(t, rho0, &q, m_max, Some(report))?;
        for &m in m_grid {
            let row = &tr.rows[m];
            let rhs = row.qperp_bound.unwrap_or(f64::INFINITY);
            if rhs >= 1.0 {
                vacuous += 1;
                continue;
            }
            checked += 1;
            let lhs = row.qperp_overlap;
            if lhs > rhs + COMPUTED_TOL {
                failed += 1;
            }
            let ratio = if rhs > 0.0 { lhs / rhs } else if lhs > COMPUTED_TOL { f64::INFINITY } else { 0.0 };
            if ratio >= worst_ratio {
                worst_ratio = ratio;
                worst_lhs = lhs;
                worst_rhs = rhs;
            }
        }
    }
    let mut r = CheckResult::at_most("Q-perp overlap bound", worst_lhs, worst_rhs, COMPUTED_TOL, "tr(Q⊥ T^m ρ) ≤ Pr_max{τ > m}/π_*")
        .with_detail(format!("{checked} rows checked, {vacuous} vacuous, {failed} failed, worst ratio {worst_ratio:.3e}"));
    r.pass = failed == 0;
    Ok(r)
}

/// `⌈½·log₂(1/(ε·π_*))⌉`.
pub fn theorem_multiplier(eps: f64, pi_min: f64) -> usize {
    let x = 0.5 * math::log2(1.0 / (eps * pi_min));
    math::ceil(x - INPUT_TOL).max(0.0) as usize
}

/// For each ε, evolves every `ρ0` for `⌈½ log₂(1/(επ_*))⌉·t_couple` steps
/// and requires `½‖T^m(ρ0) − Q‖_tr ≤ √ε`.
pub fn main_theorem_check(
    t: &dyn Channel,
    pi: &Distribution,
    report: &CoalescenceReport,
    rho0_set: &[DensityMatrix],
    eps_list: &[f64],
) -> Result<CheckResult> {
    let t_couple = coupling::coupling_time(report)?;
    let q = qsample(pi)?;
    let pi_min = pi.min_weight();
    let (mut worst, mut lhs, mut rhs) = (f64::NEG_INFINITY, 0.0, 0.0);
    let mut steps = Vec::new();
    for &eps in eps_list {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
        }
        let m = theorem_multiplier(eps, pi_min) * t_couple;
        steps.push(m);
        for rho0 in rho0_set {
            let d = evolve_trace(t, rho0, &q, m, None)?.rows[m].trace_distance;
            let bound = math::sqrt(eps);
            if d - bound > worst {
                worst = d - bound;
                lhs = d;
                rhs = bound;
            }
        }
    }
    Ok(CheckResult::at_most("main theorem", lhs, rhs, COMPUTED_TOL, "½‖T^m(ρ) − Q‖_tr ≤ √ε")
        .with_detail(format!("t_couple = {t_couple}, m per ε = {steps:?}")))
}

/// If `tr(Q⊥ρ) < ε` then `‖ρ − Q‖_tr ≤ 2√ε` (for rank-one `Q`,
/// `QρQ/tr(Qρ) = Q`). A violated precondition fails the check with a
/// note rather than erroring.
pub fn gentle_measurement_step_check(rho: &DensityMatrix, q: &Qsample, eps: f64) -> Result<CheckResult> {
    let overlap = q.perp_overlap(rho.matrix());
    let lhs = 2.0 * half_trace_norm_diff(rho.matrix(), &q.projector())?;
    let rhs = 2.0 * math::sqrt(eps);
    let r = CheckResult::at_most("gentle measurement", lhs, rhs, COMPUTED_TOL, "‖ρ − QρQ/tr(Qρ)‖_tr ≤ 2√ε");
    if overlap < eps {
        Ok(r.with_detail(format!("tr(Q⊥ρ) = {overlap:e}")))
    } else {
        Ok(r.and(false).with_detail(format!("precondition violated: tr(Q⊥ρ) = {overlap:e} ≥ ε = {eps:e}")))
    }
}

/// `tr(T^m(QρQ)·A) = ⟨√π|ρ|√π⟩·⟨√π|A|√π⟩` for `m = 0..=m_max`.
pub fn reducing_projector_check(t: &dyn Channel, q: &Qsample, pairs: &[(DensityMatrix, Matrix)], m_max: usize) -> Result<CheckResult> {
    let proj = q.projector();
    let mut worst = 0.0_f64;
    for (rho, a) in pairs {
        let want = rho.matrix().quadratic_form(q.amplitudes()) * a.quadratic_form(q.amplitudes());
        let mut x = proj.matmul(rho.matrix()).matmul(&proj);
        for m in 0..=m_max {
            if m > 0 {
                x = t.apply_matrix(&x)?;
            }
            worst = worst.max((x.hs_inner(a) - want).abs());
        }
    }
    Ok(CheckResult::residual("reducing projector", worst, COMPUTED_TOL, "T^m(QρQ) stays in span{Q}"))
}

/// `max|(T*)^m(Q) − I|` at the given `m`, against `1e-6`.
pub fn expanding_projector_check(t_star: &Superoperator, q: &Qsample, m: usize) -> Result<CheckResult> {
    let mut x = q.projector();
    for _ in 0..m {
        x = t_star.apply(&x)?;
    }
    let r = x.max_abs_diff(&Matrix::identity(q.dim()));
    Ok(CheckResult::residual("expanding projector", r, 1e-6, "(T*)^m(Q) → I").with_detail(format!("m = {m}")))
}

/// `½‖T^m(Q) − Q‖_tr ≤ 1e-8` for `m ≤ m_max`.
pub fn fixed_point_stability_check(t: &dyn Channel, q: &Qsample, m_max: usize) -> Result<CheckResult> {
    let target = q.projector();
    let mut x = target.clone();
    let mut worst = 0.0_f64;
    for _ in 0..m_max {
        x = step(t, &x)?;
        worst = worst.max(half_trace_norm_diff(&x, &target)?);
    }
    Ok(CheckResult::residual("fixed-point stability", worst, 1e-8, "T^m(Q) = Q").with_detail(format!("m ≤ {m_max}")))
}
