//! Superoperators built from couplings.
//!
//! Vectorization stacks columns, `vec(M)[i + N·j] = M[i][j]`, and Kronecker
//! products are left-factor-major, so `vec(A·M·B) = (Bᵀ ⊗ A)·vec(M)`. With
//! these choices the matrix of `C*` coincides entrywise with the coupling
//! matrix `C` (pair index `x·N + y`) whenever `C` is symmetric.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::OnceCell;

use crate::chain::{self, Distribution, TransitionMatrix};
use crate::check::CheckResult;
use crate::coupling::{self, pair_of, CouplingMatrix, RandomMapping};
use crate::error::{Error, Result};
use crate::evolve::DensityMatrix;
use crate::linalg::{self, Matrix};
use crate::math;
use crate::{Guards, COMPUTED_TOL, INPUT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// `C*(M) = Σ c_{(x',y'),(x,y)} M[x][y] |x'⟩⟨y'|`.
    CStar,
    /// `T*(M) = D^{-1/2} C*(D^{1/2} M D^{1/2}) D^{-1/2}`.
    TStar,
    /// Hilbert–Schmidt adjoint of `T*`.
    T,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Coupling,
    Kraus,
    /// Entries supplied directly, without coupling validation.
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpStatus {
    Verified,
    Failed,
    Unchecked,
}

/// Linear map on `N×N` matrices as an `N² × N²` matrix on `vec(M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    dim: usize,
    matrix: Matrix,
    pub kind: MapKind,
    pub provenance: Provenance,
    pub cp_status: CpStatus,
}

impl Superoperator {
    pub fn new(dim: usize, matrix: Matrix, kind: MapKind, provenance: Provenance) -> Result<Self> {
        if matrix.rows() != dim * dim || matrix.cols() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, found: matrix.rows().max(matrix.cols()) });
        }
        Ok(Self { dim, matrix, kind, provenance, cp_status: CpStatus::Unchecked })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// `unvec(S·vec(M))`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.dim || m.cols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: m.rows() });
        }
        Matrix::unvectorize(self.dim, &self.matrix.mul_vec(&m.vectorize()))
    }

    /// Adjoint under `⟨A, B⟩ = tr(AᵀB)`: the transposed matrix.
    pub fn adjoint(&self) -> Self {
        let kind = match self.kind {
            MapKind::TStar => MapKind::T,
            MapKind::T => MapKind::TStar,
            k => k,
        };
        Self {
            dim: self.dim,
            matrix: self.matrix.transpose(),
            kind,
            provenance: self.provenance,
            cp_status: self.cp_status,
        }
    }

    /// Computes the Choi spectrum and records the verdict in `cp_status`.
    pub fn verify_cp(&mut self) -> Result<f64> {
        let j = choi_matrix(self, FactorOrder::MapFirst);
        let min = min_choi_eigenvalue(&j)?;
        self.cp_status = if min >= -j.cp_tolerance() { CpStatus::Verified } else { CpStatus::Failed };
        Ok(min)
    }
}

fn superop_guard(n: usize) -> Result<()> {
    let limit = Guards::default().superop_states;
    if n > limit {
        return Err(Error::GuardExceeded {
            what: "number of states",
            size: n,
            limit,
            hint: "dense superoperators need N ≤ the superoperator guard; use Kraus evolution",
        });
    }
    Ok(())
}

/// `C*` assembled from its defining action on matrix units; rejects
/// couplings that fail validation.
pub fn c_star_superop(c: &CouplingMatrix) -> Result<Superoperator> {
    coupling::require_valid(c)?;
    let mut s = c_star_unchecked(c)?;
    s.provenance = Provenance::Coupling;
    Ok(s)
}

/// `C*` from arbitrary coupling entries (used for counterexamples that
/// break the coupling conditions).
pub fn c_star_unchecked(c: &CouplingMatrix) -> Result<Superoperator> {
    let n = c.num_states();
    superop_guard(n)?;
    let mut s = Matrix::zeros(n * n, n * n);
    for col in 0..n * n {
        let (x, y) = pair_of(col, n);
        for &(row, v) in c.column(col) {
            let (xp, yp) = pair_of(row, n);
            // |x'⟩⟨y'| has vec index x' + N·y'; M[x][y] sits at x + N·y.
            s[(xp + n * yp, x + n * y)] += v;
        }
    }
    Superoperator::new(n, s, MapKind::CStar, Provenance::Elementwise)
}

/// `C*(M)` evaluated from the sparse coupling without forming `N²×N²`.
pub fn c_star_apply(c: &CouplingMatrix, m: &Matrix) -> Result<Matrix> {
    let n = c.num_states();
    if m.rows() != n || m.cols() != n {
        return Err(Error::DimensionMismatch { expected: n, found: m.rows() });
    }
    let mut out = Matrix::zeros(n, n);
    for col in 0..n * n {
        let (x, y) = pair_of(col, n);
        let v = m[(x, y)];
        if v != 0.0 {
            for &(row, cv) in c.column(col) {
                let (xp, yp) = pair_of(row, n);
                out[(xp, yp)] += cv * v;
            }
        }
    }
    Ok(out)
}

/// `max |matrix(C*) − C|`.
pub fn c_star_matches_coupling(c: &CouplingMatrix, s: &Superoperator) -> CheckResult {
    let dense = c.to_dense();
    CheckResult::residual("matrix of C* equals C", s.matrix().max_abs_diff(&dense), INPUT_TOL, "vec(C*(M)) = C·vec(M)")
}

fn positive_weights(pi: &Distribution) -> Result<()> {
    if let Some((x, w)) = pi.weights().iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(Error::InvalidDistribution(format!("π_{x} = {w} is not positive")));
    }
    Ok(())
}

/// Returns `(T, T*)`.
pub fn quantized_coupling(c: &CouplingMatrix, pi: &Distribution) -> Result<(Superoperator, Superoperator)> {
    let n = c.num_states();
    if pi.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: pi.len() });
    }
    positive_weights(pi)?;
    let cs = c_star_superop(c)?;
    let sq: Vec<f64> = pi.weights().iter().map(|&w| math::sqrt(w)).collect();
    let scale = |v: usize| {
        let (i, j) = (v % n, v / n);
        sq[i] * sq[j]
    };
    let m = Matrix::from_fn(n * n, n * n, |r, k| cs.matrix()[(r, k)] * scale(k) / scale(r));
    let t_star = Superoperator::new(n, m, MapKind::TStar, Provenance::Coupling)?;
    Ok((t_star.adjoint(), t_star))
}

/// `max |T*(I) − I|`.
pub fn unitality_check(t_star: &Superoperator) -> Result<CheckResult> {
    let id = Matrix::identity(t_star.dim());
    let r = t_star.apply(&id)?.max_abs_diff(&id);
    Ok(CheckResult::residual("T*(I) = I", r, COMPUTED_TOL, "unitality of T*"))
}

/// `max |T(Q) − Q|` for `Q = |√π⟩⟨√π|`.
pub fn fixed_point_check(t: &Superoperator, pi: &Distribution) -> Result<CheckResult> {
    let a: Vec<f64> = pi.weights().iter().map(|&w| math::sqrt(w)).collect();
    let q = Matrix::outer(&a, &a);
    let r = t.apply(&q)?.max_abs_diff(&q);
    Ok(CheckResult::residual("T(Q) = Q", r, COMPUTED_TOL, "qsample is a fixed point"))
}

/// `max |tr T(M) − tr M|` over all matrix units `M`.
pub fn trace_preservation_check(t: &Superoperator) -> CheckResult {
    let n = t.dim();
    let mut worst = 0.0_f64;
    for k in 0..n * n {
        let tr: f64 = (0..n).map(|i| t.matrix()[(i + n * i, k)]).sum();
        let want = if k % n == k / n { 1.0 } else { 0.0 };
        worst = worst.max((tr - want).abs());
    }
    CheckResult::residual("trace preservation", worst, COMPUTED_TOL, "tr T(M) = tr M")
}

/// `max |⟨A, T(B)⟩ − ⟨T*(A), B⟩|` over the given pairs.
pub fn duality_check(t: &Superoperator, t_star: &Superoperator, pairs: &[(Matrix, Matrix)]) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for (a, b) in pairs {
        let l = a.hs_inner(&t.apply(b)?);
        let r = t_star.apply(a)?.hs_inner(b);
        worst = worst.max((l - r).abs());
    }
    Ok(CheckResult::residual("Hilbert–Schmidt duality", worst, COMPUTED_TOL, "⟨A, T(B)⟩ = ⟨T*(A), B⟩"))
}

/// Kraus operators `T_r` of a channel `ρ ↦ Σ T_r ρ T_rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausSet {
    dim: usize,
    labels: Vec<String>,
    ops: Vec<Matrix>,
}

impl KrausSet {
    /// Requires `Σ T_rᵀ T_r = I` within `1e-10`.
    pub fn new(dim: usize, labels: Vec<String>, ops: Vec<Matrix>) -> Result<Self> {
        if labels.len() != ops.len() || ops.is_empty() {
            return Err(Error::InvalidArgument(format!("{} labels for {} Kraus operators", labels.len(), ops.len())));
        }
        if let Some(op) = ops.iter().find(|o| o.rows() != dim || o.cols() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: op.rows() });
        }
        let k = Self { dim, labels, ops };
        let r = k.completeness_residual();
        if r > COMPUTED_TOL {
            return Err(Error::InvalidArgument(format!("Kraus condition fails by {r:e}")));
        }
        Ok(k)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ops(&self) -> &[Matrix] {
        &self.ops
    }

    /// `max |Σ T_rᵀ T_r − I|`.
    pub fn completeness_residual(&self) -> f64 {
        let mut sum = Matrix::zeros(self.dim, self.dim);
        for t in &self.ops {
            sum.add_assign_scaled(&t.transpose().matmul(t), 1.0);
        }
        sum.max_abs_diff(&Matrix::identity(self.dim))
    }

    /// `Σ T_r ρ T_rᵀ`, skipping zero entries of `T_r`.
    pub fn apply(&self, rho: &Matrix) -> Result<Matrix> {
        let n = self.dim;
        if rho.rows() != n || rho.cols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: rho.rows() });
        }
        let mut out = Matrix::zeros(n, n);
        for t in &self.ops {
            let nz: Vec<(usize, usize, f64)> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter_map(|(i, j)| {
                    let v = t[(i, j)];
                    (v != 0.0).then_some((i, j, v))
                })
                .collect();
            for &(i, j, a) in &nz {
                for &(k, l, b) in &nz {
                    out[(i, k)] += a * rho[(j, l)] * b;
                }
            }
        }
        Ok(out)
    }

    /// Largest number of nonzeros in any row or column of any `T_r`.
    pub fn max_sparsity(&self) -> usize {
        self.ops.iter().map(|t| t.max_row_nnz().max(t.max_col_nnz())).max().unwrap_or(0)
    }
}

/// `T_r = √Pr(r) Σ_x √(π_x / π_{f(x,r)}) |x⟩⟨f(x,r)|`.
pub fn kraus_from_grand(rmr: &dyn RandomMapping, labels: Vec<String>, pi: &Distribution) -> Result<KrausSet> {
    let n = rmr.num_states();
    if pi.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: pi.len() });
    }
    positive_weights(pi)?;
    if labels.len() != rmr.probabilities().len() {
        return Err(Error::InvalidMapping(format!("{} labels for {} outcomes", labels.len(), rmr.probabilities().len())));
    }
    let w = pi.weights();
    let ops = rmr
        .probabilities()
        .iter()
        .enumerate()
        .map(|(r, &pr)| {
            let mut t = Matrix::zeros(n, n);
            let a = math::sqrt(pr);
            for x in 0..n {
                let fx = rmr.successor(x, r);
                t[(x, fx)] += a * math::sqrt(w[x] / w[fx]);
            }
            t
        })
        .collect();
    KrausSet::new(n, labels, ops)
}

/// `Σ_r T_r ⊗ T_r`; CP by construction.
pub fn superop_from_kraus(k: &KrausSet) -> Result<Superoperator> {
    let n = k.dim();
    superop_guard(n)?;
    let mut s = Matrix::zeros(n * n, n * n);
    for t in k.ops() {
        s.add_assign_scaled(&t.kron(t), 1.0);
    }
    let mut out = Superoperator::new(n, s, MapKind::T, Provenance::Kraus)?;
    out.cp_status = CpStatus::Verified;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorOrder {
    /// `J = Σ_{x,y} S(|x⟩⟨y|) ⊗ |x⟩⟨y|`.
    MapFirst,
    /// `J = Σ_{x,y} |x⟩⟨y| ⊗ S(|x⟩⟨y|)`.
    BasisFirst,
}

#[derive(Debug, Clone)]
pub struct ChoiMatrix {
    dim: usize,
    matrix: Matrix,
    pub order: FactorOrder,
    eigenvalues: OnceCell<Vec<f64>>,
}

impl PartialEq for ChoiMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.order == other.order && self.matrix == other.matrix
    }
}

impl ChoiMatrix {
    pub fn new(dim: usize, matrix: Matrix, order: FactorOrder) -> Result<Self> {
        if matrix.rows() != dim * dim || matrix.cols() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, found: matrix.rows() });
        }
        Ok(Self { dim, matrix, order, eigenvalues: OnceCell::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// The same map in the other factor order (tensor swap).
    pub fn reordered(&self, order: FactorOrder) -> Self {
        if order == self.order {
            return self.clone();
        }
        let n = self.dim;
        let swap = |k: usize| (k % n) * n + k / n;
        let m = Matrix::from_fn(n * n, n * n, |i, j| self.matrix[(swap(i), swap(j))]);
        Self { dim: n, matrix: m, order, eigenvalues: OnceCell::new() }
    }

    /// `1e-9·max|J|`.
    pub fn cp_tolerance(&self) -> f64 {
        1e-9 * self.matrix.max_abs().max(f64::MIN_POSITIVE)
    }

    /// Ascending eigenvalues; errors if `J` is asymmetric beyond `1e-10`.
    pub fn eigenvalues(&self) -> Result<&[f64]> {
        let asym = self.matrix.asymmetry();
        if asym > COMPUTED_TOL {
            return Err(Error::Asymmetric(asym));
        }
        Ok(self.eigenvalues.get_or_init(|| linalg::symmetric_eigenvalues(&self.matrix.symmetrized())))
    }

    pub fn is_cp(&self) -> Result<bool> {
        Ok(min_choi_eigenvalue(self)? >= -self.cp_tolerance())
    }
}

/// Applies `S` to every matrix unit.
pub fn choi_matrix(s: &Superoperator, order: FactorOrder) -> ChoiMatrix {
    let n = s.dim();
    let sm = s.matrix();
    let m = Matrix::from_fn(n * n, n * n, |r, c| {
        let (big_r, small_r, big_c, small_c) = (r / n, r % n, c / n, c % n);
        let (a, x, b, y) = match order {
            FactorOrder::MapFirst => (big_r, small_r, big_c, small_c),
            FactorOrder::BasisFirst => (small_r, big_r, small_c, big_c),
        };
        sm[(a + n * b, x + n * y)]
    });
    ChoiMatrix { dim: n, matrix: m, order, eigenvalues: OnceCell::new() }
}

pub fn min_choi_eigenvalue(j: &ChoiMatrix) -> Result<f64> {
    Ok(j.eigenvalues()?[0])
}

/// Anything that maps `N×N` matrices linearly.
pub trait Channel {
    fn dim(&self) -> usize;
    fn apply_matrix(&self, m: &Matrix) -> Result<Matrix>;
    fn cp_verified(&self) -> bool;
}

impl Channel for Superoperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply_matrix(&self, m: &Matrix) -> Result<Matrix> {
        self.apply(m)
    }

    fn cp_verified(&self) -> bool {
        self.cp_status == CpStatus::Verified
    }
}

impl Channel for KrausSet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply_matrix(&self, m: &Matrix) -> Result<Matrix> {
        self.apply(m)
    }

    fn cp_verified(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelOutput {
    State(DensityMatrix),
    /// Output of a map that is not verified CP; positivity not asserted.
    Unverified(Matrix),
}

impl ChannelOutput {
    pub fn matrix(&self) -> &Matrix {
        match self {
            Self::State(d) => d.matrix(),
            Self::Unverified(m) => m,
        }
    }
}

pub fn apply_channel(map: &dyn Channel, rho: &DensityMatrix) -> Result<ChannelOutput> {
    let out = map.apply_matrix(rho.matrix())?;
    if map.cp_verified() {
        Ok(ChannelOutput::State(DensityMatrix::new(out.symmetrized())?))
    } else {
        Ok(ChannelOutput::Unverified(out))
    }
}

/// Blocks `diag(p_x) − p_x p_xᵀ` for every column `p_x` of `P`.
pub fn independent_choi_blocks(p: &TransitionMatrix) -> Vec<Matrix> {
    (0..p.num_states())
        .map(|x| {
            let px = p.column(x);
            Matrix::diag(&px).sub(&Matrix::outer(&px, &px))
        })
        .collect()
}

/// For the independent coupling, `J(C*)` (map factor first) splits into
/// `Σ_{x,y} |p_x⟩⟨p_y| ⊗ |x⟩⟨y|` plus `Σ_x (diag(p_x) − |p_x⟩⟨p_x|) ⊗ |x⟩⟨x|`,
/// and every block of the second sum is diagonally dominant with a
/// nonnegative diagonal.
pub fn independent_choi_structure_check(p: &TransitionMatrix) -> Result<CheckResult> {
    chain::require_ergodic(p)?;
    let n = p.num_states();
    let c = coupling::independent_coupling(p)?;
    let j = choi_matrix(&c_star_superop(&c)?, FactorOrder::MapFirst);
    let cols: Vec<Vec<f64>> = (0..n).map(|x| p.column(x)).collect();
    let blocks = independent_choi_blocks(p);
    let mut assembled = Matrix::zeros(n * n, n * n);
    for x in 0..n {
        for y in 0..n {
            let unit = Matrix::from_fn(n, n, |i, k| if i == x && k == y { 1.0 } else { 0.0 });
            assembled.add_assign_scaled(&Matrix::outer(&cols[x], &cols[y]).kron(&unit), 1.0);
            if x == y {
                assembled.add_assign_scaled(&blocks[x].kron(&unit), 1.0);
            }
        }
    }
    let residual = assembled.max_abs_diff(j.matrix());
    let mut dominance_gap = 0.0_f64;
    for b in &blocks {
        for i in 0..n {
            let off: f64 = (0..n).filter(|&k| k != i).map(|k| b[(i, k)].abs()).sum();
            dominance_gap = dominance_gap.max(off - b[(i, i)]).max(-b[(i, i)]);
        }
    }
    Ok(CheckResult::residual("independent Choi decomposition", residual, INPUT_TOL, "J(C*) = rank-one part + diagonally dominant blocks")
        .and(dominance_gap <= INPUT_TOL)
        .with_detail(format!("max dominance gap {dominance_gap:e}")))
}
