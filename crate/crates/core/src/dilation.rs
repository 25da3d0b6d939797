//! Statevector simulation of a Kraus channel through block-encodings.
//!
//! Registers are ordered control `k` (dimension κ), ancilla `a` (2) and
//! system `i` (d), flattened as `k·2d + a·d + i`. Each Kraus operator
//! `A_k` sits in the top-left block of a unitary `U_k`, and
//! `W = Σ_k |k⟩⟨k| ⊗ U_k` is applied block by block without forming the
//! full matrix.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::check::CheckResult;
use crate::error::{Error, Result};
use crate::evolve::DensityMatrix;
use crate::linalg::{psd_sqrt, symmetric_eigen, Matrix};
use crate::math;
use crate::quantize::KrausSet;
use crate::{Guards, COMPUTED_TOL};

/// Unitarity tolerance for completions and `W`.
pub const UNITARY_TOL: f64 = 1e-10;
/// Tolerance on `Σ B_kᵀB_k = (κ−1)I`.
pub const DEFECT_TOL: f64 = 1e-9;
/// Entrywise tolerance of the dilation route against the Kraus route.
pub const CHANNEL_TOL: f64 = 1e-9;

/// `U = [[A, C], [B, D]]` with `B = (I−AᵀA)^{1/2}`, `C = (I−AAᵀ)^{1/2}`,
/// `D = −Aᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEncoding {
    pub label: String,
    dim: usize,
    unitary: Matrix,
}

impl BlockEncoding {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unitary(&self) -> &Matrix {
        &self.unitary
    }

    fn block(&self, r: usize, c: usize) -> Matrix {
        let d = self.dim;
        Matrix::from_fn(d, d, |i, j| self.unitary[(r * d + i, c * d + j)])
    }

    /// Top-left block `A`.
    pub fn a(&self) -> Matrix {
        self.block(0, 0)
    }

    /// Lower-left block `B`, which sends `|0⟩⊗ξ` to the `|1⟩` branch.
    pub fn b(&self) -> Matrix {
        self.block(1, 0)
    }

    /// Top-right block `C`.
    pub fn c(&self) -> Matrix {
        self.block(0, 1)
    }

    /// Lower-right block `D`.
    pub fn d(&self) -> Matrix {
        self.block(1, 1)
    }

    /// `‖UᵀU − I‖_max`.
    pub fn unitarity_residual(&self) -> f64 {
        let n = 2 * self.dim;
        self.unitary.transpose().matmul(&self.unitary).max_abs_diff(&Matrix::identity(n))
    }
}

/// Completes a contraction `A` (spectral norm at most `1 + tol`) to a
/// real orthogonal `2d × 2d` matrix.
pub fn unitary_completion(a: &Matrix, tol: f64) -> Result<BlockEncoding> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { expected: a.rows(), found: a.cols() });
    }
    let norm = a.spectral_norm();
    if norm > 1.0 + tol {
        return Err(Error::NotContraction(norm));
    }
    let d = a.rows();
    let at = a.transpose();
    let id = Matrix::identity(d);
    let c = psd_sqrt(&id.sub(&a.matmul(&at)));
    let b = psd_sqrt(&id.sub(&at.matmul(a)));
    let mut u = Matrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            u[(i, j)] = a[(i, j)];
            u[(i, d + j)] = c[(i, j)];
            u[(d + i, j)] = b[(i, j)];
            u[(d + i, d + j)] = -at[(i, j)];
        }
    }
    let enc = BlockEncoding { label: String::new(), dim: d, unitary: u };
    let r = enc.unitarity_residual();
    if r > UNITARY_TOL {
        return Err(Error::NotContraction(norm));
    }
    Ok(enc)
}

/// Controlled block-encodings with uniform control state `|μ⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct DilationCircuit {
    dim: usize,
    blocks: Vec<BlockEncoding>,
    /// `‖Σ B_kᵀB_k − (κ−1)I‖_max` at construction.
    pub defect_residual: f64,
}

impl DilationCircuit {
    pub fn kappa(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `κ·2d`.
    pub fn total_dim(&self) -> usize {
        self.kappa() * 2 * self.dim
    }

    pub fn blocks(&self) -> &[BlockEncoding] {
        &self.blocks
    }

    #[inline]
    pub fn index(&self, k: usize, a: usize, i: usize) -> usize {
        k * 2 * self.dim + a * self.dim + i
    }

    /// Dense `W`, for inspection.
    pub fn w_matrix(&self) -> Matrix {
        let n = self.total_dim();
        let s = 2 * self.dim;
        let mut w = Matrix::zeros(n, n);
        for (k, b) in self.blocks.iter().enumerate() {
            for i in 0..s {
                for j in 0..s {
                    w[(k * s + i, k * s + j)] = b.unitary[(i, j)];
                }
            }
        }
        w
    }

    /// Largest unitarity residual over the blocks of `W`.
    pub fn w_unitarity_residual(&self) -> f64 {
        self.blocks.iter().map(BlockEncoding::unitarity_residual).fold(0.0, f64::max)
    }

    fn apply_w(&self, v: &[f64], transpose: bool) -> Vec<f64> {
        let s = 2 * self.dim;
        let mut out = vec![0.0; v.len()];
        for (k, b) in self.blocks.iter().enumerate() {
            let src = &v[k * s..(k + 1) * s];
            let dst = &mut out[k * s..(k + 1) * s];
            for i in 0..s {
                let mut acc = 0.0;
                for j in 0..s {
                    let u = if transpose { b.unitary[(j, i)] } else { b.unitary[(i, j)] };
                    acc += u * src[j];
                }
                dst[i] = acc;
            }
        }
        out
    }

    /// `W v`.
    pub fn w(&self, v: &[f64]) -> Vec<f64> {
        self.apply_w(v, false)
    }

    /// `Wᵀ v`.
    pub fn w_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.apply_w(v, true)
    }

    /// `2P − I` with `P = I_κ ⊗ |0⟩⟨0| ⊗ I_d`.
    pub fn reflect_good(&self, v: &mut [f64]) {
        for k in 0..self.kappa() {
            for i in 0..self.dim {
                let j = self.index(k, 1, i);
                v[j] = -v[j];
            }
        }
    }

    /// `2Π − I` with `Π = |μ⟩⟨μ| ⊗ |0⟩⟨0| ⊗ I_d`.
    pub fn reflect_input(&self, v: &mut [f64]) {
        let kappa = self.kappa();
        let mu = 1.0 / math::sqrt(kappa as f64);
        let mut proj = vec![0.0; self.dim];
        for k in 0..kappa {
            for (i, p) in proj.iter_mut().enumerate() {
                *p += mu * v[self.index(k, 0, i)];
            }
        }
        v.iter_mut().for_each(|x| *x = -*x);
        for k in 0..kappa {
            for (i, p) in proj.iter().enumerate() {
                v[self.index(k, 0, i)] += 2.0 * mu * p;
            }
        }
    }

    /// Grover step `G = −W R_in Wᵀ R_good`.
    pub fn grover(&self, v: &[f64]) -> Vec<f64> {
        let mut x = v.to_vec();
        self.reflect_good(&mut x);
        let mut x = self.w_transpose(&x);
        self.reflect_input(&mut x);
        let mut x = self.w(&x);
        x.iter_mut().for_each(|e| *e = -*e);
        x
    }

    /// `|Ψ⟩ = |μ⟩ ⊗ |0⟩ ⊗ ξ`.
    pub fn input_state(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.check_xi(xi)?;
        let mu = 1.0 / math::sqrt(self.kappa() as f64);
        let mut v = vec![0.0; self.total_dim()];
        for k in 0..self.kappa() {
            for (i, &x) in xi.iter().enumerate() {
                v[self.index(k, 0, i)] = mu * x;
            }
        }
        Ok(v)
    }

    /// `|0⟩ ⊗ Σ_k |k⟩ ⊗ A_k ξ`, a unit vector by the Kraus condition.
    pub fn target_state(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.check_xi(xi)?;
        let mut v = vec![0.0; self.total_dim()];
        for (k, b) in self.blocks.iter().enumerate() {
            for i in 0..self.dim {
                v[self.index(k, 0, i)] = (0..self.dim).map(|j| b.unitary[(i, j)] * xi[j]).sum();
            }
        }
        Ok(v)
    }

    fn check_xi(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: xi.len() });
        }
        let norm = norm(xi);
        if (norm - 1.0).abs() > COMPUTED_TOL {
            return Err(Error::InvalidState(format!("ξ must be a unit vector, norm is {norm}")));
        }
        Ok(())
    }

    /// Ancilla-0 part and ancilla-1 part of a register vector.
    fn split_branches(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut good = vec![0.0; v.len()];
        let mut bad = vec![0.0; v.len()];
        for k in 0..self.kappa() {
            for i in 0..self.dim {
                good[self.index(k, 0, i)] = v[self.index(k, 0, i)];
                bad[self.index(k, 1, i)] = v[self.index(k, 1, i)];
            }
        }
        (good, bad)
    }

    /// `Σ_{k,a} |v_{k,a}⟩⟨v_{k,a}|` on the system register.
    fn reduced_system(&self, v: &[f64]) -> Matrix {
        let d = self.dim;
        let mut rho = Matrix::zeros(d, d);
        for k in 0..self.kappa() {
            for a in 0..2 {
                let base = self.index(k, a, 0);
                let s = &v[base..base + d];
                for i in 0..d {
                    if s[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        rho[(i, j)] += s[i] * s[j];
                    }
                }
            }
        }
        rho
    }
}

fn norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Completes every Kraus operator and assembles the controlled circuit.
pub fn build_dilation(kraus: &KrausSet) -> Result<DilationCircuit> {
    build_dilation_with(kraus, &Guards::default())
}

pub fn build_dilation_with(kraus: &KrausSet, guards: &Guards) -> Result<DilationCircuit> {
    let d = kraus.dim();
    let kappa = kraus.ops().len();
    if kappa == 0 {
        return Err(Error::InvalidArgument("Kraus set is empty".into()));
    }
    let total = kappa * 2 * d;
    if total > guards.dilation_dim {
        return Err(Error::GuardExceeded {
            what: "dilation dimension κ·2d",
            size: total,
            limit: guards.dilation_dim,
            hint: "statevector simulation is desk scale only",
        });
    }
    let residual = kraus.completeness_residual();
    if residual > COMPUTED_TOL {
        return Err(Error::InvalidArgument(format!("Kraus condition violated by {residual:e}")));
    }
    let blocks = kraus
        .ops()
        .iter()
        .zip(kraus.labels())
        .map(|(a, label)| {
            let mut b = unitary_completion(a, COMPUTED_TOL)?;
            b.label = label.clone();
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = Matrix::zeros(d, d);
    for b in &blocks {
        let bk = b.b();
        sum.add_assign_scaled(&bk.transpose().matmul(&bk), 1.0);
    }
    let defect = sum.max_abs_diff(&Matrix::identity(d).scale((kappa - 1) as f64));
    if defect > DEFECT_TOL {
        return Err(Error::InvalidArgument(format!("Σ B_kᵀB_k deviates from (κ−1)I by {defect:e}")));
    }
    Ok(DilationCircuit { dim: d, blocks, defect_residual: defect })
}

/// Branch structure of `|Φ⟩ = W|Ψ⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchDecomposition {
    /// Norm of the ancilla-0 branch; `1/√κ` in theory.
    pub good_norm: f64,
    /// Norm of the ancilla-1 branch; `√(1 − 1/κ)` in theory.
    pub bad_norm: f64,
    /// `‖branch_0 − (1/√κ) Σ_k |k⟩⊗A_kξ‖_∞`.
    pub good_residual: f64,
}

pub fn branch_decomposition(circ: &DilationCircuit, xi: &[f64]) -> Result<BranchDecomposition> {
    let phi = circ.w(&circ.input_state(xi)?);
    let (good, bad) = circ.split_branches(&phi);
    let mu = 1.0 / math::sqrt(circ.kappa() as f64);
    let target = circ.target_state(xi)?;
    let good_residual = good.iter().zip(&target).map(|(g, t)| (g - mu * t).abs()).fold(0.0, f64::max);
    Ok(BranchDecomposition { good_norm: norm(&good), bad_norm: norm(&bad), good_residual })
}

/// Branch norms `1/√κ` and `√(1−1/κ)`, the ancilla-0 branch equal to
/// `(1/√κ) Σ_k |k⟩⊗A_kξ`, and unit `|φ₀⟩`, `|φ₁⟩`; all within `1e-10`.
pub fn state_decomposition_check(circ: &DilationCircuit, xi: &[f64]) -> Result<CheckResult> {
    let b = branch_decomposition(circ, xi)?;
    let kappa = circ.kappa() as f64;
    let want_good = 1.0 / math::sqrt(kappa);
    let want_bad = math::sqrt(1.0 - 1.0 / kappa);
    let phi0 = b.good_norm / want_good;
    // |φ₁⟩ is undefined when κ = 1 and the branch vanishes.
    let phi1 = if circ.kappa() > 1 { b.bad_norm / want_bad } else { 1.0 };
    let worst = [
        (b.good_norm - want_good).abs(),
        (b.bad_norm - want_bad).abs(),
        b.good_residual,
        (phi0 - 1.0).abs(),
        (phi1 - 1.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(CheckResult::residual("dilation branch amplitudes", worst, COMPUTED_TOL, "W|Ψ⟩ = (1/√κ)|0⟩|φ₀⟩ + √(1−1/κ)|1⟩|φ₁⟩")
        .with_detail(format!("κ = {}, branch norms ({:.12}, {:.12})", circ.kappa(), b.good_norm, b.bad_norm)))
}

/// Applies `G^iterations W` to `|Ψ⟩`; returns the state and
/// `|⟨target|state⟩|`.
pub fn amplify_and_extract(circ: &DilationCircuit, xi: &[f64], iterations: usize) -> Result<(Vec<f64>, f64)> {
    let mut v = circ.w(&circ.input_state(xi)?);
    for _ in 0..iterations {
        v = circ.grover(&v);
    }
    let target = circ.target_state(xi)?;
    let fidelity = dot(&target, &v).abs() / norm(&target);
    Ok((v, fidelity))
}

/// `|sin((2ℓ+1)θ)|` with `sin θ = 1/√κ`.
pub fn predicted_fidelity(kappa: usize, iterations: usize) -> f64 {
    let theta = math::asin(1.0 / math::sqrt(kappa as f64));
    math::sin((2 * iterations + 1) as f64 * theta).abs()
}

/// `(κ, ℓ)` pairs with `sin((2ℓ+1)θ) = 1` exactly.
pub const EXACT_ROTATIONS: [(usize, usize); 2] = [(1, 0), (4, 1)];

pub fn exact_iterations(kappa: usize) -> Option<usize> {
    EXACT_ROTATIONS.iter().find(|(k, _)| *k == kappa).map(|(_, l)| *l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DilationMode {
    /// Measure the ancilla and keep outcome 0.
    Postselect,
    /// Amplify to the target exactly, then trace out.
    Amplified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DilationOutput {
    pub state: DensityMatrix,
    /// Probability of ancilla outcome 0 (postselect mode).
    pub acceptance: Option<f64>,
    /// Grover iterations used (amplified mode).
    pub iterations: Option<usize>,
}

/// Runs every eigenvector of `ρ` through the circuit, traces out control
/// and ancilla, and mixes with the eigenvalues.
pub fn channel_via_dilation(circ: &DilationCircuit, rho: &DensityMatrix, mode: DilationMode) -> Result<DilationOutput> {
    if rho.dim() != circ.dim {
        return Err(Error::DimensionMismatch { expected: circ.dim, found: rho.dim() });
    }
    let iterations = match mode {
        DilationMode::Amplified => Some(exact_iterations(circ.kappa()).ok_or(Error::NoExactRotation(circ.kappa()))?),
        DilationMode::Postselect => None,
    };
    let eig = symmetric_eigen(rho.matrix());
    let d = circ.dim;
    let mut out = Matrix::zeros(d, d);
    let mut accepted = 0.0;
    for (k, &w) in eig.values.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let xi = eig.vector(k);
        let state = match iterations {
            Some(l) => amplify_and_extract(circ, &xi, l)?.0,
            None => {
                let (good, _) = circ.split_branches(&circ.w(&circ.input_state(&xi)?));
                accepted += w * dot(&good, &good);
                good
            }
        };
        out.add_assign_scaled(&circ.reduced_system(&state), w);
    }
    let acceptance = iterations.is_none().then_some(accepted);
    if let Some(p) = acceptance {
        out = out.scale(1.0 / p);
    }
    Ok(DilationOutput { state: DensityMatrix::new(out.symmetrized())?, acceptance, iterations })
}

/// Dilation route against the Kraus route on given inputs.
pub fn channel_equality_check(circ: &DilationCircuit, kraus: &KrausSet, inputs: &[DensityMatrix], mode: DilationMode) -> Result<CheckResult> {
    let mut worst = 0.0_f64;
    for rho in inputs {
        let via = channel_via_dilation(circ, rho, mode)?;
        let direct = kraus.apply(rho.matrix())?;
        worst = worst.max(via.state.matrix().max_abs_diff(&direct));
    }
    Ok(CheckResult::residual("dilation equals Kraus channel", worst, CHANNEL_TOL, "Tr_{κ,2}[state] = Σ_k A_k ρ A_kᵀ")
        .with_detail(format!("{} inputs, {mode:?} mode", inputs.len())))
}
