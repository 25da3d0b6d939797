//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any fails. Every tolerance is pinned here and compared against the raw
//! left and right sides reported by the library.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use qcoupling::cli::{execute, RunConfig};
use qcoupling::formats::{self, parse_choi};
use qcoupling::mc::coalescence_tail_mc_parallel;
use qcoupling_core::chain::{mixing_report, TransitionMatrix};
use qcoupling_core::check::CheckResult;
use qcoupling_core::coupling::{
    check_coupling_inequality, check_tail_submultiplicativity, coupling_time, default_m_cap, exact_tails,
    independent_coupling, validate_coupling, CoalescenceReport,
};
use qcoupling_core::dilation::{
    amplify_and_extract, branch_decomposition, build_dilation, channel_equality_check, channel_via_dilation,
    DilationMode,
};
use qcoupling_core::evolve::{
    coalescence_trace_identity_check, gentle_measurement_step_check, laplacian_preservation_check,
    main_theorem_check, qperp_bound_check, qsample, random_density_matrix, random_unit_vector,
    rescaled_qperp_decomposition_check, theorem_multiplier, DensityMatrix,
};
use qcoupling_core::linalg::Matrix;
use qcoupling_core::models::{
    colorings_model, contraction_rate_check_report, cycle_model, hardcore_model, hypercube_model, CycleVariant,
    GraphSpec, ModelInstance,
};
use qcoupling_core::quantize::{
    c_star_unchecked, choi_matrix, fixed_point_check, independent_choi_structure_check, quantized_coupling,
    superop_from_kraus, unitality_check, FactorOrder,
};
use qcoupling_core::rng::StreamRng;
use qcoupling_core::Guards;

const SEED: u64 = 20240601;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `lhs ≤ rhs + tol` on the values a check reports.
fn pinned(c: &CheckResult, tol: f64, what: &str) -> Result<(), String> {
    let ok = if c.lhs.is_finite() && c.rhs.is_finite() { c.lhs <= c.rhs + tol } else { c.pass };
    ensure(ok, || format!("{what}: {} > {} + {tol:e} ({})", c.lhs, c.rhs, c.detail))
}

fn err<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{what}: {e}")
}

fn c1_printed_fixture() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/appendix_choi_n3.json");
    let text = std::fs::read_to_string(&path).map_err(err("fixture"))?;
    let (fixture, printed) = parse_choi(&text, "appendix_choi_n3.json").map_err(err("fixture"))?;
    let printed = printed.ok_or("fixture lacks eigenvalues")?;
    let m = cycle_model(3, 0.5, CycleVariant::Printed).map_err(err("cycle"))?;
    let c = m.coupling_matrix().map_err(err("coupling"))?;
    let star = c_star_unchecked(&c).map_err(err("C*"))?;
    let j = choi_matrix(&star, fixture.order);
    let diff = j.matrix().max_abs_diff(fixture.matrix());
    ensure(diff <= 1e-12, || format!("entrywise difference {diff:e}"))?;
    let allowed = [0.0, 0.25, 0.5];
    let entries_ok = (0..9).all(|r| (0..9).all(|k| allowed.contains(&fixture.matrix()[(r, k)])));
    ensure(entries_ok, || "fixture entry outside {0, 0.25, 0.5}".into())?;
    let ev = j.eigenvalues().map_err(err("eigensolver"))?.to_vec();
    for (a, b) in ev.iter().zip(&printed) {
        ensure((a - b).abs() <= 0.01, || format!("eigenvalue {a} vs {b}"))?;
    }
    let sum: f64 = ev.iter().sum();
    ensure((sum - 3.0).abs() <= 1e-9, || format!("eigenvalue sum {sum}"))?;
    let cp = j.is_cp().map_err(err("cp"))?;
    ensure(ev[0] < 0.0 && !cp, || "expected cp = false".into())?;
    Ok(format!("max |ΔJ| = {diff:e}, λ_min = {:.4}, Σλ = {sum:.12}, cp = {cp}", ev[0]))
}

fn random_chain(rng: &mut StreamRng, n: usize) -> TransitionMatrix {
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
        let s: f64 = col.iter().sum();
        for i in 0..n {
            m[(i, j)] = col[i] / s;
        }
    }
    TransitionMatrix::from_matrix(m).expect("positive column-stochastic")
}

fn c2_independent_cp() -> Outcome {
    let mut rng = StreamRng::new(SEED, 2);
    let (mut worst_ratio, mut worst_block) = (f64::NEG_INFINITY, 0.0_f64);
    for k in 0..100 {
        let n = 2 + k % 5;
        let p = random_chain(&mut rng, n);
        let c = independent_coupling(&p).map_err(err("independent"))?;
        let j = choi_matrix(&c_star_unchecked(&c).map_err(err("C*"))?, FactorOrder::MapFirst);
        let min = j.eigenvalues().map_err(err("eigensolver"))?[0];
        let scale = j.matrix().max_abs();
        ensure(min >= -1e-9 * scale, || format!("chain {k}: λ_min = {min:e}"))?;
        worst_ratio = worst_ratio.max(-min / scale);
        let s = independent_choi_structure_check(&p).map_err(err("structure"))?;
        pinned(&s, 1e-12, "block decomposition")?;
        worst_block = worst_block.max(s.lhs);
    }
    Ok(format!("100 chains, worst −λ_min/‖J‖_max = {worst_ratio:e}, block residual {worst_block:e}"))
}

fn structure_models() -> Result<Vec<ModelInstance>, String> {
    let mut v: Vec<ModelInstance> = (1..=3).map(|n| hypercube_model(n).map_err(err("hypercube"))).collect::<Result<_, _>>()?;
    v.push(colorings_model(&GraphSpec::complete(3).unwrap(), 4).map_err(err("colorings"))?);
    for l in [0.5, 2.0] {
        v.push(hardcore_model(&GraphSpec::path(3).unwrap(), l).map_err(err("hardcore"))?);
    }
    Ok(v)
}

fn c3_grand_structure() -> Outcome {
    let mut names = Vec::new();
    for m in structure_models()? {
        let name = m.name.clone();
        let k = m.kraus().map_err(err("kraus"))?;
        ensure(k.completeness_residual() <= 1e-10, || format!("{name}: completeness {:e}", k.completeness_residual()))?;
        let c = m.coupling_matrix().map_err(err("coupling"))?;
        let (t, t_star) = quantized_coupling(&c, m.stationary()).map_err(err("T"))?;
        let j = choi_matrix(&t, FactorOrder::MapFirst);
        let min = j.eigenvalues().map_err(err("eigensolver"))?[0];
        ensure(min >= -1e-9, || format!("{name}: Choi λ_min = {min:e}"))?;
        pinned(&unitality_check(&t_star).map_err(err("unitality"))?, 1e-10, &format!("{name}: T*(I) = I"))?;
        pinned(&fixed_point_check(&t, m.stationary()).map_err(err("fixed point"))?, 1e-10, &format!("{name}: T(Q) = Q"))?;
        let via = superop_from_kraus(&k).map_err(err("kraus route"))?;
        let d = via.matrix().max_abs_diff(t.matrix());
        ensure(d <= 1e-10, || format!("{name}: Kraus route differs by {d:e}"))?;
        names.push(name);
    }
    Ok(names.join(", "))
}

fn near_qsample_states(pi: &qcoupling_core::chain::Distribution, count: usize) -> Vec<DensityMatrix> {
    let q = qsample(pi).expect("qsample");
    (0..count)
        .map(|k| {
            let delta = 0.5f64.powi((k % 10) as i32 + 1);
            let sigma = random_density_matrix(q.dim(), SEED, 1000 + k as u64);
            let m = q.projector().scale(1.0 - delta).add(&sigma.matrix().scale(delta));
            DensityMatrix::new(m.symmetrized()).expect("state")
        })
        .collect()
}

fn c4_lemma_suite() -> Outcome {
    let models = [hypercube_model(3).map_err(err("hypercube"))?, hardcore_model(&GraphSpec::path(3).unwrap(), 2.0).map_err(err("hardcore"))?];
    for m in &models {
        let name = &m.name;
        let n = m.num_states();
        let c = m.coupling_matrix().map_err(err("coupling"))?;
        let pi = m.stationary();
        for x in 0..n {
            for y in (0..n).filter(|&y| y != x) {
                pinned(&laplacian_preservation_check(&c, x, y).map_err(err("laplacian"))?, 1e-12, &format!("{name}: Laplacian ({x},{y})"))?;
            }
        }
        pinned(&rescaled_qperp_decomposition_check(pi).map_err(err("rescaled"))?, 1e-12, &format!("{name}: rescaled Q⊥"))?;
        for mm in 0..=20 {
            pinned(&coalescence_trace_identity_check(&c, mm).map_err(err("trace identity"))?, 1e-10, &format!("{name}: trace identity m={mm}"))?;
        }
        let q = qsample(pi).map_err(err("qsample"))?;
        for rho in near_qsample_states(pi, 20) {
            let eps = q.perp_overlap(rho.matrix()) * (1.0 + 1e-6) + 1e-15;
            let g = gentle_measurement_step_check(&rho, &q, eps).map_err(err("gentle"))?;
            ensure(g.pass, || format!("{name}: gentle measurement {}", g.detail))?;
            pinned(&g, 1e-10, &format!("{name}: gentle measurement"))?;
        }
        let k = m.kraus().map_err(err("kraus"))?;
        let report = exact_tails(&c, 20, false, false, &Guards::default()).map_err(err("tails"))?;
        let rhos: Vec<DensityMatrix> = (0..50).map(|s| random_density_matrix(n, SEED, 100 + s)).collect();
        let grid: Vec<usize> = (0..=20).collect();
        pinned(&qperp_bound_check(&k, pi, &report, &rhos, &grid).map_err(err("qperp"))?, 1e-10, &format!("{name}: Q⊥ bound"))?;
        for mm in 1..=10 {
            for l in 1..=4 {
                pinned(&check_tail_submultiplicativity(&c, mm, l).map_err(err("submult"))?, 1e-12, &format!("{name}: submultiplicativity ({mm},{l})"))?;
            }
        }
    }
    Ok("hypercube3 and hardcore P3 λ=2: all six lemma checks hold".into())
}

fn c5_main_theorem() -> Outcome {
    let m = hypercube_model(3).map_err(err("hypercube"))?;
    let c = m.coupling_matrix().map_err(err("coupling"))?;
    let report = exact_tails(&c, 60, false, false, &Guards::default()).map_err(err("tails"))?;
    let t_couple = coupling_time(&report).map_err(err("t_couple"))?;
    ensure(t_couple == 7, || format!("t_couple = {t_couple}, expected 7"))?;
    let eps = [0.25, 0.04, 0.01];
    let steps: Vec<usize> = eps.iter().map(|&e| theorem_multiplier(e, 0.125) * t_couple).collect();
    ensure(steps == [21, 28, 35], || format!("steps {steps:?}"))?;
    let mut rhos: Vec<DensityMatrix> = (0..8).map(|x| DensityMatrix::basis(8, x)).collect();
    rhos.extend((0..20).map(|s| random_density_matrix(8, SEED, 200 + s)));
    let k = m.kraus().map_err(err("kraus"))?;
    let r = main_theorem_check(&k, m.stationary(), &report, &rhos, &eps).map_err(err("theorem"))?;
    pinned(&r, 0.0, "main theorem")?;
    Ok(format!("t_couple = 7, m = {steps:?}, worst distance {:.3e} vs √ε {}", r.lhs, r.rhs))
}

fn c6_report(workers: usize) -> Result<CoalescenceReport, String> {
    let m = hypercube_model(8).map_err(err("hypercube"))?;
    let pairs = m.mc_start_pairs(SEED, 7);
    coalescence_tail_mc_parallel(m.mapping().unwrap(), &pairs, &[C6_M], 100_000, SEED, workers).map_err(err("mc"))
}

/// `⌈8 ln 8 + 16⌉`.
const C6_M: usize = 33;

fn c6_coupon_collector() -> Outcome {
    ensure((8.0 * 8f64.ln() + 16.0).ceil() as usize == C6_M, || "grid point".into())?;
    let r = c6_report(4)?;
    let p = r.tail_max[0];
    let hw = r.pairs.iter().map(|t| t.half_widths[0]).fold(0.0, f64::max);
    let bound = (-2.0f64).exp() + 3.0 * hw;
    ensure(p <= bound, || format!("Pr{{τ > 33}} = {p} > {bound}"))?;
    let m2 = hypercube_model(2).map_err(err("hypercube"))?;
    let c2 = m2.coupling_matrix().map_err(err("coupling"))?;
    let rep = exact_tails(&c2, 10, false, false, &Guards::default()).map_err(err("tails"))?;
    for mm in 1..=10 {
        let want = 2f64.powi(1 - mm as i32);
        let got = rep.tail_at(mm).unwrap();
        ensure((got - want).abs() <= 1e-12, || format!("n=2 tail({mm}) = {got}, expected {want}"))?;
    }
    let tc = coupling_time(&rep).map_err(err("t_couple"))?;
    ensure(tc == 3, || format!("n=2 t_couple = {tc}"))?;
    Ok(format!("n=8: Pr{{τ > 33}} ≤ {p:.5} vs e^-2 + 3·{hw:.5} = {bound:.5}; n=2 tails = 2^(1-m), t_couple = 3"))
}

fn c7_colorings_report(workers: usize) -> Result<(ModelInstance, Vec<usize>, CoalescenceReport), String> {
    let m = colorings_model(&GraphSpec::path(5).unwrap(), 7).map_err(err("colorings"))?;
    let grid: Vec<usize> = (1..=14).map(|k| 5 * k).collect();
    let pairs = m.mc_start_pairs(SEED, 7);
    let r = coalescence_tail_mc_parallel(m.mapping().unwrap(), &pairs, &grid, 10_000, SEED, workers).map_err(err("mc"))?;
    Ok((m, grid, r))
}

fn c7_rate_envelopes() -> Outcome {
    let (m, grid, r) = c7_colorings_report(4)?;
    ensure((m.rate_constant().unwrap() - 1.0 / 7.0).abs() <= 1e-15, || "c_met".into())?;
    let ci = r.tail_ci_hi.as_ref().ok_or("no CI")?;
    for (k, &mm) in grid.iter().enumerate() {
        let env = m.envelope(mm).unwrap();
        ensure(ci[k] <= env, || format!("colorings m={mm}: upper CI {} > {env}", ci[k]))?;
    }
    let check = contraction_rate_check_report(&m, &r, &grid).map_err(err("colorings check"))?;
    ensure(check.pass, || check.detail.clone())?;
    let h = hardcore_model(&GraphSpec::path(3).unwrap(), 0.5).map_err(err("hardcore"))?;
    ensure((h.rate_constant().unwrap() - 1.0 / 3.0).abs() <= 1e-15, || "c_H".into())?;
    let hgrid: Vec<usize> = (1..=14).map(|k| 3 * k).collect();
    let c = h.coupling_matrix().map_err(err("coupling"))?;
    let rep = exact_tails(&c, 42, false, false, &Guards::default()).map_err(err("tails"))?;
    for &mm in &hgrid {
        let (t, env) = (rep.tail_at(mm).unwrap(), h.envelope(mm).unwrap());
        ensure(t <= env, || format!("hardcore m={mm}: tail {t} > {env}"))?;
    }
    Ok(format!("colorings P5 q=7 (MC 10^4, max CI/envelope {:.3}), hardcore P3 λ=1/2 exact", grid.iter().enumerate().map(|(k, &mm)| ci[k] / m.envelope(mm).unwrap()).fold(0.0, f64::max)))
}

fn c8_dilation() -> Outcome {
    let m = hypercube_model(2).map_err(err("hypercube"))?;
    let k = m.kraus().map_err(err("kraus"))?;
    let circ = build_dilation(&k).map_err(err("dilation"))?;
    ensure(circ.kappa() == 4 && circ.dim() == 4, || format!("κ = {}, d = {}", circ.kappa(), circ.dim()))?;
    ensure(circ.defect_residual <= 1e-9, || format!("Σ B_kᵀB_k residual {:e}", circ.defect_residual))?;
    let (good, bad) = (0.5, 3f64.sqrt() / 2.0);
    let mut worst_fid = 1.0f64;
    for i in 0..20 {
        let xi = random_unit_vector(4, SEED, i);
        let b = branch_decomposition(&circ, &xi).map_err(err("branch"))?;
        ensure((b.good_norm - good).abs() <= 1e-10 && (b.bad_norm - bad).abs() <= 1e-10, || format!("branch norms {} {}", b.good_norm, b.bad_norm))?;
        let (_, f) = amplify_and_extract(&circ, &xi, 1).map_err(err("amplify"))?;
        worst_fid = worst_fid.min(f);
    }
    ensure(worst_fid >= 1.0 - 1e-9, || format!("fidelity {worst_fid}"))?;
    let rhos: Vec<DensityMatrix> = (0..20).map(|i| random_density_matrix(4, SEED, 500 + i)).collect();
    let eq = channel_equality_check(&circ, &k, &rhos, DilationMode::Amplified).map_err(err("channel"))?;
    pinned(&eq, 1e-9, "dilation channel")?;
    let mut worst_acc = 0.0f64;
    for r in &rhos {
        let o = channel_via_dilation(&circ, r, DilationMode::Postselect).map_err(err("postselect"))?;
        worst_acc = worst_acc.max((o.acceptance.unwrap() - 0.25).abs());
    }
    ensure(worst_acc <= 1e-10, || format!("acceptance off by {worst_acc:e}"))?;
    Ok(format!("fidelity ≥ {worst_fid:.12}, channel residual {:e}, acceptance error {worst_acc:e}", eq.lhs))
}

fn c9_classical() -> Outcome {
    let mut models = structure_models()?;
    models.push(cycle_model(3, 0.5, CycleVariant::Prose).map_err(err("cycle"))?);
    models.push(cycle_model(5, 0.7, CycleVariant::Prose).map_err(err("cycle"))?);
    models.push(colorings_model(&GraphSpec::path(3).unwrap(), 4).map_err(err("colorings"))?);
    let mut names = Vec::new();
    for m in &models {
        let c = m.coupling_matrix().map_err(err("coupling"))?;
        ensure(validate_coupling(&c).valid, || format!("{}: coupling invalid", m.name))?;
        pinned(&check_coupling_inequality(&c, 20).map_err(err("inequality"))?, 1e-10, &format!("{}: d(m) ≤ tail", m.name))?;
        let p = m.transition_matrix().map_err(err("chain"))?;
        let rep = mixing_report(&p, &[0.125, 0.0625], default_m_cap(m.num_states())).map_err(err("mixing"))?;
        for b in &rep.bounds {
            ensure(b.t_mix_eps <= b.bound, || format!("{}: t_mix({}) = {} > {}", m.name, b.eps, b.t_mix_eps, b.bound))?;
        }
        names.push(m.name.clone());
    }
    Ok(names.join(", "))
}

fn cli_files(workers: usize, tag: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(err("tempdir"))?;
    let cfg = RunConfig {
        command: Some(qcoupling::cli::CommandKind::Coalesce),
        model: Some("colorings-P5-q7".into()),
        mc: Some(true),
        samples: Some(10_000),
        seed: Some(SEED),
        workers: Some(workers),
        out: Some(dir.path().join(tag)),
        ..RunConfig::default()
    };
    let o = execute(&cfg).map_err(err("cli"))?;
    o.files
        .iter()
        .map(|f| Ok((f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(f).map_err(err("read"))?)))
        .collect()
}

fn c10_determinism() -> Outcome {
    let csv = |r: &CoalescenceReport| formats::report_to_csv(r, &[("seed", SEED.to_string())], true);
    let runs6: Vec<String> = [1, 4, 4].iter().map(|&w| c6_report(w).map(|r| csv(&r))).collect::<Result<_, _>>()?;
    ensure(runs6.windows(2).all(|w| w[0] == w[1]), || "hypercube8 MC differs across runs or workers".into())?;
    let runs7: Vec<String> = [1, 4, 4].iter().map(|&w| c7_colorings_report(w).map(|(_, _, r)| csv(&r))).collect::<Result<_, _>>()?;
    ensure(runs7.windows(2).all(|w| w[0] == w[1]), || "colorings MC differs across runs or workers".into())?;
    let a = cli_files(1, "a")?;
    let b = cli_files(4, "b")?;
    let c = cli_files(4, "c")?;
    ensure(a == b && b == c, || "CLI output files differ".into())?;
    Ok(format!("criteria 6 and 7 reports plus {} CLI files byte-identical over runs and workers {{1, 4}}", a.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("printed Choi fixture", 1, c1_printed_fixture),
        ("independent coupling is CP", 30, c2_independent_cp),
        ("grand coupling structure", 60, c3_grand_structure),
        ("lemma suite", 120, c4_lemma_suite),
        ("main theorem", 60, c5_main_theorem),
        ("coupon-collector tail", 30, c6_coupon_collector),
        ("model rate envelopes", 60, c7_rate_envelopes),
        ("dilation", 10, c8_dilation),
        ("classical consistency", 30, c9_classical),
        ("determinism", 120, c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = f();
        let took = start.elapsed();
        let r = r.and_then(|d| if took <= Duration::from_secs(*budget) { Ok(d) } else { Err(format!("took {took:.2?}, budget {budget} s")) });
        match r {
            Ok(d) => println!("PASS {:>2} {name} ({took:.2?}): {d}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({took:.2?}): {e}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
