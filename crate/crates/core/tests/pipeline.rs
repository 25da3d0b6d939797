use qcoupling_core::chain::{mixing_time, validate_chain};
use qcoupling_core::coupling::{check_coupling_inequality, coupling_time, exact_coupling_time, coalescence_tail_exact};
use qcoupling_core::evolve::{
    evolve_trace, main_theorem_check, qperp_bound_check, qsample, random_density_matrix, DensityMatrix,
};
use qcoupling_core::models::{hardcore_model, hypercube_model, GraphSpec, ModelInstance};
use qcoupling_core::quantize::{
    apply_channel, c_star_superop, choi_matrix, fixed_point_check, quantized_coupling, superop_from_kraus,
    ChannelOutput, FactorOrder,
};

fn pipeline(model: &ModelInstance) {
    let p = model.transition_matrix().unwrap();
    assert!(validate_chain(&p).ergodic, "{}", model.name);
    let c = model.coupling_matrix().unwrap();
    let pi = model.stationary();
    let (t, _) = quantized_coupling(&c, pi).unwrap();
    assert!(fixed_point_check(&t, pi).unwrap().pass);
    let j = choi_matrix(&c_star_superop(&c).unwrap(), FactorOrder::MapFirst);
    assert!(j.is_cp().unwrap());

    let kraus = model.kraus().unwrap();
    let via_kraus = superop_from_kraus(&kraus).unwrap();
    assert!(via_kraus.matrix().max_abs_diff(t.matrix()) < 1e-10);

    let report = coalescence_tail_exact(&c, 40).unwrap();
    let tc = coupling_time(&report).unwrap();
    assert_eq!(tc, exact_coupling_time(&c).unwrap());
    assert!(check_coupling_inequality(&c, 20).unwrap().pass);

    let n = model.num_states();
    let rhos: Vec<DensityMatrix> = (0..n)
        .map(|x| DensityMatrix::basis(n, x))
        .chain((0..10).map(|s| random_density_matrix(n, 5, s)))
        .collect();
    let grid: Vec<usize> = (0..=20).collect();
    assert!(qperp_bound_check(&via_kraus, pi, &report, &rhos, &grid).unwrap().pass);
    assert!(main_theorem_check(&via_kraus, pi, &report, &rhos, &[0.25, 0.04, 0.01]).unwrap().pass);

    let q = qsample(pi).unwrap();
    let trace = evolve_trace(&via_kraus, &rhos[0], &q, 30, Some(&report)).unwrap();
    assert!(trace.distance_monotone);
    assert!(trace.worst_ratio().unwrap() <= 1.0 + 1e-10);
    match apply_channel(&kraus, &rhos[0]).unwrap() {
        ChannelOutput::State(s) => assert!((s.matrix().trace() - 1.0).abs() < 1e-12),
        ChannelOutput::Unverified(_) => panic!("Kraus channels are CP"),
    }
}

#[test]
fn hypercube_three_end_to_end() {
    let m = hypercube_model(3).unwrap();
    pipeline(&m);
    assert_eq!(exact_coupling_time(&m.coupling_matrix().unwrap()).unwrap(), 7);
    assert_eq!(mixing_time(&m.transition_matrix().unwrap(), 0.25, 100).unwrap(), 3);
}

#[test]
fn hardcore_path_end_to_end() {
    for lambda in [0.5, 2.0] {
        pipeline(&hardcore_model(&GraphSpec::path(3).unwrap(), lambda).unwrap());
    }
}

#[test]
fn unverified_map_is_refused() {
    let m = hypercube_model(2).unwrap();
    let c = m.coupling_matrix().unwrap();
    let s = qcoupling_core::quantize::c_star_unchecked(&c).unwrap();
    let q = qsample(m.stationary()).unwrap();
    let rho = DensityMatrix::basis(4, 0);
    assert!(matches!(apply_channel(&s, &rho).unwrap(), ChannelOutput::Unverified(_)));
    assert!(evolve_trace(&s, &rho, &q, 3, None).is_err());
}
