//! Property tests of structural invariants across the modules.

use lrns_core::control::{strong_wolfe, ControlConfig, ControlProblem, WolfeParams};
use lrns_core::diffusion::{compression_rank, DiffusionConfig};
use lrns_core::experiment::{ExperimentConfig, PipelineKind};
use lrns_core::fem::{assemble_mass, build_mesh};
use lrns_core::linalg::{
    factorize_spd, gaussian_matrix, orthogonality_defect, orthonormalize, random_orthogonal, random_spd,
    symmetric_eigenvalues, DenseMatrix, RsvdConfig,
};
use lrns_core::lowrank::{
    basis_finders, energy_profile, gram_accumulate, rank_for, rmsre, LowRankFactors, MatrixCollection,
};
use lrns_core::neumann::build_operator;
use lrns_core::parallel::{ordered_vec_sum, with_threads};
use lrns_core::randfield::sample_truncated_normal;
use proptest::prelude::*;

fn collection(n: usize, members: usize, seed: u64) -> MatrixCollection {
    let dense: Vec<DenseMatrix> = (0..members)
        .map(|m| gaussian_matrix(n, n, seed.wrapping_add(m as u64)).symmetrized())
        .collect();
    MatrixCollection::from_dense(&dense).unwrap()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

proptest! {
    #[test]
    fn rank_is_smallest_covering_integer(tau in 1e-3f64..=1.0, n in 1usize..5000) {
        let k = rank_for(tau, n).unwrap();
        prop_assert!((1..=n).contains(&k));
        prop_assert!(k as f64 >= tau * n as f64 - 1e-6);
        prop_assert!(k == 1 || ((k - 1) as f64) < tau * n as f64);
    }

    #[test]
    fn rank_is_monotone_in_tau(a in 1e-3f64..=1.0, b in 1e-3f64..=1.0, n in 1usize..5000) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rank_for(lo, n).unwrap() <= rank_for(hi, n).unwrap());
    }

    #[test]
    fn basis_width_never_exceeds_interior(tau in 1e-3f64..=1.0, cells in 2usize..40) {
        let nodes = (cells + 1).pow(2);
        let interior = (cells - 1).pow(2);
        let (k, width) = compression_rank(tau, nodes, interior).unwrap();
        prop_assert_eq!(width, k.min(interior));
    }

    #[test]
    fn out_of_range_tau_is_rejected(tau in prop_oneof![-1.0f64..=0.0, 1.0f64 + 1e-9..3.0]) {
        prop_assert!(rank_for(tau, 10).is_err());
    }

    #[test]
    fn truncated_draws_stay_in_bounds(seed in any::<u64>(), bound in 0.1f64..4.0) {
        let draws = sample_truncated_normal(seed, 500, bound).unwrap();
        prop_assert_eq!(draws.len(), 500);
        prop_assert!(draws.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn energy_profile_is_monotone_and_complete(values in prop::collection::vec(0.0f64..10.0, 1..40)) {
        prop_assume!(values.iter().any(|v| *v > 0.0));
        let e = energy_profile(&values).unwrap();
        let mut prev = 0.0;
        for k in 0..=values.len() {
            let v = e.at_rank(k);
            prop_assert!(v >= prev - 1e-15 && v <= 1.0);
            prev = v;
        }
        prop_assert!((e.at_rank(values.len()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ordered_sums_ignore_thread_count(seed in any::<u64>(), n in 1usize..200) {
        let term = |i: usize| Ok(gaussian_matrix(1, 7, seed ^ i as u64).into_vec());
        let one = with_threads(1, || ordered_vec_sum(n, 7, term)).unwrap().unwrap();
        let four = with_threads(4, || ordered_vec_sum(n, 7, term)).unwrap().unwrap();
        prop_assert_eq!(
            one.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            four.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn orthonormalized_columns_are_orthonormal(rows in 2usize..40, seed in any::<u64>()) {
        let cols = rows / 2 + 1;
        let q = orthonormalize(&gaussian_matrix(rows, cols, seed)).unwrap();
        prop_assert!(orthogonality_defect(&q) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mass_matrix_is_positive_with_unit_total(cells in 1usize..12, seed in any::<u64>()) {
        let mesh = build_mesh(cells).unwrap();
        let mass = assemble_mass(&mesh);
        prop_assert!((mass.sum() - 1.0).abs() < 1e-12);
        prop_assert!(mass.asymmetry() <= 1e-14);
        let x = gaussian_matrix(mesh.num_nodes(), 1, seed).into_vec();
        prop_assert!(lrns_core::linalg::dot(&x, &mass.matvec(&x)) > 0.0);
    }

    #[test]
    fn gram_is_symmetric_positive_semidefinite(n in 2usize..12, members in 1usize..6, seed in any::<u64>()) {
        let gram = gram_accumulate(&collection(n, members, seed));
        prop_assert!(gram.asymmetry() <= 1e-12);
        let eig = symmetric_eigenvalues(&gram).unwrap();
        let top = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(eig.iter().all(|v| *v >= -1e-10 * top));
    }

    #[test]
    fn reconstruction_error_shrinks_with_rank(n in 3usize..12, members in 1usize..6, seed in any::<u64>()) {
        let coll = collection(n, members, seed);
        let finder = basis_finders().get("exact").unwrap();
        let sketch = RsvdConfig::with_defaults(1, n, seed);
        let mut prev = f64::INFINITY;
        for k in 1..=n {
            let basis = lrns_core::lowrank::compress_basis_rank(&coll, k, &sketch, finder.as_ref()).unwrap();
            let factors = LowRankFactors::from_basis(basis, &coll, k as f64 / n as f64).unwrap();
            prop_assert_eq!(factors.storage_floats(), (members + 1) * n * k);
            let err = rmsre(&factors, &coll).unwrap();
            prop_assert!(err <= prev * (1.0 + 1e-10) + 1e-12);
            prev = err;
        }
        prop_assert!(prev <= 1e-10 * coll.frobenius_scale().max(1.0));
    }

    #[test]
    fn neumann_series_converges_to_the_perturbed_solve(n in 3usize..15, seed in any::<u64>(), scale in 0.0f64..0.3) {
        let mean = random_spd(n, seed);
        let k = n / 2 + 1;
        let basis = random_orthogonal(n, seed ^ 1).leading_columns(k);
        // ‖Ā⁻¹‖ ≤ 2, so ‖Ā⁻¹UVᵀ‖ ≤ 2 · scale < 1
        let mut v = gaussian_matrix(n, k, seed ^ 2);
        let norm = v.frobenius_norm();
        v = v.scaled(scale / norm.max(1e-300));
        let factors = LowRankFactors { basis: basis.clone(), factors: vec![v.clone()], tau: 1.0, rank: k };
        let rhs = gaussian_matrix(n, 1, seed ^ 3).into_vec();

        let op = build_operator(&mean, factors.clone(), 80, 0.95).unwrap();
        let mut full = mean.clone();
        full.add_scaled(1.0, &basis.matmul_transpose(&v).unwrap());
        let exact = full.to_nalgebra().lu().solve(&nalgebra::DVector::from_vec(rhs.clone())).unwrap();
        prop_assert!(rel_diff(&op.apply_inverse(0, &rhs), exact.as_slice()) < 1e-10);

        let zero = build_operator(&mean, factors, 0, 0.95).unwrap();
        let mean_solve = factorize_spd(&mean).unwrap().solve(&rhs);
        prop_assert_eq!(zero.apply_inverse(0, &rhs), mean_solve);
    }

    #[test]
    fn truncated_inverse_and_transpose_are_adjoint(n in 3usize..15, seed in any::<u64>(), terms in 0usize..8) {
        let mean = random_spd(n, seed);
        let k = n / 3 + 1;
        let basis = random_orthogonal(n, seed ^ 1).leading_columns(k);
        let v = gaussian_matrix(n, k, seed ^ 2).scaled(0.2 / (n as f64).sqrt());
        let factors = LowRankFactors { basis, factors: vec![v], tau: 1.0, rank: k };
        let op = build_operator(&mean, factors, terms, 0.95).unwrap();
        let x = gaussian_matrix(n, 1, seed ^ 3).into_vec();
        let y = gaussian_matrix(n, 1, seed ^ 4).into_vec();
        let lhs = lrns_core::linalg::dot(&op.apply_inverse(0, &x), &y);
        let rhs = lrns_core::linalg::dot(&x, &op.apply_inverse_transpose(0, &y));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn wolfe_steps_satisfy_both_conditions(a in 0.1f64..50.0, b in -20.0f64..-0.01, c in 0.0f64..5.0, alpha0 in 1e-3f64..10.0) {
        // convex quadratic plus a quartic term, descending at 0
        let phi = |x: f64| (a * x * x + b * x + c * x.powi(4) / 100.0, 2.0 * a * x + b + c * x.powi(3) / 25.0);
        let p = WolfeParams::default();
        let out = strong_wolfe(phi, alpha0, &p).expect("convex descent direction admits a Wolfe step");
        let (v, d) = phi(out.alpha);
        prop_assert!(v <= p.c1 * out.alpha * b + 1e-12);
        prop_assert!(d.abs() <= -p.c2 * b + 1e-12);
    }

    #[test]
    fn experiment_config_round_trips_through_json(seed in any::<u64>(), tau in 0.01f64..=1.0, samples in 1usize..500) {
        let mut cfg = ExperimentConfig::new(PipelineKind::ScanTau);
        cfg.seed = Some(seed);
        cfg.set_tau(tau);
        cfg.diffusion.samples = samples;
        let cfg = cfg.resolved().unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn control_hessian_is_symmetric_positive_definite(seed in any::<u64>(), beta in 1e-4f64..1e-1) {
        let cfg = ControlConfig {
            problem: DiffusionConfig { cells: 4, samples: 5, steps: 3, kl_terms: 4, seed, ..ControlConfig::default().problem },
            beta,
            ..ControlConfig::default()
        };
        let problem = ControlProblem::build(&cfg).unwrap();
        let h = problem.hessian().unwrap();
        prop_assert!(h.raw_asymmetry <= 1e-10);
        prop_assert!(factorize_spd(&h.matrix).is_ok());

    }
}
