use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safehrl::qpcore::*;

mod common;
use common::qp::{instance, oracle, stacked};

#[test]
fn solver_matches_projected_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = 0.0f64;
    let mut worst_cs = 0.0f64;
    for _ in 0..200 {
        let spec = instance(&mut rng);
        let sol = solve(&spec).unwrap();
        assert_eq!(sol.status, QPStatus::Optimal);
        let f = spec.objective(&sol.primal);
        let fo = oracle(&spec);
        worst_gap = worst_gap.max((f - fo).abs() / fo.abs().max(1.0));
        worst_cs = worst_cs.max(complementarity_residual(&spec, &sol));
        assert!(kkt_residual(&spec, &sol) <= 1e-8);
    }
    assert!(worst_gap <= 1e-7, "gap {worst_gap}");
    assert!(worst_cs <= 1e-8, "cs {worst_cs}");
}

#[test]
fn determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let spec = instance(&mut rng);
        let a = solve(&spec).unwrap();
        let b = solve(&spec).unwrap();
        assert_eq!(a.primal.as_slice(), b.primal.as_slice());
        assert_eq!(a.dual.as_slice(), b.dual.as_slice());
    }
}

#[test]
fn infeasible_certificates_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(2..=8);
        let g = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..0.2));
        let spec = QPSpec {
            hess: DMatrix::identity(n, n),
            lin: DVector::zeros(n),
            g,
            h,
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        };
        let sol = solve(&spec).unwrap();
        if sol.status != QPStatus::Infeasible {
            continue;
        }
        seen += 1;
        let w = DVector::from_vec(sol.farkas.unwrap());
        assert!(w.iter().all(|&x| x >= 0.0));
        let (a, b) = stacked(&spec);
        assert!((a.transpose() * &w).amax() < 1e-9 * w.amax().max(1.0));
        assert!(w.dot(&b) < 0.0);
    }
    assert!(seen > 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_solutions_satisfy_kkt(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = instance(&mut rng);
        let sol = solve(&spec).unwrap();
        prop_assert_eq!(sol.status, QPStatus::Optimal);
        prop_assert!(kkt_residual(&spec, &sol) <= 1e-8);
        prop_assert!(sol.dual.iter().all(|&l| l >= 0.0));
        prop_assert!(complementarity_residual(&spec, &sol) <= 1e-8);
    }
}
