//! Algebraic invariants of the numerics, losses, estimators and simulator.

use inviv::autodiff::Tape;
use inviv::estimators::{po_tsls, tsls};
use inviv::losses::{loss_hsic, loss_mmd, KernelSpec};
use inviv::numerics::{cholesky, matmul, min_singular_value, solve_ols, t_matmul, Matrix};
use inviv::rng::{rng_from_seed, standard_normal};
use inviv::simgen::{d2_spec, read_dataset, simulate, write_dataset, Mixing, MixingSpec};
use proptest::prelude::*;

fn randn(rows: usize, cols: usize, seed: u64) -> Matrix {
    standard_normal(rows, cols, &mut rng_from_seed(seed))
}

fn scalar_loss(f: impl Fn(&mut Tape) -> inviv::Result<inviv::autodiff::Var>) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t).unwrap();
    t.value(v).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_is_associative(m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let (a, b, c) = (randn(m, k, seed), randn(k, l, seed + 1), randn(l, n, seed + 2));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10 * (1.0 + left.max_abs()));
    }

    #[test]
    fn ols_residuals_are_orthogonal_to_the_design(n in 8usize..40, k in 1usize..5, seed in 0u64..1000) {
        let x = randn(n, k, seed);
        let y = randn(n, 2, seed + 7);
        let beta = solve_ols(&x, &y).unwrap();
        let resid = y.sub(&matmul(&x, &beta).unwrap()).unwrap();
        prop_assert!(t_matmul(&x, &resid).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn cholesky_reconstructs_spd_input(n in 1usize..7, seed in 0u64..1000) {
        let b = randn(n + 3, n, seed);
        let a = t_matmul(&b, &b).unwrap().add(&Matrix::identity(n).scale(0.1)).unwrap();
        let f = cholesky(&a).unwrap();
        prop_assert!(f.reconstruct().max_abs_diff(&a) < 1e-10 * a.max_abs());
        let x = randn(n, 1, seed + 3);
        let solved = f.solve(&matmul(&a, &x).unwrap()).unwrap();
        prop_assert!(solved.max_abs_diff(&x) < 1e-7 * (1.0 + x.max_abs()));
    }

    #[test]
    fn min_singular_value_detects_rank(m in 3usize..8, n in 3usize..8, seed in 0u64..1000) {
        let r = m.min(n) - 1;
        let deficient = matmul(&randn(m, r, seed), &randn(r, n, seed + 1)).unwrap();
        prop_assert!(min_singular_value(&deficient) < 1e-8 * deficient.max_abs().max(1.0));
        let full = randn(m, n, seed + 2).add(&Matrix::from_fn(m, n, |i, j| if i == j { 5.0 } else { 0.0 })).unwrap();
        prop_assert!(min_singular_value(&full) > 1e-3);
    }

    #[test]
    fn gram_kernel_matches_elementwise_loop(n in 1usize..6, m in 1usize..6, d in 1usize..4, degree in 1u32..4, seed in 0u64..1000) {
        let (x, y) = (randn(n, d, seed), randn(m, d, seed + 1));
        let mut t = Tape::new();
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let g = t.gram_poly_kernel(xv, yv, degree, 1.0).unwrap();
        let got = t.value(g).clone();
        for i in 0..n {
            for j in 0..m {
                let s: f64 = (0..d).map(|c| x.get(i, c) * y.get(j, c)).sum::<f64>() + 1.0;
                prop_assert!((got.get(i, j) - s.powi(degree as i32)).abs() < 1e-12 * (1.0 + s.abs().powi(degree as i32)));
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(n in 2usize..10, d in 1usize..4, seed in 0u64..1000) {
        let (x, y) = (randn(n, d, seed), randn(n + 1, d, seed + 1));
        let grads = || {
            let mut t = Tape::new();
            let (xv, yv) = (t.param(x.clone()), t.param(y.clone()));
            let l = loss_mmd(&mut t, xv, yv, KernelSpec::poly(3)).unwrap();
            let g = t.backward(l).unwrap();
            (g.get(xv).unwrap().clone().into_data(), g.get(yv).unwrap().clone().into_data())
        };
        let (a, b) = (grads(), grads());
        prop_assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn mmd_is_nonnegative_and_zero_on_identical_samples(n in 2usize..12, m in 2usize..12, d in 1usize..4, degree in 2u32..4, seed in 0u64..1000) {
        let (x, y) = (randn(n, d, seed), randn(m, d, seed + 1).scale(1.5));
        let k = KernelSpec::poly(degree);
        let v = scalar_loss(|t| {
            let (a, b) = (t.constant(x.clone()), t.constant(y.clone()));
            loss_mmd(t, a, b, k)
        });
        prop_assert!(v >= -1e-10);
        let same = scalar_loss(|t| {
            let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
            loss_mmd(t, a, b, k)
        });
        prop_assert!(same.abs() < 1e-10);
    }

    #[test]
    fn hsic_is_symmetric_and_permutation_invariant(n in 4usize..12, da in 1usize..3, db in 1usize..3, seed in 0u64..1000) {
        let (a, b) = (randn(n, da, seed), randn(n, db, seed + 1));
        let k = KernelSpec::poly(2);
        let h = |p: &Matrix, q: &Matrix| scalar_loss(|t| {
            let (x, y) = (t.constant(p.clone()), t.constant(q.clone()));
            loss_hsic(t, x, y, k)
        });
        let base = h(&a, &b);
        prop_assert!(base >= -1e-10);
        prop_assert!((base - h(&b, &a)).abs() < 1e-10 * (1.0 + base.abs()));
        // reversed rotation: a bijection for every n
        let perm: Vec<usize> = (0..n).map(|i| (n - 1 - i + seed as usize) % n).collect();
        let moved = h(&a.select_rows(&perm), &b.select_rows(&perm));
        prop_assert!((base - moved).abs() < 1e-10 * (1.0 + base.abs()));
    }

    #[test]
    fn tsls_is_invariant_to_affine_instrument_maps(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let n = 300;
        let w = randn(n, 2, seed);
        let noise = randn(n, 2, seed + 1);
        let d = Matrix::from_fn(n, 1, |i, _| w.get(i, 0) - 0.5 * w.get(i, 1) + noise.get(i, 0));
        let y = Matrix::from_fn(n, 1, |i, _| 2.0 * d.get(i, 0) + noise.get(i, 1));
        let a = randn(2, 2, seed + 2).add(&Matrix::identity(2).scale(2.0)).unwrap();
        prop_assume!(min_singular_value(&a) > 0.2);
        let moved = matmul(&w, &a).unwrap().map(|v| v + shift);
        let base = tsls(&w, &d, &y).unwrap().theta_hat[0];
        let after = tsls(&moved, &d, &y).unwrap().theta_hat[0];
        prop_assert!((base - after).abs() < 1e-9);
    }

    #[test]
    fn partialling_out_is_invariant_to_affine_maps_of_v(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let n = 300;
        let (w, v, e) = (randn(n, 2, seed), randn(n, 2, seed + 1), randn(n, 2, seed + 2));
        let d = Matrix::from_fn(n, 1, |i, _| w.get(i, 0) + w.get(i, 1) + v.get(i, 0) + e.get(i, 0));
        let y = Matrix::from_fn(n, 1, |i, _| d.get(i, 0) + v.get(i, 1) + e.get(i, 1));
        let a = randn(2, 2, seed + 3).add(&Matrix::identity(2).scale(2.0)).unwrap();
        prop_assume!(min_singular_value(&a) > 0.2);
        let moved = matmul(&v, &a).unwrap().map(|x| x + shift);
        let base = po_tsls(&w, &v, &d, &y).unwrap().theta_hat[0];
        let after = po_tsls(&w, &moved, &d, &y).unwrap().theta_hat[0];
        prop_assert!((base - after).abs() < 1e-9);
    }

    #[test]
    fn noiseless_outcome_is_recovered_exactly(seed in 0u64..1000, theta in -3.0f64..3.0) {
        let n = 60;
        let (w, h) = (randn(n, 3, seed), randn(n, 1, seed + 1));
        let d = Matrix::from_fn(n, 1, |i, _| w.get(i, 0) + 0.5 * w.get(i, 2) + h.get(i, 0));
        let y = d.scale(theta);
        prop_assert!((tsls(&w, &d, &y).unwrap().theta_hat[0] - theta).abs() < 1e-9);
    }

    #[test]
    fn mlp_mixing_inverts(seed in 0u64..1000, n in 1usize..20) {
        let spec = MixingSpec::invertible_mlp(4, seed);
        let mix = Mixing::build(&spec, 4).unwrap();
        let u = randn(n, 4, seed + 1);
        let back = mix.invert(&mix.apply(&u).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&u) < 1e-9);
    }
}

#[test]
fn simulated_latent_moments_match_the_specification() {
    let spec = d2_spec();
    let data = simulate(&spec, &MixingSpec::polynomial(1, 4, 0), 40_000, 0, 2024).unwrap();
    for (k, env) in data.train.iter().enumerate() {
        let o = env.oracle.as_ref().unwrap();
        assert!(o.w.covariance().max_abs_diff(&spec.sigma_w) < 0.04, "env {k} W covariance");
        assert!(o.v.covariance().max_abs_diff(&spec.v_covariance(k)) < 0.08 * (k as f64 + 1.0), "env {k} V covariance");
        assert!(o.w.col_means().max_abs() < 0.03 && o.v.col_means().max_abs() < 0.05, "env {k} means");
    }
    // the V covariance differs across environments, the W law does not
    let gap = spec.v_covariance(1).sub(&spec.v_covariance(0)).unwrap().max_abs();
    assert!(gap > 1.0);
}

#[test]
fn dataset_directory_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(&d2_spec(), &MixingSpec::polynomial(2, 4, 3), 25, 10, 9).unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.val, data.val);
    assert_eq!(back.spec, data.spec);
    assert_eq!(back.mixing, data.mixing);
}
