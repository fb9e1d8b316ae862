mod common;

use late_balance::balancer::{self, fit, tailored_loss, tailored_loss_gradient, tailored_loss_hessian, SolverOptions};
use late_balance::basis::{orthonormalize, power_series_basis, raw_basis};
use late_balance::late::{estimate_ipw, estimate_method, estimate_tsls, estimate_wald, MethodOptions, MethodSpec};
use late_balance::{Dataset, MethodLabel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 40, failure_persistence: None, ..ProptestConfig::default() }
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn gradient_and_hessian_match_finite_differences(seed in any::<u64>(), t in prop::collection::vec(-0.8f64..0.8, 3)) {
        let ds = common::random_dataset(seed, 50, 2);
        let basis = raw_basis(&ds.x, true, &names(2));
        let theta = DVector::from_vec(t);
        let g = tailored_loss_gradient(&theta, &basis, &ds.z).unwrap();
        let h = tailored_loss_hessian(&theta, &basis, &ds.z).unwrap();
        let step = 1e-6;
        for j in 0..3 {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += step;
            dn[j] -= step;
            let fd = (tailored_loss(&up, &basis, &ds.z).unwrap() - tailored_loss(&dn, &basis, &ds.z).unwrap()) / (2.0 * step);
            prop_assert!((g[j] - fd).abs() <= 1e-5 * g[j].abs().max(1.0), "gradient {j}: {} vs {fd}", g[j]);
            let fd_col = (tailored_loss_gradient(&up, &basis, &ds.z).unwrap() - tailored_loss_gradient(&dn, &basis, &ds.z).unwrap()) / (2.0 * step);
            for i in 0..3 {
                prop_assert!((h[(i, j)] - fd_col[i]).abs() <= 1e-5 * h[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn tailored_loss_is_concave(seed in any::<u64>(), t in prop::collection::vec(-3.0f64..3.0, 4)) {
        let ds = common::random_dataset(seed, 60, 3);
        let basis = raw_basis(&ds.x, true, &names(3));
        let h = tailored_loss_hessian(&DVector::from_vec(t), &basis, &ds.z).unwrap();
        let max_eig = h.symmetric_eigen().eigenvalues.max();
        prop_assert!(max_eig <= 1e-12, "largest eigenvalue {max_eig}");
    }

    #[test]
    fn converged_fits_balance_exactly(seed in any::<u64>(), n in 50usize..400, p in 0usize..4) {
        let ds = common::random_dataset(seed, n, p);
        let basis = raw_basis(&ds.x, true, &names(p));
        let f = fit(&basis, &ds.z, &SolverOptions::default()).unwrap();
        if f.converged {
            prop_assert!(f.max_balance_residual <= 1e-8);
            let res = balancer::balance_residuals(&basis.values, &ds.z, &f.weights);
            prop_assert!(res.amax() <= 1e-8);
        }
        let n1: f64 = ds.z.iter().zip(&f.weights).map(|(z, w)| z * w).sum();
        let n0: f64 = ds.z.iter().zip(&f.weights).map(|(z, w)| (1.0 - z) * w).sum();
        for (i, w) in f.weights.iter().enumerate() {
            prop_assert!(*w >= 1.0);
            let expect = ds.z[i] / f.scores[i] + (1.0 - ds.z[i]) / (1.0 - f.scores[i]);
            prop_assert_eq!(*w, expect);
        }
        if f.converged {
            // The intercept column balances the two weight totals.
            prop_assert!((n1 - n0).abs() <= 1e-8 * n as f64);
        }
    }

    #[test]
    fn balanced_ipw_is_self_normalized(seed in any::<u64>(), n in 80usize..600) {
        let ds = common::random_dataset(seed, n, 2);
        let basis = raw_basis(&ds.x, true, &names(2));
        let f = fit(&basis, &ds.z, &SolverOptions::default()).unwrap();
        prop_assume!(f.converged);
        let plain = estimate_ipw(&ds, &f, false, false).unwrap();
        let normed = estimate_ipw(&ds, &f, true, false).unwrap();
        prop_assert!((plain.tau_hat - normed.tau_hat).abs() <= 1e-12 * plain.tau_hat.abs().max(1.0));
    }

    #[test]
    fn orthonormalized_columns_have_identity_gram(seed in any::<u64>(), n in 30usize..300, k in 2usize..5) {
        let ds = common::random_dataset(seed, n, 2);
        let basis = power_series_basis(&ds.x, k, &names(2)).unwrap();
        let q = orthonormalize(&basis).unwrap();
        let gram = q.values.tr_mul(&q.values) / n as f64;
        let gap = (gram - DMatrix::identity(q.r(), q.r())).amax();
        prop_assert!(gap <= 1e-9, "gap {gap}");
    }

    #[test]
    fn power_series_bases_are_nested(seed in any::<u64>(), k in 1usize..8, p in 1usize..4) {
        let ds = common::random_dataset(seed, 20, p);
        let small = power_series_basis(&ds.x, k, &names(p)).unwrap();
        let big = power_series_basis(&ds.x, k + 1, &names(p)).unwrap();
        prop_assert!(big.r() >= small.r());
        prop_assert_eq!(&big.labels[..small.r()], &small.labels[..]);
        prop_assert_eq!(big.values.columns(0, small.r()).into_owned(), small.values);
    }

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), n in 2usize..60, p in 0usize..4) {
        let ds = common::random_dataset(seed, n.max(4), p);
        prop_assume!(Dataset::new(ds.y.clone(), ds.d.clone(), ds.z.clone(), ds.x.clone()).is_ok());
        let mut buf = Vec::new();
        ds.to_csv_writer(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn estimates_are_affine_equivariant_in_y(seed in any::<u64>(), a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], b in -10.0f64..10.0) {
        let ds = common::random_dataset(seed, 300, 2);
        let mut moved = ds.clone();
        moved.y.iter_mut().for_each(|y| *y = a * *y + b);
        let opts = MethodOptions::default();
        for label in [MethodLabel::Wald, MethodLabel::Iv, MethodLabel::BX, MethodLabel::Mle2] {
            let spec = MethodSpec::standard(label);
            let (e0, e1) = match (estimate_method(&ds, &spec, &opts, None), estimate_method(&moved, &spec, &opts, None)) {
                (Ok(e0), Ok(e1)) => (e0, e1),
                _ => continue,
            };
            prop_assert!((e1.tau_hat - a * e0.tau_hat).abs() <= 1e-9 * (a * e0.tau_hat).abs().max(1.0), "{label}");
            if let (Some(s0), Some(s1)) = (e0.se, e1.se) {
                prop_assert!((s1 - a.abs() * s0).abs() <= 1e-9 * s1.max(1.0), "{label} se");
            }
        }
        let w = estimate_wald(&ds).unwrap();
        let t = estimate_tsls(&ds).unwrap();
        prop_assert!(w.tau_hat.is_finite() && t.tau_hat.is_finite());
    }
}
