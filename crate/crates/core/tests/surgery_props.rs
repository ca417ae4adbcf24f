use caat_core::model::ParamVector;
use caat_core::surgery::{self, Branch};
use proptest::prelude::*;

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::from_vec(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn reference_cos(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// Component of `v` orthogonal to `u`.
fn orth(v: &[f64], u: &[f64]) -> Vec<f64> {
    let c = dot(v, u) / dot(u, u);
    v.iter().zip(u).map(|(x, y)| x - c * y).collect()
}

fn vec_pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-10.0f64..10.0, dim),
        prop::collection::vec(-10.0f64..10.0, dim),
    )
        .prop_filter("non-degenerate", |(a, b)| norm(a) > 1e-3 && norm(b) > 1e-3)
}

fn any_dim_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop_oneof![vec_pair(2), vec_pair(3), vec_pair(10), vec_pair(64)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn projection_hits_the_cone_and_keeps_the_orthogonal_part(
        (gc, ga) in any_dim_pair(),
        gamma in -0.95f64..0.99,
    ) {
        let (g, r) = surgery::project_conflict_aware(&pv(gc.clone()), &pv(ga.clone()), gamma).unwrap();
        let phi = reference_cos(&gc, &ga);
        if r.branch == Branch::Projected {
            prop_assert!(phi <= gamma + 1e-12);
            prop_assert!((reference_cos(g.as_slice(), &gc) - gamma).abs() < 1e-9);
            let (o1, o2) = (orth(g.as_slice(), &gc), orth(&ga, &gc));
            let err = o1.iter().zip(&o2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err < 1e-9 * norm(&ga).max(1.0));
            let expected_norm = norm(&ga) * (1.0 - phi * phi).sqrt() / (1.0 - gamma * gamma).sqrt();
            prop_assert!((g.norm() - expected_norm).abs() < 1e-8 * expected_norm.max(1.0));
        } else if r.branch == Branch::StandardOnly {
            prop_assert!(phi > gamma - 1e-12);
            prop_assert_eq!(g.as_slice(), &gc[..]);
        } else {
            prop_assert_eq!(g.as_slice(), &gc[..]);
        }
    }

    /// The result lies in span{g_c, g_a}: the least-squares residual vanishes.
    #[test]
    fn projection_stays_in_the_plane((gc, ga) in any_dim_pair(), gamma in -0.9f64..0.95) {
        let (g, _) = surgery::project_conflict_aware(&pv(gc.clone()), &pv(ga.clone()), gamma).unwrap();
        // Gram–Schmidt basis of the plane.
        let e1: Vec<f64> = gc.iter().map(|v| v / norm(&gc)).collect();
        let r = orth(&ga, &gc);
        let g = g.as_slice();
        let mut resid: Vec<f64> = g.to_vec();
        let c1 = dot(g, &e1);
        for (x, e) in resid.iter_mut().zip(&e1) {
            *x -= c1 * e;
        }
        if norm(&r) > 1e-9 * norm(&ga) {
            let e2: Vec<f64> = r.iter().map(|v| v / norm(&r)).collect();
            let c2 = dot(g, &e2);
            for (x, e) in resid.iter_mut().zip(&e2) {
                *x -= c2 * e;
            }
        }
        prop_assert!(norm(&resid) < 1e-9 * norm(g).max(1.0));
    }

    #[test]
    fn positive_scaling_keeps_branch_and_scales_coefficient(
        (gc, ga) in any_dim_pair(),
        gamma in -0.9f64..0.95,
        a in 0.1f64..10.0,
        b in 0.1f64..10.0,
    ) {
        let (_, r1) = surgery::project_conflict_aware(&pv(gc.clone()), &pv(ga.clone()), gamma).unwrap();
        let sc: Vec<f64> = gc.iter().map(|v| a * v).collect();
        let sa: Vec<f64> = ga.iter().map(|v| b * v).collect();
        let (g2, r2) = surgery::project_conflict_aware(&pv(sc.clone()), &pv(sa.clone()), gamma).unwrap();
        // Near the branch boundaries rounding can legitimately flip the branch.
        let boundary = (r1.phi - gamma).abs() < 1e-9;
        if !boundary && r1.branch != Branch::FallbackDegenerate && r2.branch != Branch::FallbackDegenerate {
            prop_assert_eq!(r1.branch, r2.branch);
        }
        if let (Some(c1), Some(c2)) = (r1.lambda_star, r2.lambda_star) {
            prop_assert!((c2 - b / a * c1).abs() < 1e-9 * c2.abs().max(1.0));
            let want: Vec<f64> = sa.iter().zip(&sc).map(|(x, y)| x + c2 * y).collect();
            for (u, v) in g2.as_slice().iter().zip(&want) {
                prop_assert!((u - v).abs() < 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mu_is_symmetric_and_nonnegative((u, v) in any_dim_pair()) {
        let a = surgery::conflict_mu(&pv(u.clone()), &pv(v.clone())).unwrap();
        let b = surgery::conflict_mu(&pv(v.clone()), &pv(u.clone())).unwrap();
        prop_assert_eq!(a.mu, b.mu);
        prop_assert!(a.mu >= 0.0);
        let want = norm(&u) * norm(&v) * (1.0 - reference_cos(&u, &v));
        prop_assert!((a.mu - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn coefficient_sign_tracks_the_cone(
        nc in 0.01f64..100.0,
        na in 0.01f64..100.0,
        phi in -1.0f64..1.0,
        gamma in -0.999f64..0.999,
    ) {
        prop_assume!(phi <= gamma);
        let c = surgery::lambda_star(nc, na, phi, gamma).unwrap();
        if phi < gamma - 1e-12 {
            prop_assert!(c > 0.0, "c = {c} at phi {phi} < gamma {gamma}");
        }
        let at_boundary = surgery::lambda_star(nc, na, gamma, gamma).unwrap();
        prop_assert!(at_boundary.abs() < 1e-9);
    }

    #[test]
    fn coefficient_decreases_in_phi_on_the_nonnegative_range(
        nc in 0.01f64..100.0,
        na in 0.01f64..100.0,
        gamma in 0.01f64..0.999,
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assume!(hi - lo > 1e-6);
        let c_lo = surgery::lambda_star(nc, na, lo * gamma, gamma).unwrap();
        let c_hi = surgery::lambda_star(nc, na, hi * gamma, gamma).unwrap();
        prop_assert!(c_lo > c_hi);
    }

    #[test]
    fn vanilla_is_linear((gc, ga) in any_dim_pair(), lambda in 0.0f64..=1.0) {
        let g = surgery::combine_vanilla(&pv(gc.clone()), &pv(ga.clone()), lambda).unwrap();
        for ((x, c), a) in g.as_slice().iter().zip(&gc).zip(&ga) {
            prop_assert!((x - ((1.0 - lambda) * c + lambda * a)).abs() < 1e-12);
        }
    }
}

#[test]
fn documented_examples() {
    let (g, r) = surgery::project_conflict_aware(&pv(vec![1.0, 0.0]), &pv(vec![0.0, 1.0]), 0.5f64.sqrt()).unwrap();
    assert_eq!(r.branch, Branch::Projected);
    assert!((g.as_slice()[0] - 1.0).abs() < 1e-12 && (g.as_slice()[1] - 1.0).abs() < 1e-12);
    assert!((g.norm() - 2f64.sqrt()).abs() < 1e-12);

    let (g, r) = surgery::project_conflict_aware(&pv(vec![2.0, 0.0]), &pv(vec![2.0, 0.0]), 0.8).unwrap();
    assert_eq!((g.as_slice(), r.branch), (&[2.0, 0.0][..], Branch::StandardOnly));

    let (g, r) = surgery::project_conflict_aware(&pv(vec![1.0, 0.0]), &pv(vec![-1.0, 1e-9]), 0.5).unwrap();
    assert_eq!((g.as_slice(), r.branch), (&[1.0, 0.0][..], Branch::FallbackDegenerate));

    assert!((surgery::lambda_star(1.0, 1.0, 0.0, 0.6).unwrap() - 0.75).abs() < 1e-15);
}
