use caat_core::attack::{AttackSpec, Norm};
use caat_core::loss::LossKind;
use caat_core::model::{Activation, Dense, Label, Model, ModelSpec};
use caat_core::theory;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logistic(w: Vec<f64>, b: f64) -> Model {
    let d = w.len();
    Model::from_layers(
        ModelSpec::logistic(d).unwrap(),
        vec![Dense {
            weights: Array2::from_shape_vec((1, d), w).unwrap(),
            bias: Array1::from(vec![b]),
        }],
        0,
    )
    .unwrap()
}

fn nalgebra_lmax(k: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (k[[i, j]] + k[[j, i]]));
    m.symmetric_eigen().eigenvalues.max()
}

/// `H` for logistic regression: weight block `σ′(−yf)·x_i·w_j − y·σ(−yf)·δ_ij`,
/// bias row `σ′(−yf)·w_j`.
#[test]
fn logistic_h_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let d = rng.random_range(1..12);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b = rng.random_range(-0.5..0.5);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Label = if rng.random_bool(0.5) { 1 } else { -1 };
        let m = logistic(w.clone(), b);
        let h = theory::finite_diff_h(&m, Array1::from(x.clone()).view(), y, &LossKind::Bce).unwrap();
        let yf = y as f64;
        let f: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
        let s = sig(-yf * f);
        let sp = s * (1.0 - s);
        let mut want = Array2::zeros((d + 1, d));
        for i in 0..d {
            for j in 0..d {
                want[[i, j]] = sp * x[i] * w[j] - if i == j { yf * s } else { 0.0 };
            }
        }
        for j in 0..d {
            want[[d, j]] = sp * w[j];
        }
        let err = (&h - &want).mapv(|v| v * v).sum().sqrt() / want.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn saturated_logit_gives_flat_h() {
    let m = logistic(vec![40.0, 40.0, 40.0], 10.0);
    let h = theory::finite_diff_h(&m, Array1::from(vec![0.9, 0.8, 0.7]).view(), 1, &LossKind::Bce).unwrap();
    assert!(h.iter().all(|v| v.abs() < 1e-12), "max {}", h.iter().fold(0.0f64, |a, v| a.max(v.abs())));
}

/// Central differences have `O(h²)` truncation error: halving the step moves
/// the estimate by a small multiple of `h²`.
#[test]
fn doubling_the_step_changes_h_by_order_h_squared() {
    let spec = ModelSpec::mlp(&[6, 5, 3], Activation::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in 0..20 {
        let m = Model::init(spec.clone(), s);
        let x = Array1::from_shape_simple_fn(6, || rng.random_range(0.0..1.0));
        let y = rng.random_range(0..3);
        let h1 = theory::finite_diff_h_with_step(&m, x.view(), y, &LossKind::SoftmaxCe, 1e-5).unwrap();
        let h2 = theory::finite_diff_h_with_step(&m, x.view(), y, &LossKind::SoftmaxCe, 2e-5).unwrap();
        let diff = (&h1 - &h2).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = h1.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-7 * scale, "max change {diff}");
    }
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let b = Array2::from_shape_simple_fn((5, 5), || rng.random_range(-1.0..1.0));
        let k = b.t().dot(&b);
        let p = theory::power_iteration_lmax(k.view()).unwrap();
        let want = nalgebra_lmax(&k);
        assert!((p.lambda_max - want).abs() < 1e-8 * want, "{} vs {want}", p.lambda_max);
        assert!(p.converged && p.residual < 1e-6);
    }
}

#[test]
fn power_iteration_on_real_h() {
    let spec = ModelSpec::mlp(&[12, 8, 4], Activation::Relu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in 0..20 {
        let m = Model::init(spec.clone(), s);
        let x = Array1::from_shape_simple_fn(12, || rng.random_range(0.0..1.0));
        let h = theory::finite_diff_h(&m, x.view(), 1, &LossKind::SoftmaxCe).unwrap();
        let k = h.t().dot(&h);
        let p = theory::power_iteration_lmax(k.view()).unwrap();
        let want = nalgebra_lmax(&k);
        assert!((p.lambda_max - want).abs() < 1e-8 * want.max(1e-12));
    }
}

#[test]
fn zero_budget_bound_is_zero_and_satisfied() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Model::init(ModelSpec::logistic(10).unwrap(), 5);
    for a in [AttackSpec::none(), AttackSpec::analytic_linear(0.0), AttackSpec::pgd(Norm::L2, 0.0, 0.1, 5, true)] {
        let x = Array1::from_shape_simple_fn(10, || rng.random_range(0.0..1.0));
        let r = theory::verify_bound(&m, x.view(), -1, &LossKind::Bce, &a, 0).unwrap();
        assert_eq!(r.mu_bound, 0.0);
        assert_eq!(r.mu_observed, 0.0);
        assert!(r.satisfied);
    }
}

#[test]
fn bound_holds_on_small_mlps() {
    let spec = ModelSpec::mlp(&[8, 6, 3], Activation::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for s in 0..50 {
        let m = Model::init(spec.clone(), s);
        let x = Array1::from_shape_simple_fn(8, || rng.random_range(0.2..0.8));
        for a in [AttackSpec::fgsm(0.05), AttackSpec::pgd(Norm::L2, 0.1, 0.03, 5, true)] {
            let r = theory::verify_bound(&m, x.view(), s as i64 % 3, &LossKind::SoftmaxCe, &a, s).unwrap();
            assert!(r.power_iter_residual < 1e-6);
            assert!(r.mu_observed >= 0.0 && r.lambda_max >= 0.0);
            assert_eq!(r.satisfied, r.mu_observed <= r.mu_bound + theory::BOUND_SLACK);
        }
    }
}

/// At a large budget the reported `μ` and `λ_max` still equal their closed
/// forms, so `satisfied` is decided by the first-order bound itself.
#[test]
fn large_budget_report_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let d = rng.random_range(2..6);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-0.5..0.5);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Label = if rng.random_bool(0.5) { 1 } else { -1 };
        let delta = 0.3;
        let r = theory::verify_bound(&logistic(w.clone(), b), Array1::from(x.clone()).view(), y, &LossKind::Bce, &AttackSpec::analytic_linear(delta).unclipped(), 0).unwrap();

        let yf = y as f64;
        let grad = |v: &[f64]| -> (Vec<f64>, f64) {
            let f: f64 = w.iter().zip(v).map(|(a, c)| a * c).sum::<f64>() + b;
            let s = sig(-yf * f);
            let mut g: Vec<f64> = v.iter().map(|c| -yf * s * c).collect();
            g.push(-yf * s);
            (g, s)
        };
        let xa: Vec<f64> = x.iter().zip(&w).map(|(c, wi)| c - yf * delta * wi.signum()).collect();
        let (gc, s) = grad(&x);
        let (ga, _) = grad(&xa);
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
        let mu = dot(&gc, &gc).sqrt() * dot(&ga, &ga).sqrt() - dot(&gc, &ga);
        let sp = s * (1.0 - s);
        let h = DMatrix::from_fn(d + 1, d, |i, j| {
            let xi = if i < d { x[i] } else { 1.0 };
            sp * xi * w[j] - if i == j { yf * s } else { 0.0 }
        });
        let lmax = (h.transpose() * &h).symmetric_eigen().eigenvalues.max();
        assert!((r.mu_observed - mu).abs() < 1e-9 * mu.max(1e-3));
        assert!((r.lambda_max - lmax).abs() < 1e-6 * lmax);
        let bound = lmax * d as f64 * delta * delta / 2.0;
        assert!((r.mu_bound - bound).abs() < 1e-6 * bound);
    }
}

/// `‖g_a − g_c − Hε‖ / ‖ε‖` shrinks with the budget.
#[test]
fn first_order_remainder_vanishes() {
    let spec = ModelSpec::mlp(&[6, 5, 3], Activation::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for s in 0..20 {
        let m = Model::init(spec.clone(), s);
        let x = Array1::from_shape_simple_fn(6, || rng.random_range(0.2..0.8));
        let dir: Array1<f64> = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
        let y = s as i64 % 3;
        let h = theory::finite_diff_h(&m, x.view(), y, &LossKind::SoftmaxCe).unwrap();
        let g = |v: &Array1<f64>| theory::per_sample_gradients(&m, v.view().insert_axis(ndarray::Axis(0)), &[y], &LossKind::SoftmaxCe).unwrap().row(0).to_owned();
        let gc = g(&x);
        let ratio = |delta: f64| {
            let eps = &dir * (delta / dir.dot(&dir).sqrt());
            let rem = g(&(&x + &eps)) - &gc - h.dot(&eps);
            rem.dot(&rem).sqrt() / delta
        };
        let (coarse, fine) = (ratio(1e-2), ratio(1e-3));
        assert!(fine < 10.0 * coarse * (1e-3 / 1e-2), "{fine} vs {coarse}");
        assert!(fine < coarse);
    }
}

#[test]
fn clustered_top_eigenvalue_is_refined() {
    let n = 33;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u: Array1<f64> = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0));
    let u = &u / u.dot(&u).sqrt();
    let mut k = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..n {
            k[[i, j]] += 3e-4 * u[i] * u[j];
        }
    }
    let p = theory::power_iteration_lmax(k.view()).unwrap();
    assert!(p.refined && p.converged);
    assert!(p.residual < 1e-8);
    assert!((p.lambda_max - (1.0 + 3e-4)).abs() < 1e-12);
    assert!((p.lambda_max - nalgebra_lmax(&k)).abs() < 1e-12);
}
