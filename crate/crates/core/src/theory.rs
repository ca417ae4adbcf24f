//! Numerical audit of the conflict bound `μ ≤ λ_max(HᵀH)·‖ε‖²/2`, where
//! `H = ∂g_c/∂x` is the mixed second derivative of the loss.
//!
//! `H` is built column by column with central differences of the per-sample
//! parameter gradient; `λ_max` comes from power iteration on the symmetrized
//! `K = HᵀH`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackFamily, AttackSpec, Norm};
use crate::error::{Error, Result};
use crate::loss::{self, LossKind};
use crate::model::{Label, Model, ParamVector};
use crate::surgery;

/// Central-difference step for `H`.
pub const FD_STEP: f64 = 1e-5;
/// Largest `d_θ · d` for which `H` is materialized.
pub const SIZE_GUARD: usize = 10_000_000;
pub const POWER_MAX_ITERS: usize = 10_000;
const POWER_START_SEED: u64 = 0x5EED_CAA7;
/// Krylov dimension and restart budget when refining a stalled power iteration.
const LANCZOS_DIM: usize = 32;
const LANCZOS_RESTARTS: usize = 50;
/// Slack on the `satisfied` comparison.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub lambda_max: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the iteration cap was hit and the estimate was refined by
    /// restarted Lanczos from the last iterate.
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lambda_max: f64,
    pub mu_observed: f64,
    /// `λ_max·δ²/2` (L2) or `λ_max·d·δ²/2` (L∞).
    pub mu_bound: f64,
    /// The looser L∞ constant `λ_max·d²·δ²/2`; equal to `mu_bound` for L2.
    pub mu_bound_d_squared: f64,
    pub norm: Norm,
    pub delta: f64,
    pub d: usize,
    pub satisfied: bool,
    pub power_iter_residual: f64,
    pub power_iter_converged: bool,
    pub eps_norm_l2: f64,
    pub norm_gc: f64,
    pub norm_ga: f64,
    pub phi: f64,
}

/// Per-sample parameter gradients of the base loss for every row of `batch`.
pub fn per_sample_gradients(
    model: &Model,
    batch: ArrayView2<'_, f64>,
    labels: &[Label],
    loss: &LossKind,
) -> Result<Array2<f64>> {
    let (logits, cache) = model.forward(batch)?;
    let (_, d) = loss::batch_loss(&loss.base(), model.spec().output_head(), logits.view(), labels)?;
    model.per_sample_param_gradients(&cache, d.view())
}

pub fn sample_gradient(model: &Model, x: ArrayView1<'_, f64>, y: Label, loss: &LossKind) -> Result<ParamVector> {
    let g = per_sample_gradients(model, x.insert_axis(Axis(0)), &[y], loss)?;
    Ok(ParamVector::from_vec(g.row(0).to_vec()))
}

/// Finite-difference `H = ∂g_c/∂x`, shape `(d_θ, d)`. `g_c` is the gradient
/// of the base classification loss (cross-entropy for the pair losses).
pub fn finite_diff_h(model: &Model, x: ArrayView1<'_, f64>, y: Label, loss: &LossKind) -> Result<Array2<f64>> {
    finite_diff_h_with_step(model, x, y, loss, FD_STEP)
}

pub fn finite_diff_h_with_step(
    model: &Model,
    x: ArrayView1<'_, f64>,
    y: Label,
    loss: &LossKind,
    h: f64,
) -> Result<Array2<f64>> {
    let d = model.spec().input_dim();
    let p = model.spec().param_count();
    let required = p.saturating_mul(d);
    if required > SIZE_GUARD {
        return Err(Error::SizeGuard {
            required,
            limit: SIZE_GUARD,
        });
    }
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            context: "finite_diff_h input",
            expected: d,
            actual: x.len(),
        });
    }
    let mut out = Array2::zeros((p, d));
    const CHUNK: usize = 64;
    let mut start = 0;
    while start < d {
        let end = (start + CHUNK).min(d);
        let cols = end - start;
        let mut batch = Array2::zeros((2 * cols, d));
        for (k, j) in (start..end).enumerate() {
            let mut plus = batch.row_mut(2 * k);
            plus.assign(&x);
            plus[j] += h;
            let mut minus = batch.row_mut(2 * k + 1);
            minus.assign(&x);
            minus[j] -= h;
        }
        let labels = vec![y; 2 * cols];
        let grads = per_sample_gradients(model, batch.view(), &labels, loss)?;
        for (k, j) in (start..end).enumerate() {
            let col = (&grads.row(2 * k) - &grads.row(2 * k + 1)) / (2.0 * h);
            out.column_mut(j).assign(&col);
        }
        start = end;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite-difference H".into()));
    }
    Ok(out)
}

/// Largest eigenvalue of a symmetric PSD matrix (symmetrized as `(K+Kᵀ)/2`).
///
/// Stops once the Rayleigh quotient changes by less than
/// `1e-10·max(1, λ)` and the residual `‖Kv − λv‖` is below `1e-8·max(1, λ)`,
/// or after [`POWER_MAX_ITERS`] iterations. A run that hits the cap (a top
/// eigenvalue clustered with the next ones) is refined by restarted Lanczos
/// from the last iterate; `converged` reports whether the refined pair meets
/// the same residual tolerance.
pub fn power_iteration_lmax(k: ArrayView2<'_, f64>) -> Result<PowerIteration> {
    let (rows, cols) = k.dim();
    if rows != cols {
        return Err(Error::DimensionMismatch {
            context: "power iteration (square matrix)",
            expected: rows,
            actual: cols,
        });
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("power iteration matrix".into()));
    }
    let n = rows;
    if n == 0 {
        return Ok(PowerIteration {
            lambda_max: 0.0,
            residual: 0.0,
            iterations: 0,
            converged: true,
            refined: false,
        });
    }
    let sym = (&k + &k.t()) * 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_START_SEED);
    let mut v: Array1<f64> = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0));
    let vn = v.dot(&v).sqrt();
    v /= vn;

    let mut lambda = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_MAX_ITERS {
        let w = sym.dot(&v);
        let next = v.dot(&w);
        residual = {
            let r = &w - &(&v * next);
            r.dot(&r).sqrt()
        };
        let scale = next.abs().max(1.0);
        let settled = (next - lambda).abs() < 1e-10 * scale;
        lambda = next;
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return Ok(PowerIteration {
                lambda_max: 0.0,
                residual,
                iterations: it,
                converged: true,
                refined: false,
            });
        }
        if settled && residual < 1e-8 * scale {
            return Ok(PowerIteration {
                lambda_max: lambda.max(0.0),
                residual,
                iterations: it,
                converged: true,
                refined: false,
            });
        }
        v = w / wn;
    }
    let (mut lambda_max, mut best_residual) = (lambda, residual);
    let (ritz, ritz_residual) = lanczos_refine(&sym, v);
    if ritz_residual < best_residual {
        (lambda_max, best_residual) = (ritz, ritz_residual);
    }
    Ok(PowerIteration {
        lambda_max: lambda_max.max(0.0),
        residual: best_residual,
        iterations: POWER_MAX_ITERS,
        converged: best_residual < 1e-8 * lambda_max.abs().max(1.0),
        refined: true,
    })
}

fn rayleigh_residual(sym: &Array2<f64>, y: &Array1<f64>) -> (f64, f64) {
    let ky = sym.dot(y);
    let theta = y.dot(&ky);
    let r = &ky - &(y * theta);
    (theta, r.dot(&r).sqrt())
}

/// Top Ritz pair of restarted Lanczos (full reorthogonalization) started at
/// the unit vector `v`; returns the Ritz value and its residual.
fn lanczos_refine(sym: &Array2<f64>, mut v: Array1<f64>) -> (f64, f64) {
    let n = v.len();
    let (mut best, mut best_residual) = rayleigh_residual(sym, &v);
    for _ in 0..LANCZOS_RESTARTS {
        let mut basis: Vec<Array1<f64>> = vec![v.clone()];
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for j in 0..LANCZOS_DIM.min(n) {
            let mut w = sym.dot(&basis[j]);
            alpha.push(basis[j].dot(&w));
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&w);
                    w.scaled_add(-c, q);
                }
            }
            let b = w.dot(&w).sqrt();
            if j + 1 == LANCZOS_DIM.min(n) || b <= 1e-13 * alpha[j].abs().max(1.0) {
                break;
            }
            beta.push(b);
            basis.push(w / b);
        }
        let m = alpha.len();
        let t = nalgebra::DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = t.symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let mut y = Array1::zeros(n);
        for (i, q) in basis.iter().take(m).enumerate() {
            y.scaled_add(eig.eigenvectors[(i, top)], q);
        }
        let yn = y.dot(&y).sqrt();
        if yn == 0.0 || !yn.is_finite() {
            break;
        }
        y /= yn;
        let (theta, residual) = rayleigh_residual(sym, &y);
        if residual < best_residual {
            (best, best_residual) = (theta, residual);
        }
        if best_residual < 1e-8 * best.abs().max(1.0) {
            break;
        }
        v = y;
    }
    (best, best_residual)
}

/// `λ_max·δ²/2` for L2 and `λ_max·d·δ²/2` for L∞ (from `Σ εᵢ² ≤ d·δ²`).
pub fn mu_upper_bound(lambda_max: f64, delta: f64, d: usize, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => 0.5 * lambda_max * delta * delta,
        Norm::Linf => 0.5 * lambda_max * d as f64 * delta * delta,
    }
}

/// The L∞ bound with a `d²` factor instead of `d`.
pub fn mu_upper_bound_d_squared(lambda_max: f64, delta: f64, d: usize, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => mu_upper_bound(lambda_max, delta, d, norm),
        Norm::Linf => 0.5 * lambda_max * (d as f64).powi(2) * delta * delta,
    }
}

/// Attacks `x`, measures `μ` between the clean and adversarial gradients and
/// compares it with the spectral bound at `x`.
pub fn verify_bound(
    model: &Model,
    x: ArrayView1<'_, f64>,
    y: Label,
    loss: &LossKind,
    attack: &AttackSpec,
    seed: u64,
) -> Result<BoundReport> {
    attack.validate()?;
    let d = model.spec().input_dim();
    let guard = model.spec().param_count().saturating_mul(d);
    if guard > SIZE_GUARD {
        return Err(Error::SizeGuard {
            required: guard,
            limit: SIZE_GUARD,
        });
    }
    let base = loss.base();
    let x_adv = attack::perturb_batch(model, x.insert_axis(Axis(0)), &[y], &base, attack, seed)?;
    let x_adv = x_adv.row(0);
    let eps = &x_adv - &x;
    let eps_norm_l2 = eps.dot(&eps).sqrt();

    let g_c = sample_gradient(model, x, y, &base)?;
    let g_a = sample_gradient(model, x_adv, y, &base)?;
    let conflict = surgery::conflict_mu(&g_c, &g_a)?;

    let h = finite_diff_h(model, x, y, &base)?;
    let k = h.t().dot(&h);
    let power = power_iteration_lmax(k.view())?;

    let delta = if attack.family == AttackFamily::None {
        0.0
    } else {
        attack.delta
    };
    let mu_bound = mu_upper_bound(power.lambda_max, delta, d, attack.norm);
    Ok(BoundReport {
        lambda_max: power.lambda_max,
        mu_observed: conflict.mu,
        mu_bound,
        mu_bound_d_squared: mu_upper_bound_d_squared(power.lambda_max, delta, d, attack.norm),
        norm: attack.norm,
        delta,
        d,
        satisfied: conflict.mu <= mu_bound + BOUND_SLACK,
        power_iter_residual: power.residual,
        power_iter_converged: power.converged,
        eps_norm_l2,
        norm_gc: conflict.norm_gc,
        norm_ga: conflict.norm_ga,
        phi: conflict.phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_and_identity() {
        let p = power_iteration_lmax(array![[4.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert!((p.lambda_max - 4.0).abs() < 1e-9);
        assert!(p.converged && p.residual < 1e-6);
        let p = power_iteration_lmax(Array2::<f64>::eye(5).view()).unwrap();
        assert!((p.lambda_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let p = power_iteration_lmax(Array2::<f64>::zeros((3, 3)).view()).unwrap();
        assert_eq!(p.lambda_max, 0.0);
        assert!(p.converged);
    }

    #[test]
    fn rejects_non_square() {
        assert!(power_iteration_lmax(Array2::<f64>::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn bound_formulas() {
        assert_eq!(mu_upper_bound(2.0, 0.0, 4, Norm::Linf), 0.0);
        assert!((mu_upper_bound(2.0, 0.1, 4, Norm::L2) - 0.01).abs() < 1e-15);
        assert!((mu_upper_bound(2.0, 0.1, 4, Norm::Linf) - 0.04).abs() < 1e-15);
        assert!((mu_upper_bound_d_squared(2.0, 0.1, 4, Norm::Linf) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn size_guard_refuses_large_models() {
        let spec = crate::model::ModelSpec::mlp(&[1024, 256, 10], crate::model::Activation::Relu).unwrap();
        let m = Model::init(spec, 0);
        let x = Array1::zeros(1024);
        assert!(matches!(
            finite_diff_h(&m, x.view(), 0, &LossKind::SoftmaxCe),
            Err(Error::SizeGuard { .. })
        ));
    }
}
