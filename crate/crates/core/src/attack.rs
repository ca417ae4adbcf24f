//! Inner-maximization solvers: FGSM, PGD under L∞/L2, and the closed-form
//! worst case for a linear single-logit model.
//!
//! Every attack output lies in the `δ`-ball around its clean input and inside
//! the `[clip_min, clip_max]` box. `sign(0) = 0` throughout, so a vanished
//! input gradient leaves the input where it is.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, sigmoid, softplus, LossKind};
use crate::model::{Label, Model, OutputHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    None,
    Fgsm,
    Pgd,
    AnalyticLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub norm: Norm,
    /// Budget in raw pixel units.
    pub delta: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_init: bool,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for AttackSpec {
    /// L∞ PGD with `δ = 8/255`, `α = 2/255`, 10 steps and a random start.
    fn default() -> Self {
        Self {
            family: AttackFamily::Pgd,
            norm: Norm::Linf,
            delta: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_init: true,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            family: AttackFamily::None,
            ..Self::default()
        }
    }

    pub fn fgsm(delta: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            delta,
            alpha: delta,
            steps: 1,
            random_init: false,
            ..Self::default()
        }
    }

    pub fn pgd(norm: Norm, delta: f64, alpha: f64, steps: usize, random_init: bool) -> Self {
        Self {
            family: AttackFamily::Pgd,
            norm,
            delta,
            alpha,
            steps,
            random_init,
            ..Self::default()
        }
    }

    pub fn analytic_linear(delta: f64) -> Self {
        Self {
            family: AttackFamily::AnalyticLinear,
            delta,
            alpha: delta,
            steps: 1,
            random_init: false,
            ..Self::default()
        }
    }

    /// Same attack without box clipping.
    pub fn unclipped(self) -> Self {
        Self {
            clip_min: f64::NEG_INFINITY,
            clip_max: f64::INFINITY,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::arg("delta", format!("must be finite and >= 0, got {}", self.delta)));
        }
        if self.family == AttackFamily::Pgd {
            if !(self.alpha.is_finite() && self.alpha > 0.0) {
                return Err(Error::arg("alpha", format!("must be finite and > 0, got {}", self.alpha)));
            }
            if self.steps == 0 {
                return Err(Error::arg("steps", "must be >= 1"));
            }
        }
        if self.clip_min.is_nan() || self.clip_max.is_nan() || self.clip_min >= self.clip_max {
            return Err(Error::arg(
                "clip",
                format!("need clip_min < clip_max, got [{}, {}]", self.clip_min, self.clip_max),
            ));
        }
        Ok(())
    }

    /// True when the attack cannot move any input.
    pub fn is_identity(&self) -> bool {
        self.family == AttackFamily::None || self.delta == 0.0
    }
}

#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Closed-form L∞ worst case for `f(x) = wᵀx + b`: `ε* = −y·δ·sign(w)`.
pub fn analytic_linear_attack(w: &[f64], y: Label, delta: f64) -> Vec<f64> {
    let y = y as f64;
    w.iter().map(|&wi| -y * delta * sign(wi)).collect()
}

/// `log(1 + exp(−y(wᵀx + b) + δ‖w‖₁))` with its gradient in `(w, b)`. The
/// subgradient of `‖w‖₁` is taken as 0 where `w_i = 0`.
pub fn analytic_adv_loss(
    w: &[f64],
    b: f64,
    x: &[f64],
    y: Label,
    delta: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "analytic_adv_loss",
            expected: w.len(),
            actual: x.len(),
        });
    }
    if y != 1 && y != -1 {
        return Err(Error::InvalidLabel {
            label: y,
            context: "analytic adversarial loss (expects +1 or -1)",
        });
    }
    let yf = y as f64;
    let f: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let t = -yf * f + delta * l1;
    let s = sigmoid(t);
    let grad_w = w
        .iter()
        .zip(x)
        .map(|(&wi, &xi)| s * (-yf * xi + delta * sign(wi)))
        .collect();
    Ok((softplus(t), grad_w, -yf * s))
}

fn clip_box(x: &mut Array2<f64>, spec: &AttackSpec) {
    let (lo, hi) = (spec.clip_min, spec.clip_max);
    x.mapv_inplace(|v| v.clamp(lo, hi));
}

/// Per-row ascent direction: `sign(g)` for L∞, `g/‖g‖₂` for L2 (zero rows stay zero).
fn step_direction(grad: &Array2<f64>, norm: Norm) -> Array2<f64> {
    match norm {
        Norm::Linf => grad.mapv(sign),
        Norm::L2 => {
            let mut dir = grad.clone();
            for mut row in dir.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                } else {
                    row.fill(0.0);
                }
            }
            dir
        }
    }
}

fn project_ball(x_adv: &mut Array2<f64>, x: &ArrayView2<'_, f64>, norm: Norm, delta: f64) {
    match norm {
        Norm::Linf => {
            ndarray::Zip::from(x_adv)
                .and(x)
                .for_each(|a, &c| *a = a.clamp(c - delta, c + delta));
        }
        Norm::L2 => {
            for (mut row, clean) in x_adv.rows_mut().into_iter().zip(x.rows()) {
                let diff = &row - &clean;
                let n = diff.dot(&diff).sqrt();
                if n > delta {
                    let scale = delta / n;
                    row.assign(&(&clean + &(diff * scale)));
                }
            }
        }
    }
}

/// Per-sample input gradient of the attack objective at `x_adv`.
fn objective_gradient(
    model: &Model,
    clean_logits: Option<&Array2<f64>>,
    x_adv: ArrayView2<'_, f64>,
    labels: &[Label],
    loss: &LossKind,
) -> Result<Array2<f64>> {
    let (logits, cache) = model.forward(x_adv)?;
    let clean = clean_logits.map(|c| c.view()).unwrap_or(logits.view());
    let d = loss::attack_dlogits(loss, model.spec().output_head(), clean, logits.view(), labels)?;
    let g = model.input_gradient_batch(&cache, d.view())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attack input gradient".into()));
    }
    Ok(g)
}

fn clean_logits_if_pair(model: &Model, x: &ArrayView2<'_, f64>, loss: &LossKind) -> Result<Option<Array2<f64>>> {
    if loss.is_pair() {
        Ok(Some(model.logits(x.view())?))
    } else {
        Ok(None)
    }
}

fn fgsm_batch(
    model: &Model,
    x: ArrayView2<'_, f64>,
    labels: &[Label],
    loss: &LossKind,
    spec: &AttackSpec,
) -> Result<Array2<f64>> {
    let clean = clean_logits_if_pair(model, &x, loss)?;
    let grad = objective_gradient(model, clean.as_ref(), x, labels, loss)?;
    let dir = step_direction(&grad, spec.norm);
    let mut out = &x + &(dir * spec.delta);
    clip_box(&mut out, spec);
    Ok(out)
}

fn random_start(x: &ArrayView2<'_, f64>, spec: &AttackSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let delta = spec.delta;
    let mut out = x.to_owned();
    match spec.norm {
        Norm::Linf => {
            out.mapv_inplace(|v| v + rng.random_range(-delta..=delta));
        }
        Norm::L2 => {
            let d = x.ncols();
            for mut row in out.rows_mut() {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: f64 = rng.random();
                let radius = delta * u.powf(1.0 / d as f64);
                if n > 0.0 {
                    for (r, g) in row.iter_mut().zip(&dir) {
                        *r += radius * g / n;
                    }
                }
            }
        }
    }
    clip_box(&mut out, spec);
    out
}

fn pgd_batch(
    model: &Model,
    x: ArrayView2<'_, f64>,
    labels: &[Label],
    loss: &LossKind,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    let clean = clean_logits_if_pair(model, &x, loss)?;
    let mut x_adv = if spec.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_start(&x, spec, &mut rng)
    } else {
        x.to_owned()
    };
    for _ in 0..spec.steps {
        let grad = objective_gradient(model, clean.as_ref(), x_adv.view(), labels, loss)?;
        let dir = step_direction(&grad, spec.norm);
        x_adv = x_adv + dir * spec.alpha;
        project_ball(&mut x_adv, &x, spec.norm, spec.delta);
        clip_box(&mut x_adv, spec);
    }
    Ok(x_adv)
}

fn analytic_batch(
    model: &Model,
    x: ArrayView2<'_, f64>,
    labels: &[Label],
    loss: &LossKind,
    spec: &AttackSpec,
) -> Result<Array2<f64>> {
    if model.spec().num_layers() != 1 || model.spec().output_head() != OutputHead::SingleLogit {
        return Err(Error::arg("attack", "analytic_linear needs a single-logit linear model"));
    }
    if *loss != LossKind::Bce {
        return Err(Error::arg("attack", "analytic_linear is defined for the bce loss"));
    }
    if spec.norm != Norm::Linf {
        return Err(Error::arg("attack", "analytic_linear is the L-infinity solution"));
    }
    let w = model.layers()[0].weights.row(0).to_vec();
    let mut out = x.to_owned();
    for (mut row, &y) in out.rows_mut().into_iter().zip(labels) {
        if y != 1 && y != -1 {
            return Err(Error::InvalidLabel {
                label: y,
                context: "analytic attack (expects +1 or -1)",
            });
        }
        let eps = analytic_linear_attack(&w, y, spec.delta);
        for (v, e) in row.iter_mut().zip(eps) {
            *v += e;
        }
    }
    clip_box(&mut out, spec);
    Ok(out)
}

/// Attacks every row of `x`. `seed` drives the random start; the result is a
/// pure function of its arguments.
pub fn perturb_batch(
    model: &Model,
    x: ArrayView2<'_, f64>,
    labels: &[Label],
    loss: &LossKind,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Array2<f64>> {
    spec.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "attack labels",
            expected: x.nrows(),
            actual: labels.len(),
        });
    }
    if spec.is_identity() {
        return Ok(x.to_owned());
    }
    match spec.family {
        AttackFamily::None => Ok(x.to_owned()),
        AttackFamily::Fgsm => fgsm_batch(model, x, labels, loss, spec),
        AttackFamily::Pgd => pgd_batch(model, x, labels, loss, spec, seed),
        AttackFamily::AnalyticLinear => analytic_batch(model, x, labels, loss, spec),
    }
}

fn single(
    model: &Model,
    x: ArrayView1<'_, f64>,
    y: Label,
    loss: &LossKind,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Array1<f64>> {
    let batch = x.insert_axis(Axis(0));
    let out = perturb_batch(model, batch, &[y], loss, spec, seed)?;
    Ok(out.row(0).to_owned())
}

/// `clip(x + δ·sign(∂L/∂x))` with the default `[0, 1]` box.
pub fn fgsm(model: &Model, x: ArrayView1<'_, f64>, y: Label, loss: &LossKind, delta: f64) -> Result<Array1<f64>> {
    single(model, x, y, loss, &AttackSpec::fgsm(delta), 0)
}

pub fn pgd(
    model: &Model,
    x: ArrayView1<'_, f64>,
    y: Label,
    loss: &LossKind,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Array1<f64>> {
    if spec.family != AttackFamily::Pgd {
        return Err(Error::arg("attack", "pgd needs family = pgd"));
    }
    single(model, x, y, loss, spec, seed)
}
