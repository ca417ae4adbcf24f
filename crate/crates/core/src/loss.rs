//! Classification losses and adversarial pair losses with exact logit gradients.
//!
//! Single-input losses (`bce`, `softmax_ce`) score one set of logits. Pair
//! losses (`trades`, `clp`) score clean and adversarial logits jointly and
//! return a gradient for each branch, so training can route the clean branch
//! into the standard gradient and the adversarial branch into the adversarial
//! gradient.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, OutputHead};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Bce,
    SoftmaxCe,
    /// `CE(clean) + beta · KL(p_clean ‖ p_adv)`
    Trades { beta: f64 },
    /// `CE(adv) + beta · ‖z_clean − z_adv‖²`
    Clp { beta: f64 },
}

impl LossKind {
    pub const DEFAULT_PAIR_BETA: f64 = 6.0;

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Trades { beta } | LossKind::Clp { beta } => {
                if !(beta.is_finite() && beta >= 0.0) {
                    return Err(Error::arg("beta", format!("must be finite and >= 0, got {beta}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn is_pair(&self) -> bool {
        matches!(self, LossKind::Trades { .. } | LossKind::Clp { .. })
    }

    /// The single-input classification loss underlying this kind.
    pub fn base(&self) -> LossKind {
        match self {
            LossKind::Bce => LossKind::Bce,
            _ => LossKind::SoftmaxCe,
        }
    }

    pub fn check_head(&self, head: OutputHead) -> Result<()> {
        match (self, head) {
            (LossKind::Bce, OutputHead::SingleLogit) => Ok(()),
            (LossKind::Bce, OutputHead::MultiLogit) => Err(Error::arg(
                "loss",
                "bce needs a single_logit head",
            )),
            (_, OutputHead::MultiLogit) => Ok(()),
            (_, OutputHead::SingleLogit) => Err(Error::arg(
                "loss",
                "softmax-based losses need a multi_logit head",
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::Trades { .. } => "trades",
            LossKind::Clp { .. } => "clp",
        }
    }
}

/// `ln(1 + eᵗ)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_binary(y: Label) -> Result<()> {
    if y == 1 || y == -1 {
        Ok(())
    } else {
        Err(Error::InvalidLabel {
            label: y,
            context: "bce (expects +1 or -1)",
        })
    }
}

fn check_class(label: Label, l: usize) -> Result<usize> {
    if label >= 0 && (label as usize) < l {
        Ok(label as usize)
    } else {
        Err(Error::InvalidLabel {
            label,
            context: "softmax cross-entropy (class index out of range)",
        })
    }
}

/// `log(1 + exp(−y·z))` and its derivative `−y·σ(−y·z)`.
pub fn bce_loss(logit: f64, y: Label) -> Result<(f64, f64)> {
    check_binary(y)?;
    let y = y as f64;
    let t = -y * logit;
    Ok((softplus(t), -y * sigmoid(t)))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `logsumexp(z) − z[label]` and `softmax(z) − onehot(label)`.
pub fn softmax_ce(logits: &[f64], label: Label) -> Result<(f64, Vec<f64>)> {
    let idx = check_class(label, logits.len())?;
    let ls = log_softmax(logits);
    let mut grad: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    grad[idx] -= 1.0;
    Ok((-ls[idx], grad))
}

/// `KL(softmax(p) ‖ softmax(q))`, computed from log-probabilities.
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum();
    kl.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_clean: Vec<f64>,
    pub grad_adv: Vec<f64>,
}

fn check_pair(clean: &[f64], adv: &[f64], beta: f64) -> Result<()> {
    if clean.len() != adv.len() {
        return Err(Error::DimensionMismatch {
            context: "pair loss logits",
            expected: clean.len(),
            actual: adv.len(),
        });
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::arg("beta", format!("must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

pub fn trades_pair_loss(clean: &[f64], adv: &[f64], label: Label, beta: f64) -> Result<PairLoss> {
    check_pair(clean, adv, beta)?;
    let (ce, mut grad_clean) = softmax_ce(clean, label)?;
    let lp = log_softmax(clean);
    let lq = log_softmax(adv);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let r: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
    let kl: f64 = p.iter().zip(&r).map(|(pi, ri)| pi * ri).sum();
    // ∂KL/∂z_clean = p ⊙ (r − KL), ∂KL/∂z_adv = q − p
    for ((g, pi), ri) in grad_clean.iter_mut().zip(&p).zip(&r) {
        *g += beta * pi * (ri - kl);
    }
    let grad_adv = lq
        .iter()
        .zip(&p)
        .map(|(lqi, pi)| beta * (lqi.exp() - pi))
        .collect();
    Ok(PairLoss {
        loss: ce + beta * kl.max(0.0),
        grad_clean,
        grad_adv,
    })
}

pub fn clp_pair_loss(clean: &[f64], adv: &[f64], label: Label, beta: f64) -> Result<PairLoss> {
    check_pair(clean, adv, beta)?;
    let (ce, mut grad_adv) = softmax_ce(adv, label)?;
    let mut pairing = 0.0;
    let mut grad_clean = Vec::with_capacity(clean.len());
    for ((c, a), ga) in clean.iter().zip(adv).zip(grad_adv.iter_mut()) {
        let diff = c - a;
        pairing += diff * diff;
        grad_clean.push(2.0 * beta * diff);
        *ga -= 2.0 * beta * diff;
    }
    Ok(PairLoss {
        loss: ce + beta * pairing,
        grad_clean,
        grad_adv,
    })
}

fn pair_loss(kind: &LossKind, clean: &[f64], adv: &[f64], label: Label) -> Result<PairLoss> {
    match *kind {
        LossKind::Trades { beta } => trades_pair_loss(clean, adv, label, beta),
        LossKind::Clp { beta } => clp_pair_loss(clean, adv, label, beta),
        LossKind::Bce => {
            let (lc, gc) = bce_loss(clean[0], label)?;
            let (la, ga) = bce_loss(adv[0], label)?;
            Ok(PairLoss {
                loss: lc + la,
                grad_clean: vec![gc],
                grad_adv: vec![ga],
            })
        }
        LossKind::SoftmaxCe => {
            let (lc, gc) = softmax_ce(clean, label)?;
            let (la, ga) = softmax_ce(adv, label)?;
            Ok(PairLoss {
                loss: lc + la,
                grad_clean: gc,
                grad_adv: ga,
            })
        }
    }
}

fn check_batch(head: OutputHead, kind: &LossKind, logits: &ArrayView2<'_, f64>, labels: &[Label]) -> Result<()> {
    kind.validate()?;
    kind.check_head(head)?;
    if logits.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "labels vs logits rows",
            expected: logits.nrows(),
            actual: labels.len(),
        });
    }
    Ok(())
}

/// Per-sample losses and logit gradients for a single-input loss. Pair losses
/// are evaluated on the diagonal (clean = adversarial = `logits`), returning
/// the total derivative.
pub fn batch_loss(
    kind: &LossKind,
    head: OutputHead,
    logits: ArrayView2<'_, f64>,
    labels: &[Label],
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_batch(head, kind, &logits, labels)?;
    let mut grads = Array2::zeros(logits.raw_dim());
    let mut losses = Vec::with_capacity(labels.len());
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let row = row.to_vec();
        match kind {
            LossKind::Bce => {
                let (l, g) = bce_loss(row[0], y)?;
                losses.push(l);
                grads[[i, 0]] = g;
            }
            LossKind::SoftmaxCe => {
                let (l, g) = softmax_ce(&row, y)?;
                losses.push(l);
                grads.row_mut(i).assign(&ndarray::ArrayView1::from(&g));
            }
            LossKind::Trades { .. } | LossKind::Clp { .. } => {
                let p = pair_loss(kind, &row, &row, y)?;
                losses.push(p.loss);
                for (j, (a, b)) in p.grad_clean.iter().zip(&p.grad_adv).enumerate() {
                    grads[[i, j]] = a + b;
                }
            }
        }
    }
    Ok((losses, grads))
}

/// Loss split into a clean-branch and an adversarial-branch gradient.
#[derive(Debug, Clone)]
pub struct SplitLoss {
    /// Mean per-sample objective: `L(clean) + L(adv)` for single-input
    /// losses, the pair loss otherwise.
    pub mean_loss: f64,
    pub d_clean: Array2<f64>,
    pub d_adv: Array2<f64>,
}

pub fn split_batch_loss(
    kind: &LossKind,
    head: OutputHead,
    clean: ArrayView2<'_, f64>,
    adv: ArrayView2<'_, f64>,
    labels: &[Label],
) -> Result<SplitLoss> {
    check_batch(head, kind, &clean, labels)?;
    if clean.dim() != adv.dim() {
        return Err(Error::DimensionMismatch {
            context: "clean vs adversarial logits",
            expected: clean.len(),
            actual: adv.len(),
        });
    }
    let mut d_clean = Array2::zeros(clean.raw_dim());
    let mut d_adv = Array2::zeros(adv.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = clean.row(i).to_vec();
        let a = adv.row(i).to_vec();
        let p = pair_loss(kind, &c, &a, y)?;
        total += p.loss;
        d_clean.row_mut(i).assign(&ndarray::ArrayView1::from(&p.grad_clean));
        d_adv.row_mut(i).assign(&ndarray::ArrayView1::from(&p.grad_adv));
    }
    Ok(SplitLoss {
        mean_loss: total / labels.len().max(1) as f64,
        d_clean,
        d_adv,
    })
}

/// Logit gradient of the attack objective at the adversarial logits. For pair
/// losses the clean logits are held fixed.
pub fn attack_dlogits(
    kind: &LossKind,
    head: OutputHead,
    clean: ArrayView2<'_, f64>,
    adv: ArrayView2<'_, f64>,
    labels: &[Label],
) -> Result<Array2<f64>> {
    if kind.is_pair() {
        Ok(split_batch_loss(kind, head, clean, adv, labels)?.d_adv)
    } else {
        Ok(batch_loss(kind, head, adv, labels)?.1)
    }
}
