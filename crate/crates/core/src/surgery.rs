//! Conflict metric and gradient combiners.
//!
//! Given a standard gradient `g_c` and an adversarial gradient `g_a`:
//!
//! - `μ = ‖g_c‖·‖g_a‖·(1 − cos(g_c, g_a))` measures their conflict;
//! - the vanilla combiner returns `(1 − λ)·g_c + λ·g_a`;
//! - the conflict-aware combiner keeps `g_c` when the two already agree
//!   (`φ > γ`), and otherwise rotates `g_a` toward `g_c` by adding `c·g_c`
//!   until `cos(g_*, g_c) = γ`, leaving the component of `g_a` orthogonal to
//!   `g_c` untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Norms below this are treated as a vanished gradient.
pub const ZERO_NORM: f64 = 1e-12;
/// Upper clamp on `γ`; at `γ = 1` the projection coefficient diverges.
pub const GAMMA_MAX: f64 = 1.0 - 1e-6;
/// A projected gradient shorter than this fraction of `‖g_c‖` is a collapse.
pub const COLLAPSE_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Projected,
    StandardOnly,
    FallbackDegenerate,
}

/// Norms, cosine and `μ` for one `(g_c, g_a)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub norm_gc: f64,
    pub norm_ga: f64,
    pub phi: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub norm_gc: f64,
    pub norm_ga: f64,
    pub phi: f64,
    pub mu: f64,
    /// Present iff `branch == Projected`.
    pub lambda_star: Option<f64>,
    pub branch: Branch,
}

fn check_pair(g_c: &ParamVector, g_a: &ParamVector) -> Result<()> {
    if g_c.len() != g_a.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient pair",
            expected: g_c.len(),
            actual: g_a.len(),
        });
    }
    Ok(())
}

/// Cosine from the chord between unit vectors, `1 − ‖ĝ_c − ĝ_a‖²/2`, which is
/// exact for identical inputs and accurate near `φ = 1`.
fn cosine_from_norms(g_c: &[f64], g_a: &[f64], nc: f64, na: f64) -> f64 {
    if nc < ZERO_NORM || na < ZERO_NORM {
        return 1.0;
    }
    let chord2: f64 = g_c
        .iter()
        .zip(g_a)
        .map(|(c, a)| {
            let d = c / nc - a / na;
            d * d
        })
        .sum();
    (1.0 - 0.5 * chord2).clamp(-1.0, 1.0)
}

/// `cos(g_c, g_a)` clamped to `[−1, 1]`; `1.0` when either gradient vanished.
pub fn cosine_similarity(g_c: &ParamVector, g_a: &ParamVector) -> Result<f64> {
    check_pair(g_c, g_a)?;
    Ok(cosine_from_norms(
        g_c.as_slice(),
        g_a.as_slice(),
        g_c.norm(),
        g_a.norm(),
    ))
}

pub fn conflict_mu(g_c: &ParamVector, g_a: &ParamVector) -> Result<Conflict> {
    check_pair(g_c, g_a)?;
    let norm_gc = g_c.norm();
    let norm_ga = g_a.norm();
    let phi = cosine_from_norms(g_c.as_slice(), g_a.as_slice(), norm_gc, norm_ga);
    Ok(Conflict {
        norm_gc,
        norm_ga,
        phi,
        mu: (norm_gc * norm_ga * (1.0 - phi)).max(0.0),
    })
}

/// `(1 − λ)·g_c + λ·g_a`.
pub fn combine_vanilla(g_c: &ParamVector, g_a: &ParamVector, lambda: f64) -> Result<ParamVector> {
    check_pair(g_c, g_a)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg("lambda", format!("must be in [0, 1], got {lambda}")));
    }
    Ok(g_c.lincomb(1.0 - lambda, g_a, lambda))
}

/// Projection coefficient
/// `‖g_a‖(γ√(1−φ²) − φ√(1−γ²)) / (‖g_c‖√(1−γ²))`.
pub fn lambda_star(norm_gc: f64, norm_ga: f64, phi: f64, gamma: f64) -> Result<f64> {
    if !(norm_gc > 0.0 && norm_ga > 0.0 && norm_gc.is_finite() && norm_ga.is_finite()) {
        return Err(Error::arg("norms", format!("must be positive, got {norm_gc}, {norm_ga}")));
    }
    if !(-1.0..1.0).contains(&gamma) {
        return Err(Error::arg("gamma", format!("must be in [-1, 1), got {gamma}")));
    }
    if !(phi <= gamma && phi >= -1.0) {
        return Err(Error::arg("phi", format!("must be in [-1, gamma], got {phi} > {gamma}")));
    }
    let sin_phi = (1.0 - phi * phi).max(0.0).sqrt();
    let sin_gamma = (1.0 - gamma * gamma).max(0.0).sqrt();
    Ok(norm_ga * (gamma * sin_phi - phi * sin_gamma) / (norm_gc * sin_gamma))
}

/// Conflict-aware combination of `g_c` and `g_a` with cone threshold `γ`.
pub fn project_conflict_aware(
    g_c: &ParamVector,
    g_a: &ParamVector,
    gamma: f64,
) -> Result<(ParamVector, ConflictReport)> {
    check_pair(g_c, g_a)?;
    if !(-1.0..=1.0).contains(&gamma) {
        return Err(Error::arg("gamma", format!("must be in [-1, 1], got {gamma}")));
    }
    if !g_c.is_finite() || !g_a.is_finite() {
        return Err(Error::NonFinite("gradient pair".into()));
    }
    let gamma = gamma.min(GAMMA_MAX);
    let Conflict {
        norm_gc,
        norm_ga,
        phi,
        mu,
    } = conflict_mu(g_c, g_a)?;
    let report = |lambda_star, branch| ConflictReport {
        norm_gc,
        norm_ga,
        phi,
        mu,
        lambda_star,
        branch,
    };

    if norm_gc < ZERO_NORM || norm_ga < ZERO_NORM {
        return Ok((g_c.clone(), report(None, Branch::FallbackDegenerate)));
    }
    if phi > gamma {
        return Ok((g_c.clone(), report(None, Branch::StandardOnly)));
    }
    let c = lambda_star(norm_gc, norm_ga, phi, gamma)?;
    let g_star = g_a.lincomb(1.0, g_c, c);
    if g_star.norm() < COLLAPSE_RATIO * norm_gc {
        return Ok((g_c.clone(), report(None, Branch::FallbackDegenerate)));
    }
    Ok((g_star, report(Some(c), Branch::Projected)))
}
