//! Yeo–Johnson power transform, its profile negative log-likelihood, and the
//! closed-form one-step Newton–Raphson estimate of the transform parameter.
//!
//! All math here runs in `f64`. Sums are accumulated left to right over the
//! sample so that results do not depend on how callers schedule work.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for estimated lambda.
pub const LAMBDA_MIN: f64 = -3.0;
/// Upper clamp for estimated lambda.
pub const LAMBDA_MAX: f64 = 5.0;
/// Curvature at or below which the quadratic expansion is treated as flat
/// and the estimator falls back to the identity transform.
pub const CURVATURE_FLOOR: f64 = 1e-8;
/// Transformed variances at or below this value are degenerate.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Tolerances on the mean and variance of a sample handed to the quadratic
/// expansion, which assumes a standardized sample.
pub const NORMALIZED_MEAN_TOL: f64 = 1e-3;
pub const NORMALIZED_VAR_TOL: f64 = 1e-2;

/// `½(log 2π + 1)`, the profile NLL of a unit-variance sample at λ = 1.
pub fn gaussian_nll_constant() -> f64 {
    0.5 * ((2.0 * PI).ln() + 1.0)
}

/// A group of pre-activations sharing one transform parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    values: Vec<f64>,
}

impl Sample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Precondition(format!(
                "sample needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample value {bad}")));
        }
        Ok(Self { values })
    }

    /// Centers and scales `raw` to zero mean and unit (biased) variance.
    pub fn standardized(raw: &[f64]) -> Result<Self> {
        Ok(Self::standardized_with_moments(raw)?.0)
    }

    /// [`Self::standardized`] plus the raw mean and biased variance.
    pub fn standardized_with_moments(raw: &[f64]) -> Result<(Self, f64, f64)> {
        let sample = Self::new(raw.to_vec())?;
        let (mean, var) = mean_var(&sample.values);
        if var <= VARIANCE_FLOOR {
            return Err(Error::DegenerateSample(format!(
                "variance {var:e} is too small to standardize"
            )));
        }
        let inv_std = 1.0 / var.sqrt();
        let values = sample.values.iter().map(|v| (v - mean) * inv_std).collect();
        Ok((Self { values }, mean, var))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean_var(&self.values).0
    }

    /// Biased (1/N) variance.
    pub fn variance(&self) -> f64 {
        mean_var(&self.values).1
    }
}

/// Result of the one-step estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub lambda_hat: f64,
    /// Profile NLL at λ = 1.
    pub nll_at_1: f64,
    /// First derivative of the NLL at λ = 1.
    pub d1: f64,
    /// Second derivative of the NLL at λ = 1.
    pub d2: f64,
    /// Set when the estimate was clamped or the flat-curvature fallback fired.
    pub clamped: bool,
    pub alpha_used: f64,
}

impl LambdaEstimate {
    /// Second-order expansion of the NLL around λ = 1, evaluated at `lambda`.
    pub fn quadratic_at(&self, lambda: f64) -> f64 {
        let dl = lambda - 1.0;
        self.nll_at_1 + dl * self.d1 + 0.5 * dl * dl * self.d2
    }

    /// Derivative of [`Self::quadratic_at`].
    pub fn quadratic_slope_at(&self, lambda: f64) -> f64 {
        self.d1 + (lambda - 1.0) * self.d2
    }
}

pub(crate) fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {v}")))
    }
}

/// ψ(h; λ) without input validation.
///
/// Uses `expm1`/`ln_1p` so the λ → 0 and λ → 2 limits are approached
/// smoothly instead of through cancellation.
#[inline]
pub fn psi(h: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        return h;
    }
    if h >= 0.0 {
        if lambda == 0.0 {
            h.ln_1p()
        } else {
            (lambda * h.ln_1p()).exp_m1() / lambda
        }
    } else {
        let a = 2.0 - lambda;
        if a == 0.0 {
            -(-h).ln_1p()
        } else {
            -(a * (-h).ln_1p()).exp_m1() / a
        }
    }
}

/// ∂ψ/∂h, the per-element Jacobian of the transform.
#[inline]
pub fn psi_dh(h: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        return 1.0;
    }
    if h >= 0.0 {
        ((lambda - 1.0) * h.ln_1p()).exp()
    } else {
        ((1.0 - lambda) * (-h).ln_1p()).exp()
    }
}

/// The Yeo–Johnson transform ψ(h; λ).
pub fn yeo_johnson(h: f64, lambda: f64) -> Result<f64> {
    check_finite("h", h)?;
    check_finite("lambda", lambda)?;
    let x = psi(h, lambda);
    if !x.is_finite() {
        return Err(Error::Domain(format!(
            "psi({h}, {lambda}) overflows to {x}"
        )));
    }
    Ok(x)
}

/// Inverse of [`yeo_johnson`] for a fixed λ.
///
/// ψ preserves sign, so the branch is picked from the sign of `x`.
pub fn yeo_johnson_inverse(x: f64, lambda: f64) -> Result<f64> {
    check_finite("x", x)?;
    check_finite("lambda", lambda)?;
    if lambda == 1.0 {
        return Ok(x);
    }
    let h = if x >= 0.0 {
        if lambda == 0.0 {
            x.exp_m1()
        } else {
            let t = lambda * x;
            if t <= -1.0 {
                return Err(Error::Domain(format!(
                    "x = {x} is outside the image of psi for lambda = {lambda}"
                )));
            }
            (t.ln_1p() / lambda).exp_m1()
        }
    } else {
        let a = 2.0 - lambda;
        if a == 0.0 {
            -(-x).exp_m1()
        } else {
            let t = -a * x;
            if t <= -1.0 {
                return Err(Error::Domain(format!(
                    "x = {x} is outside the image of psi for lambda = {lambda}"
                )));
            }
            -(t.ln_1p() / a).exp_m1()
        }
    };
    if !h.is_finite() {
        return Err(Error::Domain(format!(
            "inverse of {x} overflows for lambda = {lambda}"
        )));
    }
    Ok(h)
}

/// Mean of `sgn(h)·log(1 + |h|)`, the log-Jacobian per unit of (λ − 1).
fn mean_signed_log1p(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    values
        .iter()
        .map(|&h| {
            if h >= 0.0 {
                h.ln_1p()
            } else {
                -(-h).ln_1p()
            }
        })
        .sum::<f64>()
        / n
}

pub(crate) fn nll_slice(values: &[f64], lambda: f64) -> Result<f64> {
    check_finite("lambda", lambda)?;
    let transformed: Vec<f64> = values.iter().map(|&h| psi(h, lambda)).collect();
    let (_, var) = mean_var(&transformed);
    if !(var > VARIANCE_FLOOR) {
        return Err(Error::DegenerateSample(format!(
            "transformed variance {var:e} at lambda = {lambda}"
        )));
    }
    Ok(gaussian_nll_constant() + 0.5 * var.ln() - (lambda - 1.0) * mean_signed_log1p(values))
}

/// Profile negative log-likelihood of the sample under ψ(·; λ).
pub fn nll(sample: &Sample, lambda: f64) -> Result<f64> {
    nll_slice(sample.values(), lambda)
}

/// ∂ψ/∂λ at λ = 1.
pub fn psi_dlambda_at1(h: f64) -> f64 {
    if h >= 0.0 {
        let l = h.ln_1p();
        (1.0 + h) * l - h
    } else {
        // ψ(−h; λ) = −ψ(h; 2 − λ), so this derivative is even in h.
        let l = (-h).ln_1p();
        (1.0 - h) * l + h
    }
}

/// ∂²ψ/∂λ² at λ = 1.
pub fn psi_d2lambda_at1(h: f64) -> f64 {
    if h >= 0.0 {
        let l = h.ln_1p();
        (1.0 + h) * l * l - 2.0 * psi_dlambda_at1(h)
    } else {
        // Odd in h by the same reflection.
        let l = (-h).ln_1p();
        -((1.0 - h) * l * l - 2.0 * psi_dlambda_at1(h))
    }
}

/// Value, slope and curvature of the profile NLL at λ = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllExpansion {
    pub l0: f64,
    pub d1: f64,
    pub d2: f64,
}

pub(crate) fn nll_quadratic_slice(values: &[f64]) -> Result<NllExpansion> {
    if values.len() < 2 {
        return Err(Error::Precondition(format!(
            "sample needs at least 2 values, got {}",
            values.len()
        )));
    }
    let (mean, var) = mean_var(values);
    if !(mean.abs() <= NORMALIZED_MEAN_TOL && (var - 1.0).abs() <= NORMALIZED_VAR_TOL) {
        return Err(Error::Precondition(format!(
            "sample is not normalized (mean {mean:e}, variance {var})"
        )));
    }
    Ok(expansion_at_identity(values, mean, var))
}

/// Exact value, slope and curvature of the profile NLL at λ = 1 using the
/// sample's own mean and variance.
fn expansion_at_identity(values: &[f64], mean: f64, var: f64) -> NllExpansion {
    let n = values.len() as f64;

    let mut dmu = 0.0;
    let mut d2mu = 0.0;
    for &h in values {
        dmu += psi_dlambda_at1(h);
        d2mu += psi_d2lambda_at1(h);
    }
    dmu /= n;
    d2mu /= n;

    let mut dvar = 0.0;
    let mut d2var = 0.0;
    for &h in values {
        let centered = h - mean;
        let dpsi = psi_dlambda_at1(h) - dmu;
        let d2psi = psi_d2lambda_at1(h) - d2mu;
        dvar += centered * dpsi;
        d2var += centered * d2psi + dpsi * dpsi;
    }
    dvar *= 2.0 / n;
    d2var *= 2.0 / n;

    let l0 = gaussian_nll_constant() + 0.5 * var.ln();
    let d1 = dvar / (2.0 * var) - mean_signed_log1p(values);
    let d2 = -(dvar * dvar) / (2.0 * var * var) + d2var / (2.0 * var);
    NllExpansion { l0, d1, d2 }
}

/// Second-order expansion coefficients of the NLL around λ = 1 for a
/// standardized sample.
pub fn nll_quadratic(sample: &Sample) -> Result<NllExpansion> {
    nll_quadratic_slice(sample.values())
}

pub(crate) fn estimate_lambda_slice(values: &[f64], alpha: f64) -> Result<LambdaEstimate> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let expansion = nll_quadratic_slice(values)?;
    Ok(step_from_expansion(expansion, alpha))
}

/// Estimator used inside the normalization layer.
///
/// The layer's `h` has variance `σ̂²/(σ̂² + ε)`, which for low-variance
/// groups falls outside the standardized-sample tolerance. The expansion is
/// exact for any sample, so the tolerance is not enforced here; a group with
/// no spread falls back to the identity.
pub(crate) fn estimate_lambda_for_layer(values: &[f64], alpha: f64) -> Result<LambdaEstimate> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (mean, var) = mean_var(values);
    if !(var > VARIANCE_FLOOR) {
        return Ok(LambdaEstimate {
            lambda_hat: 1.0,
            nll_at_1: f64::NAN,
            d1: 0.0,
            d2: 0.0,
            clamped: true,
            alpha_used: alpha,
        });
    }
    Ok(step_from_expansion(expansion_at_identity(values, mean, var), alpha))
}

fn step_from_expansion(expansion: NllExpansion, alpha: f64) -> LambdaEstimate {
    let NllExpansion { l0, d1, d2 } = expansion;
    let mut est = LambdaEstimate {
        lambda_hat: 1.0,
        nll_at_1: l0,
        d1,
        d2,
        clamped: false,
        alpha_used: alpha,
    };
    if alpha == 0.0 {
        return est;
    }
    if !(d2 > CURVATURE_FLOOR) || !d1.is_finite() {
        est.clamped = true;
        return est;
    }
    let raw = 1.0 - alpha * d1 / d2;
    est.lambda_hat = raw.clamp(LAMBDA_MIN, LAMBDA_MAX);
    est.clamped = est.lambda_hat != raw;
    est
}

/// One Newton–Raphson step from λ = 1, attenuated by `alpha ∈ [0, 1]`.
pub fn estimate_lambda(sample: &Sample, alpha: f64) -> Result<LambdaEstimate> {
    estimate_lambda_slice(sample.values(), alpha)
}

/// Brute-force minimizer of the exact NLL over an evenly spaced grid.
///
/// Returns `(lambda, nll)`. Grid points where the NLL is undefined are skipped.
pub fn grid_search_lambda(sample: &Sample, lo: f64, hi: f64, step: f64) -> Result<(f64, f64)> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Domain(format!("bad grid [{lo}, {hi}] step {step}")));
    }
    let steps = ((hi - lo) / step).round() as usize;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..=steps {
        let lambda = lo + k as f64 * step;
        if let Ok(v) = nll(sample, lambda) {
            if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                best = Some((lambda, v));
            }
        }
    }
    best.ok_or_else(|| Error::DegenerateSample("NLL undefined on the whole grid".into()))
}
