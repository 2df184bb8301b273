//! Generalised Pareto distribution: survival, density, quantile in the
//! threshold-dependent parameterisation, plus the threshold-independent
//! reparameterisation used by the latent model.
//!
//! The shape branch switches to the exponential limit when |xi| < XI_EPS
//! to keep (1 + xi*x/sigma)^(-1/xi) numerically stable near xi = 0.

use crate::error::{Error, Result};

/// Shape values closer to zero than this are handled by the exponential limit.
pub const XI_EPS: f64 = 1e-6;

/// Threshold-dependent GPD parameters (scale sigma_u > 0, shape xi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpdParams {
    pub sigma_u: f64,
    pub xi: f64,
}

impl GpdParams {
    pub fn new(sigma_u: f64, xi: f64) -> Result<Self> {
        if !(sigma_u > 0.0) || !sigma_u.is_finite() || !xi.is_finite() {
            return Err(Error::InvalidParams { sigma_u, xi });
        }
        Ok(GpdParams { sigma_u, xi })
    }

    /// Upper endpoint of the support (infinite for xi >= 0).
    pub fn upper_endpoint(&self) -> f64 {
        if self.xi < -XI_EPS {
            -self.sigma_u / self.xi
        } else {
            f64::INFINITY
        }
    }
}

/// Transformed per-cell parameters (log sigma_tilde, xi), where
/// sigma_tilde = sigma_u - xi*u is invariant to the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaCell {
    pub log_sigma_tilde: f64,
    pub xi: f64,
}

impl ThetaCell {
    /// Recover sigma_u at threshold u; None when the implied scale is not positive.
    pub fn sigma_u(&self, u: f64) -> Option<f64> {
        let s = self.log_sigma_tilde.exp() + self.xi * u;
        if s > 0.0 && s.is_finite() {
            Some(s)
        } else {
            None
        }
    }

    pub fn params_at(&self, u: f64) -> Option<GpdParams> {
        self.sigma_u(u).map(|sigma_u| GpdParams { sigma_u, xi: self.xi })
    }

    pub fn from_threshold_params(p: GpdParams, u: f64) -> Self {
        ThetaCell {
            log_sigma_tilde: (p.sigma_u - p.xi * u).ln(),
            xi: p.xi,
        }
    }
}

/// Pr(X - u > x | X > u) = (1 + xi*x/sigma_u)_+^(-1/xi).
pub fn gpd_survival(x: f64, p: GpdParams) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("x"));
    }
    if x < 0.0 {
        return Err(Error::NonFinite("negative excess"));
    }
    if p.xi.abs() < XI_EPS {
        return Ok((-x / p.sigma_u).exp());
    }
    let z = 1.0 + p.xi * x / p.sigma_u;
    if z <= 0.0 {
        // beyond the upper endpoint (xi < 0)
        return Ok(0.0);
    }
    Ok(z.powf(-1.0 / p.xi))
}

/// Log-density of the excess distribution. Returns -inf for x outside the support.
pub fn gpd_logpdf(x: f64, p: GpdParams) -> f64 {
    if x < 0.0 || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    if p.xi.abs() < XI_EPS {
        return -p.sigma_u.ln() - x / p.sigma_u;
    }
    let z = 1.0 + p.xi * x / p.sigma_u;
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -p.sigma_u.ln() - (1.0 + 1.0 / p.xi) * z.ln()
}

/// Inverse of 1 - gpd_survival: the prob-quantile of the excess distribution.
pub fn gpd_quantile(prob: f64, p: GpdParams) -> Result<f64> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::BadProbability(prob));
    }
    if p.xi.abs() < XI_EPS {
        return Ok(-p.sigma_u * (1.0 - prob).ln());
    }
    Ok(p.sigma_u / p.xi * ((1.0 - prob).powf(-p.xi) - 1.0))
}

/// Sum of GPD log-densities over a slice of excesses; -inf if any excess
/// falls outside the support.
pub fn gpd_loglik(excesses: &[f64], p: GpdParams) -> f64 {
    let mut total = 0.0;
    if p.xi.abs() < XI_EPS {
        let log_sigma = p.sigma_u.ln();
        for &x in excesses {
            total += -log_sigma - x / p.sigma_u;
        }
        return total;
    }
    let log_sigma = p.sigma_u.ln();
    let a = 1.0 + 1.0 / p.xi;
    let c = p.xi / p.sigma_u;
    for &x in excesses {
        let z = 1.0 + c * x;
        if z <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total += -log_sigma - a * z.ln();
    }
    total
}

/// Per-cell log-likelihood in the transformed (log sigma_tilde, xi) space.
/// -inf when the implied sigma_u is not positive or an excess leaves the support.
pub fn cell_loglik(theta: ThetaCell, u: f64, excesses: &[f64]) -> f64 {
    match theta.params_at(u) {
        Some(p) => gpd_loglik(excesses, p),
        None => f64::NEG_INFINITY,
    }
}
