//! Check-loss primitives.

use crate::error::{check_tau, Result};

/// The quantile check function `u * (tau - 1{u < 0})`.
pub fn check_loss(u: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(rho(u, tau))
}

/// Quantile influence function `tau - 1{u < 0}`. Returns `tau` at `u == 0`.
pub fn influence(u: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(psi(u, tau))
}

#[inline]
pub(crate) fn rho(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

#[inline]
pub(crate) fn psi(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}
