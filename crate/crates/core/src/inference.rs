//! Sandwich covariance for the slope block of a panel quantile fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{dense_row, observation_weights, PenaltyForm, QuantileFit};
use crate::panel::PanelDataset;
use crate::propensity::PropensityFit;

/// Bandwidth rule for the residual-density (Powell kernel) estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Hall–Sheather with confidence level `1 - alpha`.
    HallSheather { alpha: f64 },
    /// Bofinger's rate `n^{-1/5}`.
    Bofinger,
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::HallSheather { alpha: 0.05 }
    }
}

impl BandwidthRule {
    /// Bandwidth on the probability scale.
    pub fn probability_bandwidth(self, n: usize, tau: f64) -> f64 {
        let z = Normal::standard();
        let n = n as f64;
        let x = z.inverse_cdf(tau);
        let f = z.pdf(x);
        match self {
            BandwidthRule::HallSheather { alpha } => {
                let q = z.inverse_cdf(1.0 - alpha / 2.0);
                n.powf(-1.0 / 3.0) * q.powf(2.0 / 3.0) * (1.5 * f * f / (2.0 * x * x + 1.0)).powf(1.0 / 3.0)
            }
            BandwidthRule::Bofinger => {
                n.powf(-0.2) * (4.5 * f.powi(4) / (2.0 * x * x + 1.0).powi(2)).powf(0.2)
            }
        }
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn robust_scale(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)) / 1.34;
    if iqr > 0.0 {
        sd.min(iqr)
    } else {
        sd
    }
}

/// Gaussian kernel density of `values` at zero with Silverman's bandwidth.
fn density_at_zero(values: &[f64]) -> f64 {
    let s = robust_scale(values);
    if !(s > 0.0) {
        return 0.0;
    }
    let h = 0.9 * s * (values.len() as f64).powf(-0.2);
    let z = Normal::standard();
    values.iter().map(|v| z.pdf(v / h)).sum::<f64>() / (values.len() as f64 * h)
}

/// Covariance of `fit.vartheta` (intercept excluded).
///
/// Residual densities come from a Gaussian Powell kernel; for penalized fits the penalty
/// contributes curvature `c * g(0)` to each effect, with `g` the kernel density of the
/// fitted effects, and its subgradient variance to the meat. Effects are profiled out
/// subject by subject.
pub fn sandwich_covariance(
    fit: &QuantileFit,
    dataset: &PanelDataset,
    propensity: Option<&PropensityFit>,
    rule: BandwidthRule,
) -> Result<Vec<Vec<f64>>> {
    let kind = fit.spec.kind;
    let tau = fit.spec.tau;
    let weights = observation_weights(dataset, kind, propensity)?;
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    if fit.residuals.len() != n * t_len {
        return Err(Error::DimensionMismatch("fit does not belong to this panel".into()));
    }
    let intercept = kind.has_intercept();
    let p0 = usize::from(intercept);
    let p = p0 + fit.vartheta.len();

    let used: Vec<f64> = (0..n * t_len)
        .filter(|&c| weights[c] > 0.0)
        .filter_map(|c| fit.residuals[c])
        .collect();
    if used.len() <= p {
        return Err(Error::arg("too few observations for a covariance estimate"));
    }
    let z = Normal::standard();
    let hp = rule.probability_bandwidth(used.len(), tau);
    let (lo, hi) = ((tau - hp).max(1e-6), (tau + hp).min(1.0 - 1e-6));
    let h = (z.inverse_cdf(hi) - z.inverse_cdf(lo)) * robust_scale(&used);
    if !(h > 0.0) {
        return Err(Error::Singular("residual density bandwidth".into()));
    }

    let (pen_curv, pen_var) = if kind.penalized() {
        let lambda = fit.lambda_used;
        let g0 = density_at_zero(&fit.alpha);
        let c = fit.spec.penalty.scale(lambda, t_len);
        let v = match fit.spec.penalty {
            PenaltyForm::Absolute => lambda * lambda,
            PenaltyForm::Check => lambda * lambda * tau * (1.0 - tau),
            PenaltyForm::CheckPerPeriod => (lambda * t_len as f64).powi(2) * tau * (1.0 - tau),
        };
        (c * g0, v)
    } else {
        (0.0, 0.0)
    };

    let mut hess = DMatrix::<f64>::zeros(p, p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    let mut row = Vec::with_capacity(p);
    let mut cells: Vec<(DVector<f64>, f64, f64)> = Vec::with_capacity(t_len);
    let score_var = tau * (1.0 - tau);
    for i in 0..n {
        cells.clear();
        for t in 0..t_len {
            let c = i * t_len + t;
            let (Some(r), w) = (fit.residuals[c], weights[c]) else { continue };
            if w == 0.0 {
                continue;
            }
            dense_row(dataset, i, t, intercept, &mut row);
            let f = z.pdf(r / h) / h;
            cells.push((DVector::from_column_slice(&row), w, f));
        }
        if cells.is_empty() {
            continue;
        }
        for (v, w, f) in &cells {
            hess.ger(w * f, v, v, 1.0);
        }
        if !kind.has_effects() {
            for (v, w, _) in &cells {
                meat.ger(score_var * w * w, v, v, 1.0);
            }
            continue;
        }
        let h_aa: f64 = cells.iter().map(|(_, w, f)| w * f).sum::<f64>() + pen_curv;
        let mut h_av = DVector::<f64>::zeros(p);
        for (v, w, f) in &cells {
            h_av.axpy(w * f, v, 1.0);
        }
        if h_aa <= 0.0 {
            continue;
        }
        hess.ger(-1.0 / h_aa, &h_av, &h_av, 1.0);
        let proj = &h_av / h_aa;
        for (v, w, _) in &cells {
            let e = v - &proj;
            meat.ger(score_var * w * w, &e, &e, 1.0);
        }
        if pen_var > 0.0 {
            meat.ger(pen_var, &proj, &proj, 1.0);
        }
    }

    let inv = hess
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| hess.try_inverse())
        .ok_or_else(|| Error::Singular("sandwich bread matrix".into()))?;
    let cov = &inv * meat * &inv;
    let k = p - p0;
    let mut out = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            out[a][b] = 0.5 * (cov[(a + p0, b + p0)] + cov[(b + p0, a + p0)]);
        }
    }
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Singular("sandwich covariance is not finite".into()));
    }
    Ok(out)
}
