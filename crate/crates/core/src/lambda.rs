//! Tuning-parameter selection for the penalized estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_tau, Error, Result};
use crate::estimators::{dense_row, observation_weights, EstimatorKind};
use crate::exec::map_indexed;
use crate::panel::PanelDataset;
use crate::propensity::PropensityFit;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMethod {
    Robust,
    MleRatio,
    Fixed,
}

impl fmt::Display for LambdaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaMethod::Robust => "robust",
            LambdaMethod::MleRatio => "mle",
            LambdaMethod::Fixed => "fixed",
        })
    }
}

impl FromStr for LambdaMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "robust" => Ok(LambdaMethod::Robust),
            "mle" | "mle_ratio" | "mle-ratio" => Ok(LambdaMethod::MleRatio),
            "fixed" => Ok(LambdaMethod::Fixed),
            other => Err(Error::arg(format!("unknown lambda method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub method: LambdaMethod,
    pub value: f64,
    pub kappa: Option<f64>,
    pub c: Option<f64>,
    pub draws: Option<usize>,
}

impl LambdaChoice {
    pub fn fixed(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::arg(format!("lambda must be positive, got {value}")));
        }
        Ok(Self { method: LambdaMethod::Fixed, value, kappa: None, c: None, draws: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustParams {
    pub kappa: f64,
    pub c: f64,
    pub draws: usize,
}

impl Default for RobustParams {
    fn default() -> Self {
        Self { kappa: 2.0, c: 0.1, draws: 1000 }
    }
}

fn column_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, s) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = s / n as f64;
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (ss / n as f64).sqrt()
}

/// Simulation-based choice: `kappa sqrt(tau(1-tau))` times the lower `(1-c)` order
/// statistic of `max_j |sum_it w_it X_jit/sd_j (tau - 1{u_it <= tau})| / (N sqrt(tau(1-tau)))`
/// over the dense columns and the subject indicators, with `u` iid uniform.
///
/// Weights are `s / pi` from `propensity`, or the observation mask without one.
pub fn robust_lambda(
    dataset: &PanelDataset,
    propensity: Option<&PropensityFit>,
    tau: f64,
    params: RobustParams,
    seed: u64,
    workers: Option<usize>,
) -> Result<LambdaChoice> {
    check_tau(tau)?;
    if !(params.kappa > 0.0) || !(params.c > 0.0 && params.c < 1.0) || params.draws == 0 {
        return Err(Error::arg("robust lambda needs kappa > 0, c in (0, 1) and draws >= 1"));
    }
    let kind = if propensity.is_some() { EstimatorKind::Wpqr } else { EstimatorKind::Pqr };
    let weights = observation_weights(dataset, kind, propensity)?;
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());

    let mut cells = Vec::new();
    let mut dense = Vec::new();
    let mut row = Vec::new();
    for i in 0..n {
        for t in 0..t_len {
            let w = weights[i * t_len + t];
            if dataset.observed(i, t) && w > 0.0 {
                dense_row(dataset, i, t, true, &mut row);
                cells.push((i, w));
                dense.extend_from_slice(&row);
            }
        }
    }
    let n_obs = cells.len();
    if n_obs == 0 {
        return Err(Error::arg("no observed cells"));
    }
    let p = dense.len() / n_obs;
    let inv_sd: Vec<f64> = (0..p)
        .map(|j| {
            let sd = column_sd(dense.iter().skip(j).step_by(p).copied());
            if sd > 1e-12 { 1.0 / sd } else { 1.0 }
        })
        .collect();
    for r in dense.chunks_mut(p) {
        r.iter_mut().zip(&inv_sd).for_each(|(v, s)| *v *= s);
    }
    let mut counts = vec![0usize; n];
    cells.iter().for_each(|&(i, _)| counts[i] += 1);
    let inv_sd_z: Vec<f64> = counts
        .iter()
        .map(|&k| {
            let q = k as f64 / n_obs as f64;
            let sd = (q * (1.0 - q)).sqrt();
            if sd > 1e-12 { 1.0 / sd } else { 1.0 }
        })
        .collect();

    let scale = (tau * (1.0 - tau)).sqrt();
    let lam = |d: usize| -> f64 {
        let mut rng = rng::stream(seed, d as u64);
        let mut s_dense = vec![0.0; p];
        let mut s_z = vec![0.0; n];
        for (k, &(i, w)) in cells.iter().enumerate() {
            let u: f64 = rng.random();
            let g = w * (tau - if u <= tau { 1.0 } else { 0.0 }) / scale;
            s_dense
                .iter_mut()
                .zip(&dense[k * p..(k + 1) * p])
                .for_each(|(s, x)| *s += g * x);
            s_z[i] += g;
        }
        let m_dense = s_dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m_z = s_z
            .iter()
            .zip(&inv_sd_z)
            .fold(0.0f64, |m, (v, s)| m.max((v * s).abs()));
        m_dense.max(m_z) / n as f64
    };
    let mut sims = map_indexed(params.draws, workers, lam);
    sims.sort_by(f64::total_cmp);
    let k = ((1.0 - params.c) * params.draws as f64).ceil() as usize;
    let q = sims[k.saturating_sub(1).min(params.draws - 1)];
    let value = params.kappa * scale * q;
    if !(value > 0.0) {
        return Err(Error::arg("robust lambda is zero; the design has no variation"));
    }
    Ok(LambdaChoice {
        method: LambdaMethod::Robust,
        value,
        kappa: Some(params.kappa),
        c: Some(params.c),
        draws: Some(params.draws),
    })
}

/// Upper bound returned when the effect variance is estimated at (or near) zero.
pub const MLE_LAMBDA_CAP: f64 = 1e3;

/// Gaussian one-way random-effects fit on observed cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma_u: f64,
    pub sigma_alpha: f64,
    pub loglik: f64,
}

struct ReData {
    /// Per subject: observed responses and dense rows.
    groups: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    n_obs: usize,
    p: usize,
}

impl ReData {
    /// Profile log-likelihood at variance ratio `psi = sigma_alpha^2 / sigma_u^2`.
    fn profile(&self, psi: f64) -> Option<(f64, f64)> {
        let p = self.p;
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut yty = 0.0;
        let mut logdet = 0.0;
        let mut xs = DVector::<f64>::zeros(p);
        for (ys, rows) in &self.groups {
            let ti = ys.len() as f64;
            let theta = 1.0 - (1.0 + ti * psi).sqrt().recip();
            logdet += (1.0 + ti * psi).ln();
            let ybar = ys.iter().sum::<f64>() / ti;
            let mut xbar = vec![0.0; p];
            rows.iter().for_each(|r| xbar.iter_mut().zip(r).for_each(|(a, b)| *a += b / ti));
            for (y, r) in ys.iter().zip(rows) {
                let yst = y - theta * ybar;
                for j in 0..p {
                    xs[j] = r[j] - theta * xbar[j];
                }
                xtx.ger(1.0, &xs, &xs, 1.0);
                xty.axpy(yst, &xs, 1.0);
                yty += yst * yst;
            }
        }
        let beta = xtx.cholesky()?.solve(&xty);
        let rss = yty - beta.dot(&xty);
        let n = self.n_obs as f64;
        let s2 = (rss / n).max(1e-300);
        Some((-0.5 * n * s2.ln() - 0.5 * logdet, s2))
    }
}

/// Maximum-likelihood variance components, profiling the regression coefficients and
/// the error variance and searching the log variance ratio.
pub fn random_effects_mle(dataset: &PanelDataset) -> Result<VarianceComponents> {
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    let mut groups = Vec::with_capacity(n);
    let mut row = Vec::new();
    let mut n_obs = 0;
    let mut multi = 0;
    for i in 0..n {
        let mut ys = Vec::new();
        let mut rows = Vec::new();
        for t in 0..t_len {
            if let Some(y) = dataset.response(i, t) {
                dense_row(dataset, i, t, true, &mut row);
                ys.push(y);
                rows.push(row.clone());
            }
        }
        if ys.len() >= 2 {
            multi += 1;
        }
        n_obs += ys.len();
        if !ys.is_empty() {
            groups.push((ys, rows));
        }
    }
    if multi == 0 {
        return Err(Error::arg("no subject is observed in two or more periods"));
    }
    // Drop dense columns that are constant (other than the intercept) to keep X'X regular.
    let p_full = groups[0].1[0].len();
    let keep: Vec<usize> = (0..p_full)
        .filter(|&j| {
            j == 0 || {
                let first = groups[0].1[0][j];
                groups.iter().any(|(_, rs)| rs.iter().any(|r| r[j] != first))
            }
        })
        .collect();
    for (_, rows) in groups.iter_mut() {
        for r in rows.iter_mut() {
            *r = keep.iter().map(|&j| r[j]).collect();
        }
    }
    let data = ReData { groups, n_obs, p: keep.len() };
    if n_obs <= data.p + 1 {
        return Err(Error::arg("too few observations for the random-effects fit"));
    }

    let f = |lp: f64| data.profile(lp.exp()).map(|(l, _)| l).unwrap_or(f64::NEG_INFINITY);
    // Coarse grid, then golden-section refinement around the best grid point.
    let (lo, hi, steps) = (-14.0, 8.0, 45);
    let grid: Vec<f64> = (0..=steps).map(|k| lo + (hi - lo) * k as f64 / steps as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let best = (0..grid.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    if !vals[best].is_finite() {
        return Err(Error::Singular("random-effects design matrix".into()));
    }
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(steps)];
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if (b - a).abs() < 1e-8 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = f(d);
        }
    }
    let lp = 0.5 * (a + b);
    let (loglik, s2) = data
        .profile(lp.exp())
        .ok_or_else(|| Error::Singular("random-effects design matrix".into()))?;
    Ok(VarianceComponents {
        sigma_u: s2.sqrt(),
        sigma_alpha: (lp.exp() * s2).sqrt(),
        loglik,
    })
}

/// `sigma_u / sigma_alpha` from a Gaussian random-effects fit on the observed cells,
/// capped at [`MLE_LAMBDA_CAP`].
pub fn mle_lambda(dataset: &PanelDataset) -> Result<LambdaChoice> {
    let vc = random_effects_mle(dataset)?;
    let mut value = vc.sigma_u / vc.sigma_alpha;
    if !(value.is_finite() && value <= MLE_LAMBDA_CAP) {
        log::warn!(
            "effect variance estimated near zero (sigma_alpha = {:.3e}); capping lambda at {MLE_LAMBDA_CAP}",
            vc.sigma_alpha
        );
        value = MLE_LAMBDA_CAP;
    }
    Ok(LambdaChoice { method: LambdaMethod::MleRatio, value, kappa: None, c: None, draws: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn re_panel(n: usize, t: usize, su: f64, sa: f64, seed: u64) -> PanelDataset {
        let mut rng = rng::stream(seed, 0);
        let nu = Normal::new(0.0, su).unwrap();
        let na = Normal::new(0.0, sa).unwrap();
        let mut resp = Vec::new();
        let mut covars = Vec::new();
        for _ in 0..n {
            let a = na.sample(&mut rng);
            for _ in 0..t {
                let x: f64 = rng.random();
                resp.push(Some(1.0 + 2.0 * x + a + nu.sample(&mut rng)));
                covars.extend_from_slice(&[1.0, x]);
            }
        }
        PanelDataset::from_parts(n, t, 0, 2, resp, vec![], covars).unwrap()
    }

    #[test]
    fn mle_recovers_variance_ratio() {
        let ds = re_panel(500, 25, 1.0, 1.0, 3);
        let l = mle_lambda(&ds).unwrap().value;
        assert!((l - 1.0).abs() < 0.1, "{l}");
        let ds = re_panel(500, 25, 2.0, 1.0, 4);
        let l = mle_lambda(&ds).unwrap().value;
        assert!((l - 2.0).abs() < 0.2, "{l}");
    }

    #[test]
    fn mle_caps_when_effects_vanish() {
        let ds = re_panel(200, 5, 1.0, 0.0, 5);
        let l = mle_lambda(&ds).unwrap().value;
        assert!(l > 10.0, "{l}");
    }

    #[test]
    fn robust_at_median_is_the_order_statistic() {
        let ds = re_panel(40, 5, 1.0, 1.0, 6);
        let a = robust_lambda(&ds, None, 0.5, RobustParams { draws: 200, ..Default::default() }, 9, Some(1))
            .unwrap();
        let b = robust_lambda(
            &ds,
            None,
            0.5,
            RobustParams { kappa: 4.0, draws: 200, ..Default::default() },
            9,
            None,
        )
        .unwrap();
        assert!(a.value > 0.0);
        assert!((b.value - 2.0 * a.value).abs() < 1e-12);
    }
}
