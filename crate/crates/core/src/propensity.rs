//! First-stage staying probabilities and inverse-probability weights.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mechanism {
    /// Missing completely at random: intercept-only logit.
    Mcar,
    /// Selection on observables (lagged response and covariates).
    Mar,
    /// Selection on the current response, proxied by the streaming sample where missing.
    HwStream,
    /// True probabilities supplied by the simulation.
    Unfeasible,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
            Mechanism::HwStream => "hw_stream",
            Mechanism::Unfeasible => "unfeasible",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "hw_stream" | "hw" | "ref" => Ok(Mechanism::HwStream),
            "unfeasible" | "unf" => Ok(Mechanism::Unfeasible),
            other => Err(Error::arg(format!("unknown mechanism {other:?}"))),
        }
    }
}

/// How the at-risk cells are split into logit fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One logit over all at-risk cells `t >= 2`. Stable when dropout is rare.
    Pooled,
    /// A separate logit for each period.
    PerPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightConvention {
    /// `s_it / prod_{r<=t} pi_ir`.
    Cumulative,
    /// `s_it / pi_it`.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityOptions {
    pub floor: f64,
    pub layout: Layout,
    pub weighting: WeightConvention,
    /// Add squares of the non-binary features.
    pub squares: bool,
    /// Include subject means of the covariates.
    pub subject_means: bool,
}

impl Default for PropensityOptions {
    fn default() -> Self {
        Self {
            floor: 0.01,
            layout: Layout::Pooled,
            weighting: WeightConvention::Cumulative,
            squares: false,
            subject_means: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitFit {
    pub gamma: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

/// Bound on a coefficient times its feature's standard deviation; beyond it the fit is
/// treated as diverging towards a separating hyperplane.
const SEPARATION_BOUND: f64 = 30.0;

fn separated(gamma: &DVector<f64>, scales: &[f64], loglik: f64) -> bool {
    loglik > -1e-9 || gamma.iter().zip(scales).any(|(g, s)| (g * s).abs() > SEPARATION_BOUND)
}

/// Logistic regression by Newton-Raphson. `features` is row-major with `n_features` columns.
pub fn fit_logit(features: &[f64], n_features: usize, labels: &[bool]) -> Result<LogitFit> {
    let n = labels.len();
    if n_features == 0 || features.len() != n * n_features {
        return Err(Error::DimensionMismatch(format!(
            "{} feature values for {n} labels and {n_features} columns",
            features.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::Propensity(
            "logit needs at least one positive and one negative label".into(),
        ));
    }
    let x = DMatrix::from_row_slice(n, n_features, features);
    let xtx = x.transpose() * &x;
    if xtx.clone().cholesky().is_none() || xtx.rank(1e-10 * xtx.norm().max(1.0)) < n_features {
        return Err(Error::Singular("logit feature matrix is rank deficient".into()));
    }

    let scales: Vec<f64> = (0..n_features)
        .map(|j| {
            let col = x.column(j);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 { sd } else { m.abs().max(1.0) }
        })
        .collect();
    let yv = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let loglik = |eta: &DVector<f64>| -> f64 {
        eta.iter()
            .zip(yv.iter())
            .map(|(e, y)| y * e - softplus(*e))
            .sum()
    };
    let mut gamma = DVector::<f64>::zeros(n_features);
    let mut eta = &x * &gamma;
    let mut ll = loglik(&eta);
    let mut iterations = 0;
    for _ in 0..100 {
        let p = eta.map(sigmoid);
        let grad = x.transpose() * (&yv - &p);
        if grad.amax() < 1e-8 {
            break;
        }
        iterations += 1;
        let wts = p.map(|v| (v * (1.0 - v)).max(1e-300));
        let mut xw = x.clone();
        for (mut row, w) in xw.row_iter_mut().zip(wts.iter()) {
            row *= *w;
        }
        let hess = x.transpose() * xw;
        let step = match hess.cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                return Err(Error::Separation {
                    bound: SEPARATION_BOUND,
                })
            }
        };
        // Step-halving keeps the likelihood monotone.
        let mut t = 1.0;
        loop {
            let cand = &gamma + &step * t;
            let cand_eta = &x * &cand;
            let cand_ll = loglik(&cand_eta);
            if cand_ll >= ll - 1e-12 * ll.abs() || t < 1e-8 {
                gamma = cand;
                eta = cand_eta;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
        if separated(&gamma, &scales, ll) {
            return Err(Error::Separation {
                bound: SEPARATION_BOUND,
            });
        }
    }
    let grad = x.transpose() * (&yv - eta.map(sigmoid));
    if grad.amax() >= 1e-8 * (1.0 + n as f64).sqrt() {
        return Err(Error::Propensity(format!(
            "logit did not converge (gradient {:.2e})",
            grad.amax()
        )));
    }
    Ok(LogitFit {
        gamma: gamma.iter().copied().collect(),
        loglik: ll,
        iterations,
    })
}

#[inline]
pub(crate) fn sigmoid(e: f64) -> f64 {
    if e >= 0.0 {
        1.0 / (1.0 + (-e).exp())
    } else {
        let z = e.exp();
        z / (1.0 + z)
    }
}

#[inline]
fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

/// Fitted first stage. `pi` holds conditional staying probabilities on the at-risk
/// cells (row-major `(i, t)`; `None` after dropout, 1 in the first period).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityFit {
    pub mechanism: Mechanism,
    pub layout: Layout,
    pub weighting: WeightConvention,
    pub feature_names: Vec<String>,
    /// One coefficient vector for the pooled layout, one per period `t >= 2` otherwise.
    pub gamma: Vec<Vec<f64>>,
    pub n_subjects: usize,
    pub n_periods: usize,
    pub pi: Vec<Option<f64>>,
    pub floor: f64,
    pub loglik: f64,
    pub iterations: usize,
}

impl PropensityFit {
    /// Probabilities identically 1 (fully observed data or unweighted estimators).
    pub fn ones(dataset: &PanelDataset) -> Self {
        let (n, t) = (dataset.n_subjects(), dataset.n_periods());
        let pi = (0..n * t)
            .map(|c| {
                let (i, tt) = (c / t, c % t);
                (tt == 0 || dataset.observed(i, tt - 1)).then_some(1.0)
            })
            .collect();
        Self {
            mechanism: Mechanism::Mcar,
            layout: Layout::Pooled,
            weighting: WeightConvention::Cumulative,
            feature_names: Vec::new(),
            gamma: Vec::new(),
            n_subjects: n,
            n_periods: t,
            pi,
            floor: PropensityOptions::default().floor,
            loglik: 0.0,
            iterations: 0,
        }
    }

    /// Wraps externally known conditional probabilities (row-major `(i, t)`).
    pub fn unfeasible(
        dataset: &PanelDataset,
        true_pi: &[f64],
        options: &PropensityOptions,
    ) -> Result<Self> {
        let (n, t) = (dataset.n_subjects(), dataset.n_periods());
        if true_pi.len() != n * t {
            return Err(Error::DimensionMismatch(format!(
                "true probabilities have {} cells, panel has {}",
                true_pi.len(),
                n * t
            )));
        }
        let mut fit = Self::ones(dataset);
        fit.mechanism = Mechanism::Unfeasible;
        fit.weighting = options.weighting;
        fit.floor = options.floor;
        for (c, p) in fit.pi.iter_mut().enumerate() {
            if p.is_some() && c % t > 0 {
                let v = true_pi[c];
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::Propensity(format!("true probability {v} out of (0,1]")));
                }
                *p = Some(v.max(options.floor));
            }
        }
        Ok(fit)
    }

    pub fn pi(&self, i: usize, t: usize) -> Option<f64> {
        self.pi[i * self.n_periods + t]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds the per-cell feature rows for cells `(i, t)`, `t >= 1`, that are at risk.
struct FeatureBuilder<'a> {
    ds: &'a PanelDataset,
    mechanism: Mechanism,
    options: &'a PropensityOptions,
    means: Vec<f64>,
    n_v: usize,
}

impl<'a> FeatureBuilder<'a> {
    fn new(ds: &'a PanelDataset, mechanism: Mechanism, options: &'a PropensityOptions) -> Self {
        let n_v = ds.p_d() + ds.p_x() - 1;
        let t_len = ds.n_periods() as f64;
        let mut means = vec![0.0; ds.n_subjects() * n_v];
        for i in 0..ds.n_subjects() {
            let m = &mut means[i * n_v..(i + 1) * n_v];
            for t in 0..ds.n_periods() {
                for (mj, v) in m.iter_mut().zip(Self::v(ds, i, t)) {
                    *mj += v / t_len;
                }
            }
        }
        Self {
            ds,
            mechanism,
            options,
            means,
            n_v,
        }
    }

    fn v(ds: &PanelDataset, i: usize, t: usize) -> impl Iterator<Item = f64> + '_ {
        ds.treat(i, t).iter().chain(&ds.covars(i, t)[1..]).copied()
    }

    fn names(&self) -> Vec<String> {
        let mut out = vec!["intercept".to_string()];
        match self.mechanism {
            Mechanism::Mcar | Mechanism::Unfeasible => return out,
            Mechanism::Mar => out.push("y_lag".into()),
            Mechanism::HwStream => {
                out.push("w_current".into());
                out.push("y_lag".into());
            }
        }
        for j in 0..self.ds.p_d() {
            out.push(format!("d_{}", j + 1));
        }
        for j in 1..self.ds.p_x() {
            out.push(format!("x_{j}"));
        }
        if self.options.subject_means {
            for j in 0..self.ds.p_d() {
                out.push(format!("mean_d_{}", j + 1));
            }
            for j in 1..self.ds.p_x() {
                out.push(format!("mean_x_{j}"));
            }
        }
        if self.options.squares {
            let base: Vec<String> = out[1..].to_vec();
            out.extend(base.iter().map(|b| format!("{b}^2")));
        }
        out
    }

    fn row(&self, i: usize, t: usize, w_current: Option<f64>, out: &mut Vec<f64>) {
        let start = out.len();
        out.push(1.0);
        if matches!(self.mechanism, Mechanism::Mcar | Mechanism::Unfeasible) {
            return;
        }
        if let Some(w) = w_current {
            out.push(w);
        }
        out.push(self.ds.response(i, t - 1).unwrap_or(0.0));
        out.extend(Self::v(self.ds, i, t));
        if self.options.subject_means {
            out.extend_from_slice(&self.means[i * self.n_v..(i + 1) * self.n_v]);
        }
        if self.options.squares {
            let base: Vec<f64> = out[start + 1..].to_vec();
            out.extend(base.iter().map(|v| v * v));
        }
    }
}

/// Streaming value nearest period `t` (ties go to the later record), within one period.
fn streaming_value(ds: &PanelDataset, i: usize, t: usize) -> Option<f64> {
    let target = ds.period_labels()[t] as f64;
    ds.streaming()
        .iter()
        .filter(|r| r.subject == i && (r.h - target).abs() < 1.0)
        .min_by(|a, b| {
            (a.h - target)
                .abs()
                .total_cmp(&(b.h - target).abs())
                .then(b.h.total_cmp(&a.h))
        })
        .map(|r| r.value)
}

/// Drops feature columns that are linearly dependent on earlier ones (e.g. subject means of
/// time-invariant covariates). Returns the kept column indices.
fn independent_columns(x: &[f64], n_cols: usize) -> Vec<usize> {
    let n = x.len() / n_cols;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..n_cols {
        let mut v: Vec<f64> = (0..n).map(|r| x[r * n_cols + j]).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
        }
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv > 1e-8 * norm0 {
            v.iter_mut().for_each(|a| *a /= nv);
            basis.push(v);
            keep.push(j);
        }
    }
    keep
}

/// Leading features that carry the response: intercept, `w_current` and `y_lag`.
fn core_features(mechanism: Mechanism) -> usize {
    match mechanism {
        Mechanism::Mcar | Mechanism::Unfeasible => 1,
        Mechanism::Mar => 2,
        Mechanism::HwStream => 3,
    }
}

/// Estimates conditional staying probabilities on every at-risk cell.
pub fn build_first_stage(
    dataset: &PanelDataset,
    mechanism: Mechanism,
    options: &PropensityOptions,
) -> Result<PropensityFit> {
    if !(options.floor > 0.0 && options.floor < 1.0) {
        return Err(Error::arg("probability floor must lie in (0, 1)"));
    }
    if mechanism == Mechanism::Unfeasible {
        return Err(Error::Propensity(
            "the unfeasible mechanism needs true probabilities; use PropensityFit::unfeasible"
                .into(),
        ));
    }
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    let fb = FeatureBuilder::new(dataset, mechanism, options);
    let names = fb.names();
    let k = names.len();

    // At-risk cells, grouped by period.
    let mut cells: Vec<(usize, usize)> = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for t in 1..t_len {
        for i in 0..n {
            if !dataset.observed(i, t - 1) {
                continue;
            }
            let w = if mechanism == Mechanism::HwStream {
                match dataset.response(i, t).or_else(|| streaming_value(dataset, i, t)) {
                    Some(v) => Some(v),
                    None => {
                        return Err(Error::Propensity(format!(
                            "no streaming record near period {} for subject {}",
                            dataset.period_labels()[t],
                            dataset.subject_ids()[i]
                        )))
                    }
                }
            } else {
                None
            };
            fb.row(i, t, w, &mut feats);
            cells.push((i, t));
            labels.push(dataset.observed(i, t));
        }
    }

    let mut fit = PropensityFit::ones(dataset);
    fit.mechanism = mechanism;
    fit.layout = options.layout;
    fit.weighting = options.weighting;
    fit.floor = options.floor;
    fit.feature_names = names.clone();
    if cells.is_empty() || labels.iter().all(|&l| l) {
        // Nobody drops out: every staying probability is 1.
        return Ok(fit);
    }

    let groups: Vec<Vec<usize>> = match options.layout {
        Layout::Pooled => vec![(0..cells.len()).collect()],
        Layout::PerPeriod => (1..t_len)
            .map(|t| (0..cells.len()).filter(|&c| cells[c].1 == t).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect(),
    };
    let mut loglik = 0.0;
    let mut iterations = 0;
    let mut gammas = Vec::new();
    for g in groups {
        let lab: Vec<bool> = g.iter().map(|&c| labels[c]).collect();
        if lab.iter().all(|&l| l) {
            gammas.push(Vec::new());
            continue;
        }
        let mut x = Vec::with_capacity(g.len() * k);
        for &c in &g {
            x.extend_from_slice(&feats[c * k..(c + 1) * k]);
        }
        let select = |keep: &[usize]| -> Vec<f64> {
            (0..g.len())
                .flat_map(|r| keep.iter().map(move |&j| (r, j)))
                .map(|(r, j)| x[r * k + j])
                .collect()
        };
        let mut keep = independent_columns(&x, k);
        let mut xs = select(&keep);
        let lf = match fit_logit(&xs, keep.len(), &lab) {
            Err(Error::Separation { .. }) if keep.len() > core_features(mechanism) => {
                // Too few dropouts for the full feature map: keep the response terms only.
                log::warn!(
                    "{mechanism} first stage separates with {} features; refitting on the response terms",
                    keep.len()
                );
                keep.retain(|&j| j < core_features(mechanism));
                xs = select(&keep);
                fit_logit(&xs, keep.len(), &lab)?
            }
            other => other?,
        };
        let kk = keep.len();
        loglik += lf.loglik;
        iterations += lf.iterations;
        let mut full = vec![0.0; k];
        for (pos, &j) in keep.iter().enumerate() {
            full[j] = lf.gamma[pos];
        }
        for (r, &c) in g.iter().enumerate() {
            let eta: f64 = xs[r * kk..(r + 1) * kk]
                .iter()
                .zip(&lf.gamma)
                .map(|(a, b)| a * b)
                .sum();
            let (i, t) = cells[c];
            fit.pi[i * t_len + t] = Some(sigmoid(eta).max(options.floor));
        }
        gammas.push(full);
    }
    fit.gamma = gammas;
    fit.loglik = loglik;
    fit.iterations = iterations;
    Ok(fit)
}

/// `s_it / pi_it` weights, row-major `(i, t)`, with the fit's weighting convention.
pub fn inverse_weights(fit: &PropensityFit, dataset: &PanelDataset) -> Result<Vec<f64>> {
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    if fit.n_subjects != n || fit.n_periods != t_len {
        return Err(Error::DimensionMismatch("propensity fit does not match panel".into()));
    }
    let mut out = vec![0.0; n * t_len];
    for i in 0..n {
        let mut cum = 1.0;
        for t in 0..t_len {
            if !dataset.observed(i, t) {
                break;
            }
            let p = fit.pi(i, t).ok_or_else(|| {
                Error::Propensity(format!(
                    "no probability for observed cell (subject {}, period {})",
                    dataset.subject_ids()[i],
                    dataset.period_labels()[t]
                ))
            })?;
            if p < fit.floor {
                return Err(Error::Propensity(format!(
                    "probability {p} below floor {} at subject {}, period {}",
                    fit.floor,
                    dataset.subject_ids()[i],
                    dataset.period_labels()[t]
                )));
            }
            cum *= p;
            let denom = match fit.weighting {
                WeightConvention::Cumulative => cum.max(fit.floor),
                WeightConvention::Conditional => p,
            };
            out[i * t_len + t] = 1.0 / denom;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn intercept_only(labels: &[bool]) -> LogitFit {
        fit_logit(&vec![1.0; labels.len()], 1, labels).unwrap()
    }

    #[test]
    fn logit_closed_forms() {
        assert_abs_diff_eq!(intercept_only(&[true, false, true, false]).gamma[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(
            intercept_only(&[true, true, true, false]).gamma[0],
            3f64.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn logit_detects_separation() {
        let x = [1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0];
        let err = fit_logit(&x, 2, &[false, false, true, true]).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err}");
    }

    #[test]
    fn logit_rejects_rank_deficiency() {
        let x = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!(matches!(
            fit_logit(&x, 2, &[true, false, true]),
            Err(Error::Singular(_))
        ));
    }

    fn panel(mask: &[&[bool]]) -> PanelDataset {
        let n = mask.len();
        let t = mask[0].len();
        let mut resp = Vec::new();
        let mut cov = Vec::new();
        for (i, row) in mask.iter().enumerate() {
            for (tt, &m) in row.iter().enumerate() {
                resp.push(m.then_some((i + tt) as f64 * 0.1));
                cov.extend([1.0, (i * 7 + tt * 3) as f64 % 5.0]);
            }
        }
        PanelDataset::from_parts(n, t, 0, 2, resp, vec![], cov).unwrap()
    }

    #[test]
    fn fully_observed_gives_unit_weights() {
        let ds = panel(&[&[true, true], &[true, true]]);
        for m in [Mechanism::Mcar, Mechanism::Mar] {
            let fit = build_first_stage(&ds, m, &Default::default()).unwrap();
            assert_eq!(inverse_weights(&fit, &ds).unwrap(), vec![1.0; 4]);
        }
    }

    #[test]
    fn mcar_matches_retention() {
        let rows: Vec<Vec<bool>> = (0..10).map(|i| vec![true, i != 3]).collect();
        let refs: Vec<&[bool]> = rows.iter().map(|r| r.as_slice()).collect();
        let ds = panel(&refs);
        let fit = build_first_stage(&ds, Mechanism::Mcar, &Default::default()).unwrap();
        assert_abs_diff_eq!(fit.pi(0, 1).unwrap(), 0.9, epsilon = 1e-9);
        let w = inverse_weights(&fit, &ds).unwrap();
        assert_eq!(w[3 * 2 + 1], 0.0);
        assert_abs_diff_eq!(w[1], 1.0 / 0.9, epsilon = 1e-9);
    }

    #[test]
    fn weights_use_reciprocal_probability() {
        let ds = panel(&[&[true, true], &[true, false]]);
        let fit = PropensityFit::unfeasible(&ds, &[1.0, 0.5, 1.0, 0.5], &Default::default()).unwrap();
        assert_eq!(inverse_weights(&fit, &ds).unwrap(), vec![1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn streaming_is_required_for_dropouts() {
        let ds = panel(&[&[true, true], &[true, false], &[true, true]]);
        let err = build_first_stage(&ds, Mechanism::HwStream, &Default::default()).unwrap_err();
        assert!(err.to_string().contains("streaming"));
    }

    #[test]
    fn streaming_tie_prefers_later_record() {
        use crate::panel::StreamingRecord;
        let ds = panel(&[&[true, true], &[true, false]])
            .with_streaming(vec![
                StreamingRecord { subject: 1, h: 1.5, value: 1.0 },
                StreamingRecord { subject: 1, h: 2.5, value: 2.0 },
                StreamingRecord { subject: 1, h: 1.2, value: 3.0 },
            ])
            .unwrap();
        assert_eq!(streaming_value(&ds, 1, 1), Some(2.0));
    }
}
