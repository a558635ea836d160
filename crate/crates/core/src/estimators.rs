//! The six panel quantile estimators and the multi-quantile variant.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_tau, Error, Result};
use crate::panel::PanelDataset;
use crate::propensity::{inverse_weights, PropensityFit};
use crate::qr::{solve, SolverOptions, WqrProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EstimatorKind {
    /// Pooled quantile regression.
    Qr,
    /// Pooled QR with inverse-probability weights.
    Wqr,
    /// Fixed effects, no penalty and no common intercept.
    Fe,
    Wfe,
    /// Penalized fixed effects with a common intercept.
    Pqr,
    Wpqr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Qr,
        EstimatorKind::Wqr,
        EstimatorKind::Fe,
        EstimatorKind::Wfe,
        EstimatorKind::Pqr,
        EstimatorKind::Wpqr,
    ];

    pub fn weighted(self) -> bool {
        matches!(self, EstimatorKind::Wqr | EstimatorKind::Wfe | EstimatorKind::Wpqr)
    }

    pub fn has_effects(self) -> bool {
        !matches!(self, EstimatorKind::Qr | EstimatorKind::Wqr)
    }

    pub fn penalized(self) -> bool {
        matches!(self, EstimatorKind::Pqr | EstimatorKind::Wpqr)
    }

    pub fn has_intercept(self) -> bool {
        !matches!(self, EstimatorKind::Fe | EstimatorKind::Wfe)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Qr => "QR",
            EstimatorKind::Wqr => "WQR",
            EstimatorKind::Fe => "FE",
            EstimatorKind::Wfe => "WFE",
            EstimatorKind::Pqr => "PQR",
            EstimatorKind::Wpqr => "WPQR",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "QR" => Ok(EstimatorKind::Qr),
            "WQR" => Ok(EstimatorKind::Wqr),
            "FE" | "FEQR" => Ok(EstimatorKind::Fe),
            "WFE" => Ok(EstimatorKind::Wfe),
            "PQR" => Ok(EstimatorKind::Pqr),
            "WPQR" => Ok(EstimatorKind::Wpqr),
            other => Err(Error::arg(format!("unknown estimator {other:?}"))),
        }
    }
}

/// How `lambda` enters the objective for each subject effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `lambda * |alpha_i|`: a median row of weight `2 lambda`.
    Absolute,
    /// `lambda * rho_tau(alpha_i)`.
    Check,
    /// `lambda * T * rho_tau(alpha_i)`: the penalty repeated in every period.
    CheckPerPeriod,
}

impl PenaltyForm {
    /// Curvature multiplier of the penalty at zero, used by the sandwich.
    pub(crate) fn scale(self, lambda: f64, n_periods: usize) -> f64 {
        match self {
            PenaltyForm::Absolute => 2.0 * lambda,
            PenaltyForm::Check => lambda,
            PenaltyForm::CheckPerPeriod => lambda * n_periods as f64,
        }
    }
}

impl FromStr for PenaltyForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "absolute" | "abs" => Ok(PenaltyForm::Absolute),
            "check" => Ok(PenaltyForm::Check),
            "check_per_period" => Ok(PenaltyForm::CheckPerPeriod),
            other => Err(Error::arg(format!("unknown penalty form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub tau: f64,
    pub lambda: Option<f64>,
    pub penalty: PenaltyForm,
    pub solver: SolverOptions,
}

impl EstimatorSpec {
    /// Spec with benchmark defaults (`lambda = 1` for penalized kinds).
    pub fn new(kind: EstimatorKind, tau: f64) -> Self {
        Self {
            kind,
            tau,
            lambda: kind.penalized().then_some(1.0),
            penalty: PenaltyForm::Absolute,
            solver: SolverOptions::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_penalty(mut self, penalty: PenaltyForm) -> Self {
        self.penalty = penalty;
        self
    }

    fn check(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.kind.penalized() {
            match self.lambda {
                Some(l) if l > 0.0 && l.is_finite() => {}
                Some(l) => return Err(Error::arg(format!("lambda must be positive, got {l}"))),
                None => return Err(Error::arg(format!("{} needs a lambda", self.kind))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub objective: f64,
    pub dual_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileFit {
    pub spec: EstimatorSpec,
    pub lambda_used: f64,
    pub intercept: Option<f64>,
    /// Names of the `vartheta` entries: treatment columns then non-constant covariates.
    pub slope_names: Vec<String>,
    pub vartheta: Vec<f64>,
    /// Subject effects (empty for pooled kinds).
    pub alpha: Vec<f64>,
    /// `y - fitted` on observed cells, row-major `(i, t)`.
    pub residuals: Vec<Option<f64>>,
    /// Covariance of `vartheta`, when computed.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub solver: SolverDiagnostics,
}

impl QuantileFit {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.len()).map(|j| c[j][j].max(0.0).sqrt()).collect())
    }

    /// Coefficient on `x_1`, the slope every simulation design targets.
    pub fn slope_of_interest(&self, p_d: usize) -> f64 {
        self.vartheta[p_d]
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            #[serde(flatten)]
            fit: &'a QuantileFit,
            std_errors: Option<Vec<f64>>,
        }
        Ok(serde_json::to_string_pretty(&Export {
            fit: self,
            std_errors: self.std_errors(),
        })?)
    }

    /// `term,estimate,std_error` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["term", "estimate", "std_error"])?;
        if let Some(b0) = self.intercept {
            w.write_record(["intercept", &b0.to_string(), ""])?;
        }
        let se = self.std_errors();
        for (j, name) in self.slope_names.iter().enumerate() {
            let s = se.as_ref().map(|s| s[j].to_string()).unwrap_or_default();
            w.write_record([name.as_str(), &self.vartheta[j].to_string(), &s])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn slope_names(dataset: &PanelDataset) -> Vec<String> {
    (1..=dataset.p_d())
        .map(|j| format!("d_{j}"))
        .chain((1..dataset.p_x()).map(|j| format!("x_{j}")))
        .collect()
}

/// Dense design row: optional intercept, then `d_it`, then `x_it` without its constant.
pub(crate) fn dense_row(ds: &PanelDataset, i: usize, t: usize, intercept: bool, out: &mut Vec<f64>) {
    out.clear();
    if intercept {
        out.push(1.0);
    }
    out.extend_from_slice(ds.treat(i, t));
    out.extend_from_slice(&ds.covars(i, t)[1..]);
}

/// Observation weights for a spec: `s / pi` for weighted kinds, the mask otherwise.
pub fn observation_weights(
    dataset: &PanelDataset,
    kind: EstimatorKind,
    propensity: Option<&PropensityFit>,
) -> Result<Vec<f64>> {
    if kind.weighted() {
        let fit = propensity
            .ok_or_else(|| Error::arg(format!("{kind} needs a propensity fit")))?;
        inverse_weights(fit, dataset)
    } else {
        let (n, t) = (dataset.n_subjects(), dataset.n_periods());
        Ok((0..n * t).map(|c| dataset.mask(c / t, c % t)).collect())
    }
}

/// Builds the check-loss problem for `spec` given per-cell weights (row-major `(i, t)`).
pub fn assemble(dataset: &PanelDataset, spec: &EstimatorSpec, weights: &[f64]) -> Result<WqrProblem> {
    spec.check()?;
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    if weights.len() != n * t_len {
        return Err(Error::DimensionMismatch("weights do not match the panel".into()));
    }
    let kind = spec.kind;
    let n_dense = usize::from(kind.has_intercept()) + dataset.p_d() + dataset.p_x() - 1;
    let n_groups = if kind.has_effects() { n } else { 0 };
    let mut prob = WqrProblem::new(n_dense, n_groups, spec.tau)?
        .with_capacity(dataset.n_observed() + n_groups);
    let mut row = Vec::with_capacity(n_dense);
    for i in 0..n {
        for t in 0..t_len {
            let Some(y) = dataset.response(i, t) else { continue };
            let w = weights[i * t_len + t];
            if w == 0.0 {
                continue;
            }
            dense_row(dataset, i, t, kind.has_intercept(), &mut row);
            prob.push_row(&row, kind.has_effects().then_some(i), y, w)?;
        }
    }
    if kind.penalized() {
        push_penalty_rows(&mut prob, n, t_len, spec.tau, spec.lambda.unwrap_or(1.0), spec.penalty)?;
    }
    Ok(prob)
}

fn push_penalty_rows(
    prob: &mut WqrProblem,
    n: usize,
    t_len: usize,
    tau: f64,
    lambda: f64,
    form: PenaltyForm,
) -> Result<()> {
    let zeros = vec![0.0; prob.n_dense()];
    for i in 0..n {
        // Residual of a penalty row is `0 - alpha_i`, and rho_tau(-a) = rho_{1-tau}(a).
        match form {
            PenaltyForm::Absolute => prob.push_row_at(&zeros, Some(i), 0.0, 2.0 * lambda, 0.5)?,
            PenaltyForm::Check => prob.push_row_at(&zeros, Some(i), 0.0, lambda, 1.0 - tau)?,
            PenaltyForm::CheckPerPeriod => {
                prob.push_row_at(&zeros, Some(i), 0.0, lambda * t_len as f64, 1.0 - tau)?
            }
        }
    }
    Ok(())
}

/// The weighted penalized problem with the default penalty form.
pub fn assemble_wpqr(
    dataset: &PanelDataset,
    pi_hat: &PropensityFit,
    tau: f64,
    lambda: f64,
) -> Result<WqrProblem> {
    let spec = EstimatorSpec::new(EstimatorKind::Wpqr, tau).with_lambda(lambda);
    let w = inverse_weights(pi_hat, dataset)?;
    assemble(dataset, &spec, &w)
}

/// Fits one estimator. Weighted kinds require `propensity`.
pub fn estimate(
    dataset: &PanelDataset,
    spec: &EstimatorSpec,
    propensity: Option<&PropensityFit>,
) -> Result<QuantileFit> {
    let weights = observation_weights(dataset, spec.kind, propensity)?;
    estimate_with_weights(dataset, spec, &weights)
}

pub fn estimate_with_weights(
    dataset: &PanelDataset,
    spec: &EstimatorSpec,
    weights: &[f64],
) -> Result<QuantileFit> {
    let prob = assemble(dataset, spec, weights)?;
    let sol = solve(&prob, &spec.solver)?;
    let kind = spec.kind;
    let p0 = usize::from(kind.has_intercept());
    let n_dense = prob.n_dense();
    let coef = &sol.coefficients;
    let alpha: Vec<f64> = coef[n_dense..].to_vec();
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    let mut residuals = vec![None; n * t_len];
    let mut row = Vec::with_capacity(n_dense);
    for i in 0..n {
        for t in 0..t_len {
            if let Some(y) = dataset.response(i, t) {
                dense_row(dataset, i, t, kind.has_intercept(), &mut row);
                let mut fit: f64 = row.iter().zip(coef).map(|(a, b)| a * b).sum();
                if kind.has_effects() {
                    fit += alpha[i];
                }
                residuals[i * t_len + t] = Some(y - fit);
            }
        }
    }
    Ok(QuantileFit {
        spec: *spec,
        lambda_used: if kind.penalized() { spec.lambda.unwrap_or(1.0) } else { 0.0 },
        intercept: kind.has_intercept().then(|| coef[0]),
        slope_names: slope_names(dataset),
        vartheta: coef[p0..n_dense].to_vec(),
        alpha,
        residuals,
        covariance: None,
        solver: SolverDiagnostics {
            iterations: sol.iterations,
            objective: sol.objective,
            dual_gap: sol.dual_gap,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiQuantileFit {
    pub taus: Vec<f64>,
    pub omegas: Vec<f64>,
    pub lambda_used: f64,
    pub slope_names: Vec<String>,
    pub intercepts: Vec<f64>,
    /// One slope vector per quantile.
    pub vartheta: Vec<Vec<f64>>,
    /// Effects shared across quantiles.
    pub alpha: Vec<f64>,
    pub solver: SolverDiagnostics,
}

/// Jointly fits several quantiles with quantile-specific slopes and shared subject effects
/// under the absolute-value penalty. `omegas` defaults to equal weights.
pub fn estimate_multi_tau(
    dataset: &PanelDataset,
    taus: &[f64],
    omegas: Option<&[f64]>,
    lambda: f64,
    weights: &[f64],
    solver: &SolverOptions,
) -> Result<MultiQuantileFit> {
    let j_len = taus.len();
    if j_len == 0 {
        return Err(Error::arg("empty quantile grid"));
    }
    for &t in taus {
        check_tau(t)?;
    }
    let omegas: Vec<f64> = match omegas {
        Some(o) => o.to_vec(),
        None => vec![1.0 / j_len as f64; j_len],
    };
    if omegas.len() != j_len
        || omegas.iter().any(|&o| !(o >= 0.0))
        || (omegas.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::arg("quantile weights must be nonnegative and sum to one"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    let (n, t_len) = (dataset.n_subjects(), dataset.n_periods());
    if weights.len() != n * t_len {
        return Err(Error::DimensionMismatch("weights do not match the panel".into()));
    }
    let block = 1 + dataset.p_d() + dataset.p_x() - 1;
    let n_dense = block * j_len;
    let mut prob = WqrProblem::new(n_dense, n, taus[0])?;
    let mut row = Vec::with_capacity(block);
    let mut wide = vec![0.0; n_dense];
    for (j, (&tau, &om)) in taus.iter().zip(&omegas).enumerate() {
        if om == 0.0 {
            continue;
        }
        for i in 0..n {
            for t in 0..t_len {
                let Some(y) = dataset.response(i, t) else { continue };
                let w = weights[i * t_len + t] * om;
                if w == 0.0 {
                    continue;
                }
                dense_row(dataset, i, t, true, &mut row);
                wide.iter_mut().for_each(|v| *v = 0.0);
                wide[j * block..(j + 1) * block].copy_from_slice(&row);
                prob.push_row_at(&wide, Some(i), y, w, tau)?;
            }
        }
    }
    push_penalty_rows(&mut prob, n, t_len, 0.5, lambda, PenaltyForm::Absolute)?;
    let sol = solve(&prob, solver)?;
    let c = &sol.coefficients;
    Ok(MultiQuantileFit {
        taus: taus.to_vec(),
        omegas,
        lambda_used: lambda,
        slope_names: slope_names(dataset),
        intercepts: (0..j_len).map(|j| c[j * block]).collect(),
        vartheta: (0..j_len)
            .map(|j| c[j * block + 1..(j + 1) * block].to_vec())
            .collect(),
        alpha: c[n_dense..].to_vec(),
        solver: SolverDiagnostics {
            iterations: sol.iterations,
            objective: sol.objective,
            dual_gap: sol.dual_gap,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PanelDataset {
        let resp = vec![Some(1.0), Some(2.0), Some(0.5), Some(1.5)];
        let cov = vec![1.0, 0.1, 1.0, 0.7, 1.0, 0.3, 1.0, 0.9];
        PanelDataset::from_parts(2, 2, 0, 2, resp, vec![], cov).unwrap()
    }

    #[test]
    fn wpqr_row_counts() {
        let ds = tiny();
        let p = assemble_wpqr(&ds, &PropensityFit::ones(&ds), 0.5, 1.0).unwrap();
        let w: Vec<f64> = p.rows().map(|r| r.weight).collect();
        assert_eq!(w, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(p.n_dense(), 2);
        assert_eq!(p.n_groups(), 2);
    }

    #[test]
    fn missing_cell_row_is_omitted() {
        let mut ds = tiny();
        ds.set_response(1, 1, None);
        let p = assemble_wpqr(&ds, &PropensityFit::ones(&ds), 0.5, 1.0).unwrap();
        assert_eq!(p.n_rows(), 3 + 2);
    }

    #[test]
    fn lambda_must_be_positive() {
        let ds = tiny();
        assert!(assemble_wpqr(&ds, &PropensityFit::ones(&ds), 0.5, 0.0).is_err());
        let spec = EstimatorSpec {
            lambda: None,
            ..EstimatorSpec::new(EstimatorKind::Pqr, 0.5)
        };
        assert!(estimate(&ds, &spec, None).is_err());
    }

    #[test]
    fn fe_has_no_intercept() {
        let ds = tiny();
        let w = observation_weights(&ds, EstimatorKind::Fe, None).unwrap();
        let p = assemble(&ds, &EstimatorSpec::new(EstimatorKind::Fe, 0.5), &w).unwrap();
        assert_eq!((p.n_dense(), p.n_groups(), p.n_rows()), (1, 2, 4));
        let p = assemble(&ds, &EstimatorSpec::new(EstimatorKind::Qr, 0.5), &w).unwrap();
        assert_eq!((p.n_dense(), p.n_groups()), (2, 0));
    }

    #[test]
    fn weighted_kind_needs_propensity() {
        let ds = tiny();
        assert!(estimate(&ds, &EstimatorSpec::new(EstimatorKind::Wqr, 0.5), None).is_err());
    }

    #[test]
    fn check_penalty_row_uses_mirrored_quantile() {
        let ds = tiny();
        let spec = EstimatorSpec::new(EstimatorKind::Pqr, 0.8).with_penalty(PenaltyForm::Check);
        let w = observation_weights(&ds, spec.kind, None).unwrap();
        let p = assemble(&ds, &spec, &w).unwrap();
        let pen = p.row(p.n_rows() - 1);
        assert!((pen.tau - 0.2).abs() < 1e-15);
        // rho_{0.2}(0 - a) == rho_{0.8}(a)
        let a = 0.37;
        assert!((crate::qr::check_loss(-a, pen.tau).unwrap() - crate::qr::check_loss(a, 0.8).unwrap()).abs() < 1e-15);
    }
}
