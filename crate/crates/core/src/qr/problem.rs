use serde::{Deserialize, Serialize};

use super::check::{psi, rho};
use crate::error::{check_tau, Error, Result};

/// A weighted check-loss minimization problem with an arrow-shaped design.
///
/// Every row has a dense block over the first `n_dense` parameters and, optionally,
/// a single unit entry in one of `n_groups` group columns (the individual-effect
/// incidence vector). Parameters are ordered `[dense..., groups...]`.
///
/// Each row carries its own quantile level so that stacked multi-quantile problems
/// and absolute-value penalty rows fit in the same structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WqrProblem {
    n_dense: usize,
    n_groups: usize,
    tau: f64,
    dense: Vec<f64>,
    group: Vec<Option<usize>>,
    response: Vec<f64>,
    weight: Vec<f64>,
    row_tau: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub dense: &'a [f64],
    pub group: Option<usize>,
    pub response: f64,
    pub weight: f64,
    pub tau: f64,
}

impl<'a> RowView<'a> {
    #[inline]
    pub fn fitted(&self, coef: &[f64], n_dense: usize) -> f64 {
        let mut f: f64 = self.dense.iter().zip(coef).map(|(a, b)| a * b).sum();
        if let Some(g) = self.group {
            f += coef[n_dense + g];
        }
        f
    }
}

impl WqrProblem {
    pub fn new(n_dense: usize, n_groups: usize, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if n_dense + n_groups == 0 {
            return Err(Error::arg("problem needs at least one parameter"));
        }
        Ok(Self {
            n_dense,
            n_groups,
            tau,
            dense: Vec::new(),
            group: Vec::new(),
            response: Vec::new(),
            weight: Vec::new(),
            row_tau: Vec::new(),
        })
    }

    pub fn with_capacity(mut self, rows: usize) -> Self {
        self.dense.reserve(rows * self.n_dense);
        self.group.reserve(rows);
        self.response.reserve(rows);
        self.weight.reserve(rows);
        self.row_tau.reserve(rows);
        self
    }

    /// Appends a row at the problem's default quantile.
    pub fn push_row(
        &mut self,
        dense: &[f64],
        group: Option<usize>,
        response: f64,
        weight: f64,
    ) -> Result<()> {
        self.push_row_at(dense, group, response, weight, self.tau)
    }

    pub fn push_row_at(
        &mut self,
        dense: &[f64],
        group: Option<usize>,
        response: f64,
        weight: f64,
        tau: f64,
    ) -> Result<()> {
        check_tau(tau)?;
        if dense.len() != self.n_dense {
            return Err(Error::DimensionMismatch(format!(
                "row has {} dense entries, problem expects {}",
                dense.len(),
                self.n_dense
            )));
        }
        if let Some(g) = group {
            if g >= self.n_groups {
                return Err(Error::DimensionMismatch(format!(
                    "group index {g} out of range for {} groups",
                    self.n_groups
                )));
            }
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::arg(format!("row weight {weight} must be finite and >= 0")));
        }
        if !response.is_finite() || dense.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("row contains non-finite values"));
        }
        self.dense.extend_from_slice(dense);
        self.group.push(group);
        self.response.push(response);
        self.weight.push(weight);
        self.row_tau.push(tau);
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_dense(&self) -> usize {
        self.n_dense
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_params(&self) -> usize {
        self.n_dense + self.n_groups
    }

    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> RowView<'_> {
        let p = self.n_dense;
        RowView {
            dense: &self.dense[i * p..(i + 1) * p],
            group: self.group[i],
            response: self.response[i],
            weight: self.weight[i],
            tau: self.row_tau[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = RowView<'_>> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    /// Checks the structural invariants: at least one positively weighted row.
    pub fn validate(&self) -> Result<()> {
        if !self.weight.iter().any(|&w| w > 0.0) {
            return Err(Error::arg("problem has no row with positive weight"));
        }
        Ok(())
    }

    pub fn residuals(&self, coef: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|r| r.response - r.fitted(coef, self.n_dense))
            .collect()
    }

    /// Weighted check-loss objective `sum_r w_r * rho_{tau_r}(y_r - x_r' coef)`.
    pub fn objective(&self, coef: &[f64]) -> f64 {
        self.rows()
            .map(|r| r.weight * rho(r.response - r.fitted(coef, self.n_dense), r.tau))
            .sum()
    }

    /// Estimating-equation diagnostic `-(1/scale) * sum_r w_r x_r psi(residual_r)`.
    ///
    /// Pseudo-rows (penalty rows) are included with the same sign as data rows, which is
    /// the subgradient of the objective. The `scale` is typically `N*T`.
    pub fn estimating_equation(&self, coef: &[f64], scale: f64) -> Result<Vec<f64>> {
        if coef.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} parameters",
                coef.len(),
                self.n_params()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::arg("normalization must be positive"));
        }
        let mut m = vec![0.0; self.n_params()];
        for r in self.rows() {
            let g = r.weight * psi(r.response - r.fitted(coef, self.n_dense), r.tau);
            for (mj, xj) in m.iter_mut().zip(r.dense) {
                *mj += g * xj;
            }
            if let Some(k) = r.group {
                m[self.n_dense + k] += g;
            }
        }
        m.iter_mut().for_each(|v| *v *= -1.0 / scale);
        Ok(m)
    }

    /// Largest violation of the subgradient optimality condition.
    ///
    /// For each column `j` the condition is
    /// `|sum_r w_r x_rj psi(e_r)| <= sum_{e_r = 0} w_r |x_rj|`, where residuals with
    /// `|e_r| <= zero_tol` count as zero. Returns the worst excess (0 when optimal).
    pub fn subgradient_violation(&self, coef: &[f64], zero_tol: f64) -> f64 {
        let k = self.n_params();
        let mut lhs = vec![0.0; k];
        let mut slack = vec![0.0; k];
        for r in self.rows() {
            let e = r.response - r.fitted(coef, self.n_dense);
            let zero = e.abs() <= zero_tol;
            let g = r.weight * if zero { r.tau } else { psi(e, r.tau) };
            for (j, xj) in r.dense.iter().enumerate() {
                lhs[j] += g * xj;
                if zero {
                    slack[j] += r.weight * xj.abs();
                }
            }
            if let Some(gi) = r.group {
                lhs[self.n_dense + gi] += g;
                if zero {
                    slack[self.n_dense + gi] += r.weight;
                }
            }
        }
        lhs.iter()
            .zip(&slack)
            .map(|(l, s)| (l.abs() - s).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_rows() {
        let mut p = WqrProblem::new(2, 1, 0.5).unwrap();
        assert!(p.push_row(&[1.0], None, 0.0, 1.0).is_err());
        assert!(p.push_row(&[1.0, 2.0], Some(1), 0.0, 1.0).is_err());
        assert!(p.push_row(&[1.0, 2.0], None, 0.0, -1.0).is_err());
        assert!(p.push_row_at(&[1.0, 2.0], None, 0.0, 1.0, 1.0).is_err());
        assert!(p.validate().is_err());
        p.push_row(&[1.0, 2.0], Some(0), 1.0, 0.0).unwrap();
        assert!(p.validate().is_err());
        p.push_row(&[1.0, 2.0], Some(0), 1.0, 2.0).unwrap();
        assert!(p.validate().is_ok());
        assert!(WqrProblem::new(1, 0, 1.2).is_err());
    }

    #[test]
    fn objective_matches_manual_sum() {
        let mut p = WqrProblem::new(1, 0, 0.25).unwrap();
        p.push_row(&[1.0], None, 1.0, 2.0).unwrap();
        p.push_row(&[1.0], None, -1.0, 1.0).unwrap();
        // at coef 0: 2 * 0.25 * 1 + 1 * 0.75 * 1
        assert!((p.objective(&[0.0]) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn estimating_equation_at_zero_coefficients() {
        // Single intercept column, all responses positive: psi = tau everywhere.
        let mut p = WqrProblem::new(1, 0, 0.5).unwrap();
        for y in [1.0, 2.0, 9.0] {
            p.push_row(&[1.0], None, y, 1.0).unwrap();
        }
        let nt = 3.0;
        let m = p.estimating_equation(&[0.0], nt).unwrap();
        assert!((m[0] - (-0.5 * 3.0 / nt)).abs() < 1e-15);
        assert!(p.estimating_equation(&[0.0, 1.0], nt).is_err());
    }
}
