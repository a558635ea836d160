//! Primal-dual interior-point solver for weighted check-loss minimization.
//!
//! Rows with positive weight are rescaled (`rho` is positively homogeneous) so the
//! problem becomes an unweighted quantile regression whose dual is the bounded LP
//!
//! ```text
//!   min  c'a   s.t.  A a = b,  0 <= a <= 1,
//!   c = -y,  A = X',  b = X'(1 - tau)
//! ```
//!
//! solved with a Mehrotra predictor-corrector (the Frisch-Newton scheme). The
//! coefficients are the negated equality multipliers. The normal equations
//! `A Q A'` have an arrow shape (dense block + diagonal group block) and are reduced
//! to the dense block with a Schur complement, so each iteration costs
//! `O(rows * p^2 + groups * p^2 + p^3)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::check::rho;
use super::problem::WqrProblem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative duality gap at which the iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Refit through the rows with the smallest residuals and keep that vertex when it
    /// is at least as good. Only attempted when `n_params <= polish_max_params`.
    pub polish: bool,
    pub polish_max_params: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 200,
            polish: true,
            polish_max_params: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WqrSolution {
    pub coefficients: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Relative duality gap at exit.
    pub dual_gap: f64,
}

const STEP_FRACTION: f64 = 0.99995;

/// Rescaled active rows in structure-of-arrays form.
struct Scaled {
    p: usize,
    g: usize,
    x: Vec<f64>,
    grp: Vec<Option<usize>>,
    gc: Vec<f64>,
    y: Vec<f64>,
    tau: Vec<f64>,
}

impl Scaled {
    fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    fn xrow(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// out = A v  (length p + g)
    fn a_mul(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.n() {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for (o, xj) in out[..self.p].iter_mut().zip(self.xrow(i)) {
                *o += vi * xj;
            }
            if let Some(k) = self.grp[i] {
                out[self.p + k] += vi * self.gc[i];
            }
        }
    }

    /// out = A' y  (length n)
    fn at_mul(&self, y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s: f64 = self.xrow(i).iter().zip(&y[..self.p]).map(|(a, b)| a * b).sum();
            if let Some(k) = self.grp[i] {
                s += self.gc[i] * y[self.p + k];
            }
            *o = s;
        }
    }
}

/// Factorized `A diag(d) A'` via the Schur complement on the dense block.
struct NormalSystem {
    p: usize,
    g: usize,
    maa: Vec<f64>,
    mva: Vec<f64>, // g x p, row per group
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl NormalSystem {
    fn build(s: &Scaled, d: &[f64]) -> Result<Self> {
        let (p, g) = (s.p, s.g);
        let mut mvv = DMatrix::<f64>::zeros(p, p);
        let mut maa = vec![0.0; g];
        let mut mva = vec![0.0; g * p];
        let mut acc = vec![0.0; p * p];
        for i in 0..s.n() {
            let di = d[i];
            let xi = s.xrow(i);
            for a in 0..p {
                let da = di * xi[a];
                if da == 0.0 {
                    continue;
                }
                let row = &mut acc[a * p..a * p + a + 1];
                for (b, r) in row.iter_mut().enumerate() {
                    *r += da * xi[b];
                }
            }
            if let Some(k) = s.grp[i] {
                let c = s.gc[i];
                maa[k] += di * c * c;
                let dc = di * c;
                for (m, xj) in mva[k * p..(k + 1) * p].iter_mut().zip(xi) {
                    *m += dc * xj;
                }
            }
        }
        for a in 0..p {
            for b in 0..=a {
                mvv[(a, b)] = acc[a * p + b];
                mvv[(b, a)] = acc[a * p + b];
            }
        }
        for k in 0..g {
            if !(maa[k] > 0.0) {
                return Err(Error::Unidentified {
                    index: p + k,
                    reason: "group column has no positively weighted row".into(),
                });
            }
            let mk = &mva[k * p..(k + 1) * p];
            let inv = 1.0 / maa[k];
            for a in 0..p {
                let fa = mk[a] * inv;
                if fa == 0.0 {
                    continue;
                }
                for b in 0..=a {
                    mvv[(a, b)] -= fa * mk[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                mvv[(b, a)] = mvv[(a, b)];
            }
        }
        let chol = match mvv.clone().cholesky() {
            Some(c) => c,
            None => {
                // Near-singular Schur block late in the iteration: retry with a tiny ridge.
                let scale = (0..p).map(|a| mvv[(a, a)].abs()).fold(0.0, f64::max).max(1.0);
                let mut ridged = mvv;
                for a in 0..p {
                    ridged[(a, a)] += 1e-12 * scale;
                }
                ridged
                    .cholesky()
                    .ok_or_else(|| Error::Singular("interior-point normal equations".into()))?
            }
        };
        Ok(Self { p, g, maa, mva, chol })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (p, g) = (self.p, self.g);
        let mut rv = DVector::from_column_slice(&rhs[..p]);
        for k in 0..g {
            let f = rhs[p + k] / self.maa[k];
            for (a, m) in self.mva[k * p..(k + 1) * p].iter().enumerate() {
                rv[a] -= m * f;
            }
        }
        let uv = if p > 0 { self.chol.solve(&rv) } else { rv };
        let mut out = Vec::with_capacity(p + g);
        out.extend(uv.iter().copied());
        for k in 0..g {
            let mk = &self.mva[k * p..(k + 1) * p];
            let dot: f64 = mk.iter().zip(uv.iter()).map(|(a, b)| a * b).sum();
            out.push((rhs[p + k] - dot) / self.maa[k]);
        }
        out
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `sum_r w_r rho_{tau_r}(y_r - x_r' beta)` over `beta`.
pub fn solve(problem: &WqrProblem, options: &SolverOptions) -> Result<WqrSolution> {
    problem.validate()?;
    let p = problem.n_dense();
    let g = problem.n_groups();
    let m = p + g;

    let mut s = Scaled {
        p,
        g,
        x: Vec::with_capacity(problem.n_rows() * p),
        grp: Vec::with_capacity(problem.n_rows()),
        gc: Vec::with_capacity(problem.n_rows()),
        y: Vec::with_capacity(problem.n_rows()),
        tau: Vec::with_capacity(problem.n_rows()),
    };
    for r in problem.rows().filter(|r| r.weight > 0.0) {
        s.x.extend(r.dense.iter().map(|v| v * r.weight));
        s.grp.push(r.group);
        s.gc.push(r.weight);
        s.y.push(r.response * r.weight);
        s.tau.push(r.tau);
    }
    let n = s.n();

    // A dense column that is identically zero among active rows cannot be identified.
    for j in 0..p {
        if (0..n).all(|i| s.xrow(i)[j] == 0.0) {
            return Err(Error::Unidentified {
                index: j,
                reason: "column is zero on every positively weighted row".into(),
            });
        }
    }

    let c: Vec<f64> = s.y.iter().map(|v| -v).collect();
    let mut x: Vec<f64> = s.tau.iter().map(|t| 1.0 - t).collect();
    let mut sl: Vec<f64> = s.tau.clone();
    let mut b = vec![0.0; m];
    s.a_mul(&x, &mut b);

    // Least-squares start for the multipliers.
    let ones = vec![1.0; n];
    let ls = NormalSystem::build(&s, &ones)?;
    let mut ac = vec![0.0; m];
    s.a_mul(&c, &mut ac);
    let mut y = ls.solve(&ac);

    let mut r = vec![0.0; n];
    s.at_mul(&y, &mut r);
    for (ri, ci) in r.iter_mut().zip(&c) {
        *ri = ci - *ri;
    }
    let mean_abs = r.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let shift = 1e-3 * (1.0 + mean_abs);
    let mut z: Vec<f64> = r.iter().map(|v| v.max(0.0) + shift).collect();
    let mut w: Vec<f64> = r.iter().map(|v| (-v).max(0.0) + shift).collect();

    let mut q = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut tmp_n = vec![0.0; n];
    let mut tmp_m = vec![0.0; m];
    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut ds = vec![0.0; n];
    let mut rxz = vec![0.0; n];
    let mut rsw = vec![0.0; n];

    let mut iterations = 0;
    let mut rel_gap = f64::INFINITY;
    let mut converged = false;

    while iterations < options.max_iter {
        let gap = dot(&x, &z) + dot(&sl, &w);
        let obj = current_objective(&s, &y, &mut tmp_n);
        rel_gap = gap / (1.0 + obj.abs());
        if rel_gap < options.tol {
            converged = true;
            break;
        }
        iterations += 1;

        for i in 0..n {
            q[i] = 1.0 / (z[i] / x[i] + w[i] / sl[i]);
        }
        let normal = NormalSystem::build(&s, &q)?;

        // Residuals of the equality constraints; zero up to rounding.
        s.a_mul(&x, &mut tmp_m);
        let rp: Vec<f64> = b.iter().zip(&tmp_m).map(|(bi, ai)| bi - ai).collect();
        s.at_mul(&y, &mut tmp_n);
        let rd: Vec<f64> = (0..n).map(|i| c[i] - tmp_n[i] - z[i] + w[i]).collect();

        // Affine-scaling predictor.
        for i in 0..n {
            rxz[i] = -x[i] * z[i];
            rsw[i] = -sl[i] * w[i];
        }
        newton_direction(
            &s, &normal, &x, &sl, &z, &w, &q, &rp, &rd, &rxz, &rsw, &mut h, &mut tmp_n,
            &mut tmp_m, &mut dx, &mut ds, &mut dz, &mut dw,
        );
        let ap = max_step(&x, &dx).min(max_step(&sl, &ds)).min(1.0);
        let ad = max_step(&z, &dz).min(max_step(&w, &dw)).min(1.0);
        let mut mu_aff = 0.0;
        for i in 0..n {
            mu_aff += (x[i] + ap * dx[i]) * (z[i] + ad * dz[i])
                + (sl[i] + ap * ds[i]) * (w[i] + ad * dw[i]);
        }
        let sigma = (mu_aff / gap).powi(3).clamp(0.0, 1.0);
        let mu = sigma * gap / (2.0 * n as f64);

        // Centering-corrector.
        for i in 0..n {
            rxz[i] = mu - x[i] * z[i] - dx[i] * dz[i];
            rsw[i] = mu - sl[i] * w[i] - ds[i] * dw[i];
        }
        let dy = newton_direction(
            &s, &normal, &x, &sl, &z, &w, &q, &rp, &rd, &rxz, &rsw, &mut h, &mut tmp_n,
            &mut tmp_m, &mut dx, &mut ds, &mut dz, &mut dw,
        );
        let ap = (STEP_FRACTION * max_step(&x, &dx).min(max_step(&sl, &ds))).min(1.0);
        let ad = (STEP_FRACTION * max_step(&z, &dz).min(max_step(&w, &dw))).min(1.0);
        for i in 0..n {
            x[i] += ap * dx[i];
            sl[i] += ap * ds[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        for (yi, di) in y.iter_mut().zip(&dy) {
            *yi += ad * di;
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            gap: rel_gap,
        });
    }

    let mut coef: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut objective = problem.objective(&coef);

    if options.polish && m <= options.polish_max_params {
        if let Some(vertex) = polish(&s, &coef) {
            let vobj = problem.objective(&vertex);
            if vobj <= objective + 1e-12 * (1.0 + objective.abs()) {
                coef = vertex;
                objective = vobj;
            }
        }
    }

    // Group coefficients that sit on the penalty kink come back as tiny interior values.
    let scale = 1.0 + s.y.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for v in coef[p..].iter_mut() {
        if v.abs() <= 1e-9 * scale {
            *v = 0.0;
        }
    }
    objective = objective.min(problem.objective(&coef));

    Ok(WqrSolution {
        coefficients: coef,
        objective,
        iterations,
        dual_gap: rel_gap,
    })
}

fn current_objective(s: &Scaled, y: &[f64], buf: &mut [f64]) -> f64 {
    // residual e = y_scaled - X beta with beta = -y_mult
    s.at_mul(y, buf);
    (0..s.n()).map(|i| rho(s.y[i] + buf[i], s.tau[i])).sum()
}

#[allow(clippy::too_many_arguments)]
fn newton_direction(
    s: &Scaled,
    normal: &NormalSystem,
    x: &[f64],
    sl: &[f64],
    z: &[f64],
    w: &[f64],
    q: &[f64],
    rp: &[f64],
    rd: &[f64],
    rxz: &[f64],
    rsw: &[f64],
    h: &mut [f64],
    tmp_n: &mut [f64],
    tmp_m: &mut [f64],
    dx: &mut [f64],
    ds: &mut [f64],
    dz: &mut [f64],
    dw: &mut [f64],
) -> Vec<f64> {
    let n = s.n();
    for i in 0..n {
        h[i] = rd[i] - rxz[i] / x[i] + rsw[i] / sl[i];
        tmp_n[i] = q[i] * h[i];
    }
    s.a_mul(tmp_n, tmp_m);
    let rhs: Vec<f64> = rp.iter().zip(tmp_m.iter()).map(|(a, b)| a + b).collect();
    let dy = normal.solve(&rhs);
    s.at_mul(&dy, tmp_n);
    for i in 0..n {
        dx[i] = q[i] * (tmp_n[i] - h[i]);
        ds[i] = -dx[i];
        dz[i] = (rxz[i] - z[i] * dx[i]) / x[i];
        dw[i] = (rsw[i] + w[i] * dx[i]) / sl[i];
    }
    dy
}

/// Fits exactly through a full-rank set of rows with the smallest residuals.
fn polish(s: &Scaled, coef: &[f64]) -> Option<Vec<f64>> {
    let (p, g) = (s.p, s.g);
    let m = p + g;
    let n = s.n();
    if n < m {
        return None;
    }
    let full_row = |i: usize| -> Vec<f64> {
        let mut v = vec![0.0; m];
        v[..p].copy_from_slice(s.xrow(i));
        if let Some(k) = s.grp[i] {
            v[p + k] = s.gc[i];
        }
        v
    };
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let row = full_row(i);
            let fit: f64 = row.iter().zip(coef).map(|(a, b)| a * b).sum();
            ((s.y[i] - fit).abs() / (1.0 + s.y[i].abs()), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut chosen = Vec::with_capacity(m);
    for &(_, i) in &order {
        let row = full_row(i);
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for bvec in &basis {
            let d = dot(&v, bvec);
            v.iter_mut().zip(bvec).for_each(|(a, b)| *a -= d * b);
        }
        let nv = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if nv > 1e-9 * norm0 {
            v.iter_mut().for_each(|t| *t /= nv);
            basis.push(v);
            chosen.push(i);
            if chosen.len() == m {
                break;
            }
        }
    }
    if chosen.len() < m {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for (k, &i) in chosen.iter().enumerate() {
        let row = full_row(i);
        for j in 0..m {
            a[(k, j)] = row[j];
        }
        rhs[k] = s.y[i];
    }
    let sol = a.lu().solve(&rhs)?;
    if sol.iter().all(|v| v.is_finite()) {
        Some(sol.iter().copied().collect())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_problem(ys: &[f64], ws: &[f64], tau: f64) -> WqrProblem {
        let mut p = WqrProblem::new(1, 0, tau).unwrap();
        for (y, w) in ys.iter().zip(ws) {
            p.push_row(&[1.0], None, *y, *w).unwrap();
        }
        p
    }

    #[test]
    fn median_of_three() {
        let p = intercept_problem(&[1.0, 2.0, 9.0], &[1.0; 3], 0.5);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!((sol.coefficients[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn weighted_two_point() {
        // 3*rho(0) + 1*rho(1) = 0.5 beats 3*rho(-1) + rho(0) = 1.5
        let p = intercept_problem(&[0.0, 1.0], &[3.0, 1.0], 0.5);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!(sol.coefficients[0].abs() < 1e-9, "{:?}", sol);
        assert!((sol.objective - 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_group_is_unidentified() {
        let mut p = WqrProblem::new(1, 2, 0.5).unwrap();
        p.push_row(&[1.0], Some(0), 1.0, 1.0).unwrap();
        p.push_row(&[2.0], Some(0), 2.0, 1.0).unwrap();
        match solve(&p, &SolverOptions::default()) {
            Err(Error::Unidentified { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_column_is_unidentified() {
        let mut p = WqrProblem::new(2, 0, 0.5).unwrap();
        p.push_row(&[1.0, 0.0], None, 1.0, 1.0).unwrap();
        p.push_row(&[1.0, 0.0], None, 2.0, 1.0).unwrap();
        assert!(matches!(
            solve(&p, &SolverOptions::default()),
            Err(Error::Unidentified { index: 1, .. })
        ));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let p = intercept_problem(&[1.0, 5.0, 2.0, 8.0, 3.0], &[1.0; 5], 0.3);
        let opts = SolverOptions {
            max_iter: 1,
            tol: 1e-14,
            ..Default::default()
        };
        assert!(matches!(solve(&p, &opts), Err(Error::NonConvergence { .. })));
    }
}
