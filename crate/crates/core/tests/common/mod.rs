#![allow(dead_code)]

use attrition_pqr::qr::WqrProblem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random problem: up to 8 rows and at most 2 parameters, which may be dense
/// columns or a group column.
pub fn random_small_problem(seed: u64) -> WqrProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = rng.random_range(0.05..0.95);
    let (n_dense, n_groups) = match rng.random_range(0..4) {
        0 => (1, 0),
        1 => (2, 0),
        2 => (1, 1),
        _ => (0, 2),
    };
    let m = n_dense + n_groups;
    let rows = rng.random_range((m + 1).max(2)..=8);
    let mut p = WqrProblem::new(n_dense, n_groups, tau).unwrap();
    for r in 0..rows {
        let mut dense = vec![0.0; n_dense];
        for (j, d) in dense.iter_mut().enumerate() {
            *d = if j == 0 && rng.random_bool(0.5) { 1.0 } else { rng.random_range(-2.0..2.0) };
        }
        // Make sure each group column appears at least once.
        let group = if n_groups == 0 {
            None
        } else if r < n_groups {
            Some(r)
        } else if n_dense > 0 && rng.random_bool(0.3) {
            None
        } else {
            Some(rng.random_range(0..n_groups))
        };
        let y = rng.random_range(-3.0..3.0);
        let w = if rng.random_bool(0.8) { rng.random_range(0.2..3.0) } else { 1.0 };
        // Occasionally use a row-specific quantile, as penalty rows do.
        if rng.random_bool(0.2) {
            p.push_row_at(&dense, group, y, w, 0.5).unwrap();
        } else {
            p.push_row(&dense, group, y, w).unwrap();
        }
    }
    p
}

/// Minimum objective over all fits that interpolate `n_params` linearly independent rows.
pub fn brute_force_min(p: &WqrProblem) -> f64 {
    let m = p.n_params();
    let n = p.n_rows();
    let full = |i: usize| -> Vec<f64> {
        let r = p.row(i);
        let mut v = vec![0.0; m];
        v[..p.n_dense()].copy_from_slice(r.dense);
        if let Some(g) = r.group {
            v[p.n_dense() + g] = 1.0;
        }
        v
    };
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut b = DVector::<f64>::zeros(m);
        for (k, &i) in idx.iter().enumerate() {
            for (j, v) in full(i).into_iter().enumerate() {
                a[(k, j)] = v;
            }
            b[k] = p.row(i).response;
        }
        if a.determinant().abs() > 1e-10 {
            if let Some(sol) = a.lu().solve(&b) {
                let coef: Vec<f64> = sol.iter().copied().collect();
                best = best.min(p.objective(&coef));
            }
        }
        // next combination
        let mut k = m;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] < n - m + k {
                idx[k] += 1;
                for l in k + 1..m {
                    idx[l] = idx[l - 1] + 1;
                }
                break;
            }
        }
    }
}

pub struct OracleSummary {
    pub checked: usize,
    pub max_objective_gap: f64,
    pub max_subgradient_violation: f64,
    pub failures: Vec<String>,
}

pub fn run_oracle(count: u64) -> OracleSummary {
    use attrition_pqr::qr::{solve, SolverOptions};
    let mut out = OracleSummary {
        checked: 0,
        max_objective_gap: 0.0,
        max_subgradient_violation: 0.0,
        failures: Vec::new(),
    };
    for seed in 0..count {
        let p = random_small_problem(seed);
        let oracle = brute_force_min(&p);
        match solve(&p, &SolverOptions::default()) {
            Ok(sol) => {
                let gap = (sol.objective - oracle).abs();
                let viol = p.subgradient_violation(&sol.coefficients, 1e-9);
                out.max_objective_gap = out.max_objective_gap.max(gap);
                out.max_subgradient_violation = out.max_subgradient_violation.max(viol);
                if gap > 1e-8 || viol > 1e-8 {
                    out.failures.push(format!("seed {seed}: gap {gap:.3e} violation {viol:.3e}"));
                }
            }
            Err(e) => out.failures.push(format!("seed {seed}: {e}")),
        }
        out.checked += 1;
    }
    out
}
