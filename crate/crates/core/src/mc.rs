//! Replicated experiments: bias/RMSE per estimator, quantile and panel size, and the
//! published simulation exhibits at reduced replication counts.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dgp::{
    generate_empirical_replication, generate_replication, DesignConfig, DesignId, EmpiricalConfig,
    EmpiricalPopulation, GeneratedPanel, HourBlock,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind, EstimatorSpec};
use crate::exec::map_indexed;
use crate::lambda::{mle_lambda, robust_lambda, RobustParams};
use crate::propensity::{
    build_first_stage, Mechanism, PropensityFit, PropensityOptions, WeightConvention,
};

/// Where replications come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    Design(DesignConfig),
    Empirical(EmpiricalConfig),
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::Design(c) => c.design.to_string(),
            Scenario::Empirical(c) => format!("empirical/{}/rho0={}", c.population.label, c.rho0),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Scenario::Design(c) => (c.n, c.t),
            Scenario::Empirical(c) => (c.n, c.t),
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            Scenario::Design(c) => c.seed = seed,
            Scenario::Empirical(c) => c.seed = seed,
        }
        s
    }

    pub fn generate(&self, rep: u64) -> Result<GeneratedPanel> {
        match self {
            Scenario::Design(c) => generate_replication(c, rep),
            Scenario::Empirical(c) => generate_empirical_replication(c, rep),
        }
    }
}

/// How an arm obtains its penalty level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaRule {
    /// Use `spec.lambda`.
    Spec,
    Robust(RobustParams),
    Mle,
}

/// One estimator configuration evaluated in every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McArm {
    pub label: String,
    pub spec: EstimatorSpec,
    /// First stage for weighted kinds.
    pub mechanism: Mechanism,
    pub lambda: LambdaRule,
}

impl McArm {
    /// Benchmark arm labelled by the estimator name, MAR weights for weighted kinds.
    pub fn benchmark(kind: EstimatorKind, tau: f64) -> Self {
        Self {
            label: kind.to_string(),
            spec: EstimatorSpec::new(kind, tau),
            mechanism: Mechanism::Mar,
            lambda: LambdaRule::Spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub scenario: String,
    pub estimator: String,
    pub tau: f64,
    pub n: usize,
    pub t: usize,
    pub successes: usize,
    pub failures: usize,
    /// `None` when fewer than 90% of replications succeeded.
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    pub variance: Option<f64>,
    pub mean_attrition: f64,
    pub mean_lambda: Option<f64>,
}

/// Published value a cell is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCheck {
    pub exhibit: String,
    pub n: usize,
    pub t: usize,
    pub tau: f64,
    pub estimator: String,
    pub published_bias: f64,
    pub published_rmse: f64,
    pub observed_bias: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitativeCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Mean selected penalty per attrition level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub block: HourBlock,
    pub tau: f64,
    pub rho0: f64,
    pub attrition: f64,
    pub robust: f64,
    pub mle: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub exhibit: String,
    pub reps: usize,
    pub seed: u64,
    pub cells: Vec<McCell>,
    pub targets: Vec<TargetCheck>,
    pub checks: Vec<QualitativeCheck>,
    pub lambda_series: Vec<LambdaPoint>,
}

/// Fraction of replications a cell needs to be reported.
pub const MIN_SUCCESS_RATE: f64 = 0.9;

struct RepOutcome {
    attrition: f64,
    /// Per arm: slope error and penalty used, or the failure message.
    results: Vec<std::result::Result<(f64, f64), String>>,
}

fn lambda_seed(seed: u64, rep: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ rep.rotate_left(32)
}

fn run_rep(scenario: &Scenario, arms: &[McArm], rep: u64, seed: u64) -> RepOutcome {
    let panel = match scenario.generate(rep) {
        Ok(p) => p,
        Err(e) => {
            return RepOutcome {
                attrition: f64::NAN,
                results: arms.iter().map(|_| Err(e.to_string())).collect(),
            }
        }
    };
    let ds = &panel.dataset;
    let opts = PropensityOptions::default();
    let mut first_stage: Vec<(Mechanism, std::result::Result<PropensityFit, String>)> = Vec::new();
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let needs = arm.spec.kind.weighted();
        if needs && !first_stage.iter().any(|(m, _)| *m == arm.mechanism) {
            let fit = match arm.mechanism {
                Mechanism::Unfeasible => PropensityFit::unfeasible(ds, &panel.true_pi, &opts),
                m => build_first_stage(ds, m, &opts),
            };
            first_stage.push((arm.mechanism, fit.map_err(|e| e.to_string())));
        }
        let prop = if needs {
            match &first_stage.iter().find(|(m, _)| *m == arm.mechanism).unwrap().1 {
                Ok(p) => Some(p),
                Err(e) => {
                    results.push(Err(e.clone()));
                    continue;
                }
            }
        } else {
            None
        };
        let outcome = (|| -> Result<(f64, f64)> {
            let mut spec = arm.spec;
            if spec.kind.penalized() {
                match arm.lambda {
                    LambdaRule::Spec => {}
                    LambdaRule::Robust(params) => {
                        let l = robust_lambda(ds, prop, spec.tau, params, lambda_seed(seed, rep), Some(1))?;
                        spec.lambda = Some(l.value);
                    }
                    LambdaRule::Mle => spec.lambda = Some(mle_lambda(ds)?.value),
                }
            }
            let fit = estimate(ds, &spec, prop)?;
            let k = panel.truth.index();
            Ok((fit.vartheta[k] - panel.truth.value(spec.tau), fit.lambda_used))
        })();
        results.push(outcome.map_err(|e| e.to_string()));
    }
    RepOutcome {
        attrition: ds.attrition_summary().overall_missing,
        results,
    }
}

fn summarize(scenario: &Scenario, arm: &McArm, outcomes: &[RepOutcome], a: usize) -> McCell {
    let (n, t) = scenario.dims();
    let mut errs = Vec::new();
    let mut lams = Vec::new();
    let mut failures = 0;
    for (r, o) in outcomes.iter().enumerate() {
        match &o.results[a] {
            Ok((e, l)) => {
                errs.push(*e);
                lams.push(*l);
            }
            Err(msg) => {
                failures += 1;
                log::debug!("{} {} rep {r}: {msg}", scenario.label(), arm.label);
            }
        }
    }
    let reps = outcomes.len();
    let ok = errs.len();
    let reported = ok > 0 && ok as f64 >= MIN_SUCCESS_RATE * reps as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (bias, rmse, variance) = if reported {
        let b = mean(&errs);
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / ok as f64;
        let var = errs.iter().map(|e| (e - b).powi(2)).sum::<f64>() / ok as f64;
        (Some(b), Some(mse.sqrt()), Some(var))
    } else {
        (None, None, None)
    };
    let att: Vec<f64> = outcomes.iter().map(|o| o.attrition).filter(|a| a.is_finite()).collect();
    McCell {
        scenario: scenario.label(),
        estimator: arm.label.clone(),
        tau: arm.spec.tau,
        n,
        t,
        successes: ok,
        failures,
        bias,
        rmse,
        variance,
        mean_attrition: if att.is_empty() { f64::NAN } else { mean(&att) },
        mean_lambda: (arm.spec.kind.penalized() && ok > 0).then(|| mean(&lams)),
    }
}

/// Runs `reps` replications of every scenario and fits every arm on each.
///
/// Replication `r` of a scenario is generated from `(seed, r)`; results are aggregated in
/// replication order, so the report does not depend on `workers`.
pub fn run_mc(
    scenarios: &[Scenario],
    arms: &[McArm],
    reps: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<McReport> {
    if reps == 0 {
        return Err(Error::arg("reps must be at least 1"));
    }
    if arms.is_empty() || scenarios.is_empty() {
        return Err(Error::arg("need at least one scenario and one estimator"));
    }
    let mut cells = Vec::with_capacity(scenarios.len() * arms.len());
    for sc in scenarios {
        let sc = sc.with_seed(seed);
        let outcomes = map_indexed(reps, workers, |r| run_rep(&sc, arms, r as u64, seed));
        for (a, arm) in arms.iter().enumerate() {
            cells.push(summarize(&sc, arm, &outcomes, a));
        }
    }
    Ok(McReport {
        exhibit: "custom".into(),
        reps,
        seed,
        cells,
        targets: Vec::new(),
        checks: Vec::new(),
        lambda_series: Vec::new(),
    })
}

/// Published exhibits the harness can rerun.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableId {
    T1,
    T2,
    T3,
    T4,
    Fig1,
    Fig2,
    T5,
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableId::T1 => "table1",
            TableId::T2 => "table2",
            TableId::T3 => "table3",
            TableId::T4 => "table4",
            TableId::Fig1 => "fig1",
            TableId::Fig2 => "fig2",
            TableId::T5 => "table5",
        })
    }
}

impl FromStr for TableId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("table").trim_start_matches('t') {
            "1" => Ok(TableId::T1),
            "2" => Ok(TableId::T2),
            "3" => Ok(TableId::T3),
            "4" => Ok(TableId::T4),
            "5" => Ok(TableId::T5),
            _ => match s.to_ascii_lowercase().as_str() {
                "fig1" => Ok(TableId::Fig1),
                "fig2" => Ok(TableId::Fig2),
                other => Err(Error::Unsupported(format!("exhibit {other:?}"))),
            },
        }
    }
}

impl TableId {
    /// Replications at `scale`: `ceil(1000 scale)`, or `ceil(400 scale)` for the household table.
    pub fn reps(self, scale: f64) -> Result<usize> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::arg(format!("scale must be positive, got {scale}")));
        }
        let base = if self == TableId::T5 { 400.0 } else { 1000.0 };
        Ok(((base * scale).ceil() as usize).max(1))
    }
}

/// One published bias/RMSE pair.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedTarget {
    pub exhibit: String,
    pub n: usize,
    pub t: usize,
    pub tau: f64,
    pub estimator: String,
    pub bias: f64,
    pub rmse: f64,
}

const TARGETS_CSV: &str = include_str!("../data/targets_v1.csv");

/// The embedded published values.
pub fn published_targets() -> Result<Vec<PublishedTarget>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .from_reader(TARGETS_CSV.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(0) == Some("exhibit") {
            continue;
        }
        out.push(rec.deserialize(None)?);
    }
    Ok(out)
}

/// `max(0.03, 3 rmse / sqrt(reps))`.
pub fn target_tolerance(published_rmse: f64, reps: usize) -> f64 {
    (3.0 * published_rmse / (reps as f64).sqrt()).max(0.03)
}

fn compare(cells: &[McCell], exhibit: &str, reps: usize) -> Result<Vec<TargetCheck>> {
    let mut out = Vec::new();
    for tg in published_targets()?.into_iter().filter(|t| t.exhibit == exhibit) {
        let cell = cells.iter().find(|c| {
            c.n == tg.n && c.t == tg.t && (c.tau - tg.tau).abs() < 1e-9 && c.estimator == tg.estimator
        });
        let Some(cell) = cell else { continue };
        let tolerance = target_tolerance(tg.rmse, reps);
        let pass = cell.bias.is_some_and(|b| (b - tg.bias).abs() <= tolerance);
        out.push(TargetCheck {
            exhibit: exhibit.into(),
            n: tg.n,
            t: tg.t,
            tau: tg.tau,
            estimator: tg.estimator,
            published_bias: tg.bias,
            published_rmse: tg.rmse,
            observed_bias: cell.bias,
            tolerance,
            pass,
        });
    }
    Ok(out)
}

const BENCH_SIZES: [(usize, usize); 4] = [(200, 5), (200, 25), (500, 5), (500, 25)];
const BENCH_TAUS: [f64; 3] = [0.5, 0.75, 0.9];
const D6_TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
/// Quantiles shown for the penalty-path comparison.
pub const FIG1_TAUS: [f64; 2] = [0.5, 0.75];
const EMPIRICAL_TAUS: [f64; 3] = [0.1, 0.5, 0.9];
const RHO0_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];
const BLOCKS: [HourBlock; 3] = [HourBlock::Night, HourBlock::Peak, HourBlock::Day];

/// Penalty grid `0.25, 0.5, ..., 4`.
pub fn fig1_lambda_grid() -> Vec<f64> {
    (1..=16).map(|k| 0.25 * k as f64).collect()
}

/// The four first-stage arms of the selection-on-unobservables table.
pub fn first_stage_arms(tau: f64) -> Vec<McArm> {
    [
        ("UNF", Mechanism::Unfeasible),
        ("MAR", Mechanism::Mar),
        ("MCAR", Mechanism::Mcar),
        ("REF", Mechanism::HwStream),
    ]
    .into_iter()
    .map(|(label, mechanism)| McArm {
        label: label.into(),
        spec: EstimatorSpec::new(EstimatorKind::Wpqr, tau),
        mechanism,
        lambda: LambdaRule::Spec,
    })
    .collect()
}

/// `FE` and `PQR(lambda)` arms over the penalty grid.
pub fn penalty_path_arms(taus: &[f64], grid: &[f64]) -> Vec<McArm> {
    let mut arms = Vec::new();
    for &tau in taus {
        arms.push(McArm::benchmark(EstimatorKind::Fe, tau));
        for &l in grid {
            arms.push(McArm {
                label: format!("PQR({l})"),
                spec: EstimatorSpec::new(EstimatorKind::Pqr, tau).with_lambda(l),
                mechanism: Mechanism::Mcar,
                lambda: LambdaRule::Spec,
            });
        }
    }
    arms
}

/// Whether some penalty on the grid beats FE in |bias| and RMSE at every quantile.
pub fn penalty_dominates(cells: &[McCell], scenario: &str) -> QualitativeCheck {
    let of = |label: &str, tau: f64| {
        cells
            .iter()
            .find(|c| c.scenario == scenario && c.estimator == label && (c.tau - tau).abs() < 1e-9)
    };
    let taus: Vec<f64> = {
        let mut v: Vec<f64> = cells.iter().filter(|c| c.scenario == scenario).map(|c| c.tau).collect();
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        v
    };
    let mut winners = Vec::new();
    for l in fig1_lambda_grid() {
        let label = format!("PQR({l})");
        let all = taus.iter().all(|&tau| match (of("FE", tau), of(&label, tau)) {
            (Some(fe), Some(p)) => match (fe.bias, fe.rmse, p.bias, p.rmse) {
                (Some(fb), Some(fr), Some(pb), Some(pr)) => pb.abs() < fb.abs() && pr < fr,
                _ => false,
            },
            _ => false,
        });
        if all {
            winners.push(l);
        }
    }
    QualitativeCheck {
        name: format!("{scenario}: some lambda dominates FE"),
        pass: !winners.is_empty(),
        detail: format!("dominating lambdas: {winners:?}"),
    }
}

/// Mean robust and MLE penalties on the household design for each attrition level.
///
/// The robust rule weights by the per-period staying probability estimated from the
/// streaming sample, the probability the household experiment is defined with.
pub fn lambda_series(
    block: HourBlock,
    tau: f64,
    rho0s: &[f64],
    reps: usize,
    seed: u64,
    params: RobustParams,
    workers: Option<usize>,
) -> Result<Vec<LambdaPoint>> {
    if reps == 0 {
        return Err(Error::arg("reps must be at least 1"));
    }
    let pop = EmpiricalPopulation::synthetic(block, tau)?;
    let opts = PropensityOptions {
        weighting: WeightConvention::Conditional,
        ..Default::default()
    };
    let mut out = Vec::new();
    for &rho0 in rho0s {
        let cfg = EmpiricalConfig::household(pop.clone(), rho0, seed);
        let draws = map_indexed(reps, workers, |r| -> Result<(f64, f64, f64)> {
            let g = generate_empirical_replication(&cfg, r as u64)?;
            let ds = &g.dataset;
            let fs = build_first_stage(ds, Mechanism::HwStream, &opts)?;
            let rob = robust_lambda(ds, Some(&fs), tau, params, lambda_seed(seed, r as u64), Some(1))?;
            let mle = mle_lambda(ds)?;
            Ok((ds.attrition_summary().overall_missing, rob.value, mle.value))
        });
        let ok: Vec<(f64, f64, f64)> = draws.iter().filter_map(|d| d.as_ref().ok().copied()).collect();
        if let Some(Err(e)) = draws.iter().find(|d| d.is_err()) {
            log::warn!("lambda series rho0={rho0}: {} failed replications, e.g. {e}", reps - ok.len());
        }
        if ok.is_empty() {
            return Err(Error::arg(format!("every replication failed at rho0 = {rho0}")));
        }
        let m = ok.len() as f64;
        out.push(LambdaPoint {
            block,
            tau,
            rho0,
            attrition: ok.iter().map(|d| d.0).sum::<f64>() / m,
            robust: ok.iter().map(|d| d.1).sum::<f64>() / m,
            mle: ok.iter().map(|d| d.2).sum::<f64>() / m,
            failures: reps - ok.len(),
        });
    }
    Ok(out)
}

fn range(v: impl Iterator<Item = f64> + Clone) -> f64 {
    v.clone().fold(f64::NEG_INFINITY, f64::max) - v.fold(f64::INFINITY, f64::min)
}

/// Robust penalties vary less across attrition levels than the MLE ratio.
pub fn robust_is_stabler(series: &[LambdaPoint]) -> QualitativeCheck {
    let r = range(series.iter().map(|p| p.robust));
    let m = range(series.iter().map(|p| p.mle));
    QualitativeCheck {
        name: "robust lambda range below MLE range".into(),
        pass: r < m,
        detail: format!("robust range {r:.4}, MLE range {m:.4}"),
    }
}

/// Reruns a published exhibit with `ceil(base * scale)` replications.
pub fn replicate_table(table: TableId, scale: f64, seed: u64, workers: Option<usize>) -> Result<McReport> {
    let reps = table.reps(scale)?;
    let mut report = match table {
        TableId::T1 | TableId::T2 | TableId::T3 => {
            let design = match table {
                TableId::T1 => DesignId::D3,
                TableId::T2 => DesignId::D4,
                _ => DesignId::D5,
            };
            let mut cells = Vec::new();
            for (n, t) in BENCH_SIZES {
                let sc = Scenario::Design(DesignConfig::preset(design, n, t, seed)?);
                let arms: Vec<McArm> = BENCH_TAUS
                    .iter()
                    .flat_map(|&tau| EstimatorKind::ALL.iter().map(move |&k| McArm::benchmark(k, tau)))
                    .collect();
                cells.extend(run_mc(&[sc], &arms, reps, seed, workers)?.cells);
            }
            let targets = compare(&cells, &table.to_string(), reps)?;
            let mut checks = Vec::new();
            for &tau in &[0.75, 0.9] {
                for (n, t) in BENCH_SIZES {
                    let get = |l: &str| {
                        cells
                            .iter()
                            .find(|c| c.n == n && c.t == t && c.tau == tau && c.estimator == l)
                            .and_then(|c| c.bias)
                    };
                    if let (Some(a), Some(b)) = (get("WPQR"), get("WQR")) {
                        checks.push(QualitativeCheck {
                            name: format!("|WPQR| <= |WQR| at N={n} T={t} tau={tau}"),
                            pass: a.abs() <= b.abs(),
                            detail: format!("WPQR {a:+.4}, WQR {b:+.4}"),
                        });
                    }
                }
            }
            McReport { cells, targets, checks, ..empty(reps, seed) }
        }
        TableId::T4 => {
            let mut cells = Vec::new();
            for n in [500, 2000] {
                let sc = Scenario::Design(DesignConfig::preset(DesignId::D6, n, 2, seed)?);
                let arms: Vec<McArm> = D6_TAUS.iter().flat_map(|&tau| first_stage_arms(tau)).collect();
                cells.extend(run_mc(&[sc], &arms, reps, seed, workers)?.cells);
            }
            let targets = compare(&cells, "table4", reps)?;
            let mut checks = Vec::new();
            for c in cells.iter().filter(|c| c.estimator == "REF") {
                let mar = cells
                    .iter()
                    .find(|m| m.estimator == "MAR" && m.n == c.n && m.tau == c.tau)
                    .and_then(|m| m.bias);
                if let (Some(r), Some(m)) = (c.bias, mar) {
                    checks.push(QualitativeCheck {
                        name: format!("|REF| < |MAR| at N={} tau={}", c.n, c.tau),
                        pass: r.abs() < m.abs(),
                        detail: format!("REF {r:+.4}, MAR {m:+.4}"),
                    });
                }
            }
            McReport { cells, targets, checks, ..empty(reps, seed) }
        }
        TableId::Fig1 => {
            let arms = penalty_path_arms(&FIG1_TAUS, &fig1_lambda_grid());
            let scenarios = [DesignId::D1a, DesignId::D1b, DesignId::D2a, DesignId::D2b]
                .into_iter()
                .map(|d| DesignConfig::preset(d, 200, 5, seed).map(Scenario::Design))
                .collect::<Result<Vec<_>>>()?;
            let cells = run_mc(&scenarios, &arms, reps, seed, workers)?.cells;
            let checks = scenarios.iter().map(|s| penalty_dominates(&cells, &s.label())).collect();
            McReport { cells, checks, ..empty(reps, seed) }
        }
        TableId::Fig2 => {
            let mut series = Vec::new();
            for block in BLOCKS {
                series.extend(lambda_series(block, 0.5, &RHO0_LEVELS, reps, seed, RobustParams::default(), workers)?);
            }
            let checks = BLOCKS
                .iter()
                .map(|&b| {
                    let pts: Vec<LambdaPoint> = series.iter().filter(|p| p.block == b).copied().collect();
                    let mut c = robust_is_stabler(&pts);
                    c.name = format!("{b:?}: {}", c.name);
                    c
                })
                .collect();
            McReport { lambda_series: series, checks, ..empty(reps, seed) }
        }
        TableId::T5 => {
            let mut cells = Vec::new();
            for block in BLOCKS {
                for tau in EMPIRICAL_TAUS {
                    let pop = EmpiricalPopulation::synthetic(block, tau)?;
                    let robust = LambdaRule::Robust(RobustParams::default());
                    let arms = [
                        McArm {
                            label: "WQR".into(),
                            spec: EstimatorSpec::new(EstimatorKind::Wqr, tau),
                            mechanism: Mechanism::HwStream,
                            lambda: LambdaRule::Spec,
                        },
                        McArm {
                            label: "WPQR-UNF".into(),
                            spec: EstimatorSpec::new(EstimatorKind::Wpqr, tau),
                            mechanism: Mechanism::Unfeasible,
                            lambda: robust,
                        },
                        McArm {
                            label: "WPQR-STR".into(),
                            spec: EstimatorSpec::new(EstimatorKind::Wpqr, tau),
                            mechanism: Mechanism::HwStream,
                            lambda: robust,
                        },
                    ];
                    let scenarios: Vec<Scenario> = RHO0_LEVELS
                        .iter()
                        .map(|&r| Scenario::Empirical(EmpiricalConfig::household(pop.clone(), r, seed)))
                        .collect();
                    cells.extend(run_mc(&scenarios, &arms, reps, seed, workers)?.cells);
                }
            }
            McReport { cells, ..empty(reps, seed) }
        }
    };
    report.exhibit = table.to_string();
    Ok(report)
}

fn empty(reps: usize, seed: u64) -> McReport {
    McReport {
        exhibit: String::new(),
        reps,
        seed,
        cells: Vec::new(),
        targets: Vec::new(),
        checks: Vec::new(),
        lambda_series: Vec::new(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

impl McReport {
    /// Every compared cell and qualitative check passed.
    pub fn all_pass(&self) -> bool {
        self.targets.iter().all(|t| t.pass) && self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cells as CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "scenario", "estimator", "tau", "n", "t", "bias", "rmse", "successes", "failures",
            "mean_attrition", "mean_lambda",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.scenario.clone(),
                c.estimator.clone(),
                c.tau.to_string(),
                c.n.to_string(),
                c.t.to_string(),
                c.bias.map(|v| v.to_string()).unwrap_or_default(),
                c.rmse.map(|v| v.to_string()).unwrap_or_default(),
                c.successes.to_string(),
                c.failures.to_string(),
                c.mean_attrition.to_string(),
                c.mean_lambda.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `rho0, robust lambda, MLE lambda` series for plotting.
    pub fn write_lambda_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["block", "tau", "rho0", "attrition", "robust_lambda", "mle_lambda"])?;
        for p in &self.lambda_series {
            w.write_record([
                format!("{:?}", p.block).to_lowercase(),
                p.tau.to_string(),
                p.rho0.to_string(),
                p.attrition.to_string(),
                p.robust.to_string(),
                p.mle.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned Bias/RMSE table followed by comparisons.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} (reps = {}, seed = {})", self.exhibit, self.reps, self.seed)?;
        if !self.cells.is_empty() {
            writeln!(
                w,
                "{:<26} {:>6} {:>5} {:>5} {:<12} {:>9} {:>9} {:>6} {:>8}",
                "scenario", "N", "T", "tau", "estimator", "bias", "rmse", "fail", "attr"
            )?;
            for c in &self.cells {
                writeln!(
                    w,
                    "{:<26} {:>6} {:>5} {:>5} {:<12} {:>9} {:>9} {:>6} {:>8.3}",
                    c.scenario,
                    c.n,
                    c.t,
                    c.tau,
                    c.estimator,
                    fmt_opt(c.bias),
                    fmt_opt(c.rmse),
                    c.failures,
                    c.mean_attrition
                )?;
            }
        }
        for p in &self.lambda_series {
            writeln!(
                w,
                "{:?} tau={} rho0={}: attrition {:.3}, robust {:.4}, mle {:.4}",
                p.block, p.tau, p.rho0, p.attrition, p.robust, p.mle
            )?;
        }
        for t in &self.targets {
            writeln!(
                w,
                "[{}] N={} T={} tau={} {}: bias {} vs {:+.3} (tol {:.3})",
                if t.pass { "pass" } else { "FAIL" },
                t.n,
                t.t,
                t.tau,
                t.estimator,
                fmt_opt(t.observed_bias),
                t.published_bias,
                t.tolerance
            )?;
        }
        for c in &self.checks {
            writeln!(w, "[{}] {} ({})", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}
