mod settings;

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use attrition_pqr::dgp::{generate_replication, DesignConfig, DesignId};
use attrition_pqr::estimators::{estimate, EstimatorKind, EstimatorSpec, PenaltyForm};
use attrition_pqr::inference::{sandwich_covariance, BandwidthRule};
use attrition_pqr::lambda::{mle_lambda, robust_lambda, LambdaChoice, LambdaMethod, RobustParams};
use attrition_pqr::mc::{replicate_table, run_mc, McArm, McReport, Scenario, TableId};
use attrition_pqr::panel::{load_panel, load_streaming, PanelDataset, PanelSchema};
use attrition_pqr::propensity::{build_first_stage, Mechanism, PropensityFit, PropensityOptions};
use attrition_pqr::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::Settings;

const EXIT_VALIDATION: u8 = 1;
const EXIT_SOLVER: u8 = 2;
const EXIT_PROPENSITY: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Weighted penalized quantile regression for panels with attrition.
#[derive(Debug, Parser)]
#[command(name = "attrition-pqr", version)]
struct Cli {
    /// JSON file with default values for any flag (keys use snake_case flag names).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; falls back to ATTRITION_PQR_SEED, then 42.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulations (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Write output here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an estimator to a panel CSV.
    Estimate(EstimateArgs),
    /// Generate a simulated panel, or run replications of a design.
    Simulate(SimulateArgs),
    /// Rerun a published simulation exhibit and compare with its values.
    ReplicateTable(ReplicateArgs),
    /// Choose the penalty level for a panel CSV.
    SelectLambda(SelectArgs),
}

#[derive(Debug, Args, Default)]
struct PanelArgs {
    /// Panel CSV (long format: subject, period, response, d_*, x_* columns).
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Streaming-sample CSV (subject_id, h, value).
    #[arg(long)]
    streaming: Option<PathBuf>,
    /// Subject identifier column [default: subject_id].
    #[arg(long)]
    subject_col: Option<String>,
    /// Period column (integers) [default: period].
    #[arg(long)]
    period_col: Option<String>,
    /// Response column; empty cells are missing [default: response].
    #[arg(long)]
    response_col: Option<String>,
    /// Comma-separated treatment columns (default: every `d_` column).
    #[arg(long, value_delimiter = ',')]
    treat_cols: Option<Vec<String>>,
    /// Comma-separated covariate columns (default: every `x_` column).
    #[arg(long, value_delimiter = ',')]
    covar_cols: Option<Vec<String>>,
    /// First-stage mechanism: mcar, mar, hw (streaming) or ref.
    #[arg(long)]
    mechanism: Option<String>,
    /// Lower bound applied to staying probabilities.
    #[arg(long)]
    floor: Option<f64>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// qr, wqr, fe, wfe, pqr or wpqr [default: wpqr].
    #[arg(long)]
    estimator: Option<String>,
    /// Quantile level in (0, 1) [default: 0.5].
    #[arg(long)]
    tau: Option<f64>,
    /// Fixed penalty level [default: 1 when no method is given].
    #[arg(long, conflicts_with = "lambda_method")]
    lambda: Option<f64>,
    /// Data-driven penalty: robust or mle.
    #[arg(long)]
    lambda_method: Option<String>,
    /// absolute, check or check_per_period [default: absolute].
    #[arg(long)]
    penalty: Option<String>,
    /// Robust rule: multiplier on the simulated quantile [default: 2].
    #[arg(long)]
    kappa: Option<f64>,
    /// Robust rule: tail probability of the simulated quantile [default: 0.1].
    #[arg(long)]
    c: Option<f64>,
    /// Robust rule: number of simulation draws [default: 1000].
    #[arg(long)]
    draws: Option<usize>,
    /// Skip the sandwich standard errors.
    #[arg(long)]
    no_se: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// d1a, d1b, d2a, d2b, d3, d4, d5 or d6 [default: d3].
    #[arg(long)]
    design: Option<String>,
    /// Number of subjects [default: 200].
    #[arg(long)]
    n: Option<usize>,
    /// Number of periods [default: 5, or 2 for d6].
    #[arg(long)]
    t: Option<usize>,
    /// Replication index to generate [default: 0].
    #[arg(long)]
    rep: Option<u64>,
    /// Where to write the streaming sample, if the design has one.
    #[arg(long)]
    streaming_output: Option<PathBuf>,
    /// Run this many replications of the benchmark estimators instead of writing data.
    #[arg(long)]
    mc_reps: Option<usize>,
    /// Quantile for --mc-reps [default: 0.5].
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct ReplicateArgs {
    /// 1, 2, 3, 4, 5, fig1 or fig2.
    #[arg(long)]
    table: Option<String>,
    /// Fraction of the published replication count [default: 0.2].
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// robust or mle [default: robust].
    #[arg(long)]
    method: Option<String>,
    /// Quantile level used by the robust rule [default: 0.5].
    #[arg(long)]
    tau: Option<f64>,
    /// Multiplier on the simulated quantile [default: 2].
    #[arg(long)]
    kappa: Option<f64>,
    /// Tail probability of the simulated quantile [default: 0.1].
    #[arg(long)]
    c: Option<f64>,
    /// Number of simulation draws [default: 1000].
    #[arg(long)]
    draws: Option<usize>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidTau(_)
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch(_)
            | Error::InvalidPanel(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Unsupported(_) => EXIT_VALIDATION,
            Error::Unidentified { .. } | Error::NonConvergence { .. } | Error::Singular(_) => EXIT_SOLVER,
            Error::Separation { .. } | Error::Propensity(_) => EXIT_PROPENSITY,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self { code: EXIT_VALIDATION, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<u8> {
    let cfg = match &cli.config {
        Some(p) => Settings::load(p).map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?,
        None => Settings::default(),
    };
    let seed = resolve_seed(cli.seed.or(cfg.seed))?;
    let workers = cli.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    let format = cli.format.or(cfg.format);
    let out = Output { path: cli.output.clone().or(cfg.output.clone()) };
    match cli.command {
        Command::Estimate(a) => cmd_estimate(a, &cfg, format.unwrap_or(Format::Json), seed, workers, &out),
        Command::Simulate(a) => cmd_simulate(a, &cfg, format.unwrap_or(Format::Csv), seed, workers, &out),
        Command::ReplicateTable(a) => cmd_replicate(a, &cfg, format, seed, workers, &out),
        Command::SelectLambda(a) => cmd_select(a, &cfg, format.unwrap_or(Format::Json), seed, workers, &out),
    }
}

fn resolve_seed(explicit: Option<u64>) -> CliResult<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var("ATTRITION_PQR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("ATTRITION_PQR_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(42),
    }
}

struct Output {
    path: Option<PathBuf>,
}

impl Output {
    fn writer(&self) -> CliResult<Box<dyn Write>> {
        Ok(match &self.path {
            Some(p) => Box::new(File::create(p)?),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(flag: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|e: Error| Failure::usage(format!("--{flag}: {e}")))
}

fn load(args: &PanelArgs, cfg: &Settings) -> CliResult<PanelDataset> {
    let path = args
        .panel
        .clone()
        .or(cfg.panel.clone())
        .ok_or_else(|| Failure::usage("--panel is required"))?;
    let defaults = PanelSchema::default();
    let schema = PanelSchema {
        subject: args.subject_col.clone().or(cfg.subject_col.clone()).unwrap_or(defaults.subject),
        period: args.period_col.clone().or(cfg.period_col.clone()).unwrap_or(defaults.period),
        response: args.response_col.clone().or(cfg.response_col.clone()).unwrap_or(defaults.response),
        treat: args.treat_cols.clone().or(cfg.treat_cols.clone()).unwrap_or_default(),
        covars: args.covar_cols.clone().or(cfg.covar_cols.clone()).unwrap_or_default(),
    };
    let mut ds = load_panel(&path, &schema)?;
    if let Some(s) = args.streaming.clone().or(cfg.streaming.clone()) {
        ds = load_streaming(ds, s)?;
    }
    Ok(ds)
}

/// First stage for weighted estimators; MAR (with a warning) when nothing says otherwise.
fn first_stage(args: &PanelArgs, cfg: &Settings, ds: &PanelDataset) -> CliResult<PropensityFit> {
    let mechanism = match args.mechanism.clone().or(cfg.mechanism.clone()) {
        Some(m) => parse::<Mechanism>("mechanism", &m)?,
        None if !ds.streaming().is_empty() => Mechanism::HwStream,
        None => {
            log::warn!("no --mechanism and no streaming sample; assuming selection on observables (MAR)");
            Mechanism::Mar
        }
    };
    if mechanism == Mechanism::Unfeasible {
        return Err(Failure::usage("the unfeasible mechanism is only available in simulations"));
    }
    let mut opts = PropensityOptions::default();
    if let Some(f) = args.floor.or(cfg.floor) {
        opts.floor = f;
    }
    Ok(build_first_stage(ds, mechanism, &opts)?)
}

fn robust_params(kappa: Option<f64>, c: Option<f64>, draws: Option<usize>, cfg: &Settings) -> RobustParams {
    let d = RobustParams::default();
    RobustParams {
        kappa: kappa.or(cfg.kappa).unwrap_or(d.kappa),
        c: c.or(cfg.c).unwrap_or(d.c),
        draws: draws.or(cfg.draws).unwrap_or(d.draws),
    }
}

#[derive(serde::Serialize)]
struct EstimateOutput {
    #[serde(flatten)]
    fit: serde_json::Value,
    lambda_choice: Option<LambdaChoice>,
    mechanism: Option<Mechanism>,
    n_observed: usize,
}

fn cmd_estimate(
    a: EstimateArgs,
    cfg: &Settings,
    format: Format,
    seed: u64,
    workers: Option<usize>,
    out: &Output,
) -> CliResult<u8> {
    let kind: EstimatorKind = parse("estimator", &a.estimator.clone().or(cfg.estimator.clone()).unwrap_or("wpqr".into()))?;
    let tau = a.tau.or(cfg.tau).unwrap_or(0.5);
    let ds = load(&a.panel, cfg)?;
    let prop = if kind.weighted() { Some(first_stage(&a.panel, cfg, &ds)?) } else { None };

    let mut spec = EstimatorSpec::new(kind, tau);
    if let Some(p) = a.penalty.clone().or(cfg.penalty.clone()) {
        spec = spec.with_penalty(parse::<PenaltyForm>("penalty", &p)?);
    }
    let mut choice = None;
    if kind.penalized() {
        let lambda = a.lambda.or(cfg.lambda);
        let method = a.lambda_method.clone().or(cfg.lambda_method.clone());
        let c = match (lambda, method) {
            (Some(l), None) => LambdaChoice::fixed(l)?,
            (None, Some(m)) => match parse::<LambdaMethod>("lambda-method", &m)? {
                LambdaMethod::Robust => robust_lambda(
                    &ds,
                    prop.as_ref(),
                    tau,
                    robust_params(a.kappa, a.c, a.draws, cfg),
                    seed,
                    workers,
                )?,
                LambdaMethod::MleRatio => mle_lambda(&ds)?,
                LambdaMethod::Fixed => return Err(Failure::usage("--lambda-method fixed needs --lambda instead")),
            },
            (None, None) => LambdaChoice::fixed(1.0)?,
            (Some(_), Some(_)) => return Err(Failure::usage("use either --lambda or --lambda-method")),
        };
        spec = spec.with_lambda(c.value);
        choice = Some(c);
    } else if a.lambda.is_some() || a.lambda_method.is_some() {
        log::warn!("{kind} is not penalized; ignoring the lambda options");
    }

    let mut fit = estimate(&ds, &spec, prop.as_ref())?;
    if !a.no_se {
        match sandwich_covariance(&fit, &ds, prop.as_ref(), BandwidthRule::default()) {
            Ok(c) => fit.covariance = Some(c),
            Err(e) => log::warn!("standard errors unavailable: {e}"),
        }
    }
    let mut w = out.writer()?;
    match format {
        Format::Json => {
            let mut value: serde_json::Value = serde_json::from_str(&fit.to_json()?).map_err(Error::from)?;
            // Per-observation residuals are bulky and rarely wanted from the command line.
            if let Some(obj) = value.as_object_mut() {
                obj.remove("residuals");
            }
            let doc = EstimateOutput {
                fit: value,
                lambda_choice: choice,
                mechanism: prop.as_ref().map(|p| p.mechanism),
                n_observed: ds.n_observed(),
            };
            serde_json::to_writer_pretty(&mut w, &doc).map_err(Error::from)?;
            writeln!(w)?;
        }
        Format::Csv => fit.write_csv(&mut w)?,
        Format::Text => {
            writeln!(w, "{kind} at tau = {tau}, lambda = {}", fit.lambda_used)?;
            let se = fit.std_errors();
            if let Some(b0) = fit.intercept {
                writeln!(w, "{:<16} {:>12.6}", "intercept", b0)?;
            }
            for (j, name) in fit.slope_names.iter().enumerate() {
                let s = se.as_ref().map(|s| format!("({:.6})", s[j])).unwrap_or_default();
                writeln!(w, "{name:<16} {:>12.6} {s}", fit.vartheta[j])?;
            }
        }
    }
    Ok(0)
}

fn cmd_simulate(
    a: SimulateArgs,
    cfg: &Settings,
    format: Format,
    seed: u64,
    workers: Option<usize>,
    out: &Output,
) -> CliResult<u8> {
    let design: DesignId = parse("design", &a.design.clone().or(cfg.design.clone()).unwrap_or("d3".into()))?;
    let t_default = if design == DesignId::D6 { 2 } else { 5 };
    let config = DesignConfig::preset(design, a.n.or(cfg.n).unwrap_or(200), a.t.or(cfg.t).unwrap_or(t_default), seed)?;
    if let Some(reps) = a.mc_reps.or(cfg.mc_reps) {
        if reps == 0 {
            return Err(Failure::usage("--mc-reps must be at least 1"));
        }
        let tau = a.tau.or(cfg.tau).unwrap_or(0.5);
        let arms: Vec<McArm> = EstimatorKind::ALL.iter().map(|&k| McArm::benchmark(k, tau)).collect();
        let report = run_mc(&[Scenario::Design(config)], &arms, reps, seed, workers)?;
        write_report(&report, format, out)?;
        return Ok(0);
    }
    let g = generate_replication(&config, a.rep.unwrap_or(0))?;
    g.dataset.write_csv(out.writer()?)?;
    if let Some(p) = a.streaming_output.as_deref() {
        g.dataset.write_streaming_csv(File::create(p)?)?;
    }
    Ok(0)
}

fn write_report(report: &McReport, format: Format, out: &Output) -> CliResult<()> {
    let mut w = out.writer()?;
    match format {
        Format::Json => writeln!(w, "{}", report.to_json()?)?,
        Format::Csv if !report.lambda_series.is_empty() => report.write_lambda_csv(&mut w)?,
        Format::Csv => report.write_csv(&mut w)?,
        Format::Text => report.write_text(&mut w)?,
    }
    Ok(())
}

fn cmd_replicate(
    a: ReplicateArgs,
    cfg: &Settings,
    format: Option<Format>,
    seed: u64,
    workers: Option<usize>,
    out: &Output,
) -> CliResult<u8> {
    let table = a
        .table
        .clone()
        .or(cfg.table.clone())
        .ok_or_else(|| Failure::usage("--table is required"))?;
    let table: TableId = table.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let scale = a.scale.or(cfg.scale).unwrap_or(0.2);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Failure::usage(format!("--scale must be positive, got {scale}")));
    }
    // Figure 2 is plot data: CSV unless asked otherwise.
    let format = format.unwrap_or(if table == TableId::Fig2 { Format::Csv } else { Format::Text });
    let report = replicate_table(table, scale, seed, workers).map_err(|e| Failure {
        code: EXIT_SOLVER,
        message: format!("harness failure: {e}"),
    })?;
    write_report(&report, format, out)?;
    if report.all_pass() {
        Ok(0)
    } else {
        eprintln!("some compared cells are outside tolerance");
        Ok(EXIT_SOLVER)
    }
}

fn cmd_select(
    a: SelectArgs,
    cfg: &Settings,
    format: Format,
    seed: u64,
    workers: Option<usize>,
    out: &Output,
) -> CliResult<u8> {
    let method: LambdaMethod = parse("method", &a.method.clone().or(cfg.method.clone()).unwrap_or("robust".into()))?;
    let ds = load(&a.panel, cfg)?;
    let choice = match method {
        LambdaMethod::Robust => {
            let tau = a.tau.or(cfg.tau).unwrap_or(0.5);
            let prop = first_stage(&a.panel, cfg, &ds)?;
            robust_lambda(&ds, Some(&prop), tau, robust_params(a.kappa, a.c, a.draws, cfg), seed, workers)?
        }
        LambdaMethod::MleRatio => mle_lambda(&ds)?,
        LambdaMethod::Fixed => return Err(Failure::usage("--method must be robust or mle")),
    };
    let mut w = out.writer()?;
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &choice).map_err(Error::from)?;
            writeln!(w)?;
        }
        Format::Csv => writeln!(w, "method,value\n{},{}", choice.method, choice.value)?,
        Format::Text => writeln!(w, "{} lambda = {}", choice.method, choice.value)?,
    }
    Ok(0)
}
