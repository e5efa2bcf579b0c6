//! Command-line front end: validate and simulate models, sample the
//! input-output characteristic, run the small-gain pipeline, analyze linear
//! triples exactly, and run delayed-feedback experiments. Outputs are CSV
//! and JSON files that embed the resolved configuration and seed, so a rerun
//! with the same flags is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use monogain::characteristic::{CharError, Characteristic, IterationClass, IterationResult};
use monogain::delay::{
    pseudo_oscillation_experiment, DelayError, OscillationReport, PAIR_TOL,
};
use monogain::extended::{
    char_seed_pairs, check_boundedness, find_extended_equilibria, BoundednessReport,
    EquilibriaOpts, EquilibriumReport, ExtendedError,
};
use monogain::integrate::{
    integrate, InputSignal, IntegrateError, IntegratorOpts, Method, Trajectory, TrajectoryStatus,
};
use monogain::linear::{is_quasi_monotone, small_gain_report, LinearError, SmallGainReport};
use monogain::model::{load_model, ModelDef, ModelError, ModelErrorKind};

const EXIT_IO: i32 = 1;
const EXIT_PARSE: i32 = 2;
const EXIT_VALIDATION: i32 = 3;
const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser)]
#[command(
    name = "monogain",
    version,
    about = "Monotone feedback system analysis: characteristics, small-gain verdicts, delay experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a model file, printing its dimensions and orders.
    Validate {
        /// Model file path
        model: PathBuf,
    },
    /// Integrate the model under a constant input and write a trajectory CSV.
    Simulate {
        model: PathBuf,
        /// Initial state, comma-separated (default: zeros)
        #[arg(long)]
        x0: Option<String>,
        /// Constant input, comma-separated (default: zeros)
        #[arg(long)]
        u: Option<String>,
        /// Integration horizon
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        /// rk4 or rkf45
        #[arg(long, default_value = "rkf45")]
        method: String,
        /// Fixed step (rk4) / initial step (rkf45)
        #[arg(long)]
        step: Option<f64>,
        /// Relative tolerance for the adaptive integrator
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sample k(u) on a grid, run the iteration u+ = k(u), write CSV + JSON.
    Characteristic {
        model: PathBuf,
        /// Grid points: scalars "0,0.5,1" or vectors "0 0;1 2" (default: 21
        /// points along the diagonal of [0,2]^m)
        #[arg(long)]
        grid: Option<String>,
        /// Iteration start (default: zeros)
        #[arg(long)]
        u0: Option<String>,
        /// Iteration budget
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Iteration convergence tolerance
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Full pipeline: k^2 solutions, boundedness sampling, extended
    /// equilibria, and the convergence verdict.
    Smallgain {
        model: PathBuf,
        /// Iteration seeds for k^2: scalars "0,1,5" or vectors "0 0;1 2"
        /// (scalars broadcast across input channels)
        #[arg(long, default_value = "0,1,5")]
        u_seeds: String,
        /// k^2 solve tolerance
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Boundedness sampling trials
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Boundedness sampling horizon
        #[arg(long, default_value_t = 40.0)]
        horizon: f64,
        /// Boundedness sup-norm bound
        #[arg(long, default_value_t = 1e6)]
        bound: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Exact spectral-radius and Hurwitz analysis of a linear model.
    Linear {
        model: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Delayed-feedback pseudo-oscillation experiments over a grid of delays.
    Dde {
        model: PathBuf,
        /// Delay grid, comma-separated (default: "5,20,80")
        #[arg(long, default_value = "5,20,80")]
        r: String,
        /// First period-two point (default: derived from the iteration)
        #[arg(long)]
        u0: Option<String>,
        /// Second period-two point (default: derived from the iteration)
        #[arg(long)]
        u1: Option<String>,
        /// Required delta-visits per target
        #[arg(long, default_value_t = 3)]
        visits: usize,
        /// Visit ball radius (default: 10% of the target separation)
        #[arg(long)]
        delta: Option<f64>,
        /// Horizon per delay (default: 20 r)
        #[arg(long)]
        tmax: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum CliError {
    Io(String),
    Parse(String),
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Parse(m) | CliError::Validation(m)
            | CliError::Numerical(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e.kind() {
            ModelErrorKind::Parse => CliError::Parse(e.to_string()),
            ModelErrorKind::Validation => CliError::Validation(e.to_string()),
        }
    }
}

impl From<LinearError> for CliError {
    fn from(e: LinearError) -> Self {
        match e {
            LinearError::DimensionMismatch { .. } | LinearError::NonFinite
            | LinearError::TooLarge { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CharError> for CliError {
    fn from(e: CharError) -> Self {
        match e {
            CharError::Dimension { .. } => CliError::Validation(e.to_string()),
            CharError::NoConvergence { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<IntegrateError> for CliError {
    fn from(e: IntegrateError) -> Self {
        match e {
            IntegrateError::Dimension { .. } | IntegrateError::BadOptions { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ExtendedError> for CliError {
    fn from(e: ExtendedError) -> Self {
        match e {
            ExtendedError::Model(m) => m.into(),
            ExtendedError::Dimension { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DelayError> for CliError {
    fn from(e: DelayError) -> Self {
        match e {
            DelayError::BadDelay { .. } | DelayError::Dimension { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Validate { model } => cmd_validate(&model),
        Cmd::Simulate {
            model,
            x0,
            u,
            horizon,
            method,
            step,
            tol,
            out,
        } => cmd_simulate(&model, x0, u, horizon, &method, step, tol, &out),
        Cmd::Characteristic {
            model,
            grid,
            u0,
            iters,
            tol,
            out,
        } => cmd_characteristic(&model, grid, u0, iters, tol, &out),
        Cmd::Smallgain {
            model,
            u_seeds,
            tol,
            trials,
            horizon,
            bound,
            seed,
            out,
        } => cmd_smallgain(&model, &u_seeds, tol, trials, horizon, bound, seed, &out),
        Cmd::Linear { model, out } => cmd_linear(&model, &out),
        Cmd::Dde {
            model,
            r,
            u0,
            u1,
            visits,
            delta,
            tmax,
            out,
        } => cmd_dde(&model, &r, u0, u1, visits, delta, tmax, &out),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn read_model(path: &Path) -> Result<ModelDef, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    Ok(load_model(&text)?)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serialization failed: {e}")))?;
    body.push('\n');
    write_text(path, &body)
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| {
                CliError::Validation(format!("{what}: `{t}` is not a number"))
            })
        })
        .collect()
}

/// "0,1,5" (scalars, broadcast when m > 1) or "0 0;1 2" (vectors).
fn parse_points(s: &str, m: usize, what: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut points = Vec::new();
    for group in s.split(';').map(str::trim).filter(|g| !g.is_empty()) {
        let entries: Vec<&str> = group
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if entries.len() == m {
            let mut v = Vec::with_capacity(m);
            for t in entries {
                v.push(t.parse::<f64>().map_err(|_| {
                    CliError::Validation(format!("{what}: `{t}` is not a number"))
                })?);
            }
            points.push(v);
        } else if !group.contains(char::is_whitespace) {
            // scalar list: each entry broadcast to all channels
            for t in entries {
                let x = t.parse::<f64>().map_err(|_| {
                    CliError::Validation(format!("{what}: `{t}` is not a number"))
                })?;
                points.push(vec![x; m]);
            }
        } else {
            return Err(CliError::Validation(format!(
                "{what}: point `{group}` must have {m} entries"
            )));
        }
    }
    if points.is_empty() {
        return Err(CliError::Validation(format!("{what}: no points given")));
    }
    Ok(points)
}

fn parse_fixed_vec(
    s: Option<String>,
    len: usize,
    what: &str,
) -> Result<Vec<f64>, CliError> {
    match s {
        None => Ok(vec![0.0; len]),
        Some(s) => {
            let v = parse_floats(&s, what)?;
            if v.len() != len {
                return Err(CliError::Validation(format!(
                    "{what} must have {len} entries, got {}",
                    v.len()
                )));
            }
            Ok(v)
        }
    }
}

fn order_string(signs: &[i8]) -> String {
    signs
        .iter()
        .map(|&s| if s >= 0 { '+' } else { '-' })
        .collect()
}

fn cmd_validate(path: &Path) -> Result<(), CliError> {
    let model = read_model(path)?;
    let tag = match model.linear() {
        Some(t) => {
            if is_quasi_monotone(&t.a, model.order_states())? {
                "monotone-candidate"
            } else {
                "not-quasi-monotone"
            }
        }
        None => "monotone-candidate",
    };
    println!("n={} m={} {}", model.n(), model.m(), tag);
    println!(
        "model `{}`: order_states={} order_inputs={}",
        model.name(),
        order_string(model.order_states().signs()),
        order_string(model.order_inputs().signs()),
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateConfig {
    command: &'static str,
    model: String,
    x0: Vec<f64>,
    u: Vec<f64>,
    horizon: f64,
    method: String,
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
}

#[derive(Serialize)]
struct SimulateRun {
    config: SimulateConfig,
    status: String,
    final_time: f64,
    final_state: Vec<f64>,
    csv: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    path: &Path,
    x0: Option<String>,
    u: Option<String>,
    horizon: f64,
    method: &str,
    step: Option<f64>,
    tol: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let model = read_model(path)?;
    let x0 = parse_fixed_vec(x0, model.n(), "--x0")?;
    let u = parse_fixed_vec(u, model.m(), "--u")?;
    let method_enum = match method {
        "rk4" => Method::Rk4Fixed,
        "rkf45" => Method::Rkf45Adaptive,
        other => {
            return Err(CliError::Validation(format!(
                "--method must be rk4 or rkf45, got `{other}`"
            )))
        }
    };
    let defaults = IntegratorOpts::default();
    let opts = IntegratorOpts {
        method: method_enum,
        step: step.unwrap_or(defaults.step),
        rel_tol: tol.unwrap_or(defaults.rel_tol),
        abs_tol: tol.map_or(defaults.abs_tol, |t| t * 1e-2),
        ..defaults
    };

    ensure_out(out)?;
    let csv_path = out.join("trajectory.csv");
    let json_path = out.join("simulate.json");
    let config = SimulateConfig {
        command: "simulate",
        model: path.display().to_string(),
        x0: x0.clone(),
        u: u.clone(),
        horizon,
        method: method.to_string(),
        step: opts.step,
        rel_tol: opts.rel_tol,
        abs_tol: opts.abs_tol,
    };

    let finish = |traj: &Trajectory, status: String, code: Option<CliError>| -> Result<(), CliError> {
        write_text(&csv_path, &traj.to_csv())?;
        write_json(
            &json_path,
            &SimulateRun {
                config,
                status,
                final_time: traj.last_time(),
                final_state: traj.last_state().to_vec(),
                csv: csv_path.display().to_string(),
            },
        )?;
        println!("wrote {} and {}", csv_path.display(), json_path.display());
        match code {
            None => Ok(()),
            Some(e) => Err(e),
        }
    };

    match integrate(&model, &x0, &InputSignal::Constant(u.clone()), (0.0, horizon), &opts) {
        Ok(traj) => {
            if traj.status == TrajectoryStatus::Diverged {
                let msg = format!("trajectory diverged at t = {}", traj.last_time());
                finish(&traj, format!("numerical-failure: {msg}"), Some(CliError::Numerical(msg)))
            } else {
                finish(&traj, "ok".to_string(), None)
            }
        }
        Err(e) => {
            let msg = e.to_string();
            match e {
                IntegrateError::Eval { partial, .. }
                | IntegrateError::StepUnderflow { partial, .. }
                | IntegrateError::MaxSteps { partial, .. } => finish(
                    &partial,
                    format!("numerical-failure: {msg}"),
                    Some(CliError::Numerical(msg)),
                ),
                other => Err(other.into()),
            }
        }
    }
}

#[derive(Serialize)]
struct CharacteristicConfig {
    command: &'static str,
    model: String,
    grid: Vec<Vec<f64>>,
    u0: Vec<f64>,
    iters: usize,
    tol: f64,
}

#[derive(Serialize)]
struct CharacteristicRun {
    config: CharacteristicConfig,
    status: String,
    grid_values: Vec<Vec<f64>>,
    anti_monotone: Option<monogain::characteristic::AntiMonotoneVerdict>,
    iteration: Option<IterationResult>,
}

fn default_grid(m: usize) -> Vec<Vec<f64>> {
    (0..21)
        .map(|i| vec![2.0 * f64::from(i) / 20.0; m])
        .collect()
}

fn kgrid_csv(m: usize, grid: &[Vec<f64>], values: &[Vec<f64>]) -> String {
    let mut csv = String::new();
    for j in 1..=m {
        let _ = write!(csv, "u{j},");
    }
    let mut head2 = (1..=m).map(|j| format!("k{j}")).collect::<Vec<_>>().join(",");
    head2.push('\n');
    csv.push_str(&head2);
    for (u, k) in grid.iter().zip(values) {
        let row = u
            .iter()
            .chain(k.iter())
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        csv.push_str(&row);
        csv.push('\n');
    }
    csv
}

fn cmd_characteristic(
    path: &Path,
    grid: Option<String>,
    u0: Option<String>,
    iters: usize,
    tol: f64,
    out: &Path,
) -> Result<(), CliError> {
    let model = read_model(path)?;
    let m = model.m();
    if m == 0 {
        return Err(CliError::Validation(
            "model has no inputs: the characteristic is undefined".to_string(),
        ));
    }
    let grid = match grid {
        Some(s) => parse_points(&s, m, "--grid")?,
        None => default_grid(m),
    };
    let u0 = parse_fixed_vec(u0, m, "--u0")?;

    ensure_out(out)?;
    let ctx = Characteristic::with_defaults(&model);
    let mut grid_values: Vec<Vec<f64>> = Vec::new();
    let mut status = "ok".to_string();
    let mut failure: Option<CliError> = None;

    let mut seed = vec![0.0; model.n()];
    for u in &grid {
        match ctx.value_and_state(u, &seed) {
            Ok((y, x_u)) => {
                grid_values.push(y);
                seed = x_u;
            }
            Err(e) => {
                status = format!("numerical-failure: {e}");
                failure = Some(e.into());
                break;
            }
        }
    }

    let anti = if failure.is_none() {
        match ctx.check_antimonotone(&grid) {
            Ok(v) => Some(v),
            Err(e) => {
                status = format!("numerical-failure: {e}");
                failure = Some(e.into());
                None
            }
        }
    } else {
        None
    };

    let iteration = if failure.is_none() {
        match ctx.iterate(&u0, iters, tol) {
            Ok(r) => Some(r),
            Err(e) => {
                status = format!("numerical-failure: {e}");
                failure = Some(e.into());
                None
            }
        }
    } else {
        None
    };

    let kgrid_path = out.join("kgrid.csv");
    write_text(&kgrid_path, &kgrid_csv(m, &grid[..grid_values.len()], &grid_values))?;
    if let Some(it) = &iteration {
        write_text(&out.join("orbit.csv"), &it.orbit_csv())?;
    }
    let json_path = out.join("characteristic.json");
    write_json(
        &json_path,
        &CharacteristicRun {
            config: CharacteristicConfig {
                command: "characteristic",
                model: path.display().to_string(),
                grid,
                u0,
                iters,
                tol,
            },
            status,
            grid_values,
            anti_monotone: anti,
            iteration: iteration.clone(),
        },
    )?;
    if let Some(it) = &iteration {
        let what = match it.classification {
            IterationClass::FixedPoint => "fixed point",
            IterationClass::PeriodTwo => "period-two orbit",
            IterationClass::Divergent => "divergent orbit",
            IterationClass::Undecided => "undecided orbit",
        };
        println!(
            "iteration: {what} after {} steps; outputs under {}",
            it.iterations,
            out.display()
        );
    } else {
        println!("partial outputs under {}", out.display());
    }
    match failure {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

#[derive(Serialize)]
struct SmallgainConfig {
    command: &'static str,
    model: String,
    u_seeds: Vec<Vec<f64>>,
    tol: f64,
    equilibria_tol: f64,
    trials: usize,
    horizon: f64,
    bound: f64,
    seed: u64,
}

#[derive(Serialize)]
struct SmallgainRun {
    config: SmallgainConfig,
    status: String,
    k2: Option<monogain::characteristic::K2SolutionSet>,
    boundedness: Option<BoundednessReport>,
    equilibria: Option<EquilibriumReport>,
    verdict: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_smallgain(
    path: &Path,
    u_seeds: &str,
    tol: f64,
    trials: usize,
    horizon: f64,
    bound: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let model = read_model(path)?;
    if model.m() == 0 {
        return Err(CliError::Validation(
            "model has no inputs: nothing to close a loop over".to_string(),
        ));
    }
    let seeds = parse_points(u_seeds, model.m(), "--u-seeds")?;
    ensure_out(out)?;
    let json_path = out.join("smallgain.json");
    let config = SmallgainConfig {
        command: "smallgain",
        model: path.display().to_string(),
        u_seeds: seeds.clone(),
        tol,
        equilibria_tol: 1e-10,
        trials,
        horizon,
        bound,
        seed,
    };

    let ctx = Characteristic::with_defaults(&model);
    let mut run = SmallgainRun {
        config,
        status: "ok".to_string(),
        k2: None,
        boundedness: None,
        equilibria: None,
        verdict: String::new(),
    };

    let err = (|| -> Result<(), CliError> {
        let k2 = ctx.find_k2_solutions(&seeds, tol).map_err(CliError::from)?;
        run.k2 = Some(k2.clone());
        let pairs = char_seed_pairs(&ctx, &k2).map_err(CliError::from)?;
        let bounded = check_boundedness(&model, trials, horizon, bound, seed)?;
        run.boundedness = Some(bounded.clone());
        let eq_opts = EquilibriaOpts {
            rng_seed: seed.wrapping_add(1),
            ..EquilibriaOpts::default()
        };
        let report = find_extended_equilibria(&model, &pairs, Some(&bounded), &eq_opts)?;
        run.verdict = report.verdict.clone();
        run.equilibria = Some(report);
        Ok(())
    })()
    .err();

    if let Some(e) = &err {
        run.status = format!("numerical-failure: {}", e.message());
        run.verdict = "analysis incomplete".to_string();
    }
    write_json(&json_path, &run)?;
    println!("{}", run.verdict);
    println!("wrote {}", json_path.display());
    match err {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

#[derive(Serialize)]
struct LinearConfig {
    command: &'static str,
    model: String,
}

#[derive(Serialize)]
struct LinearRun {
    config: LinearConfig,
    report: SmallGainReport,
}

fn cmd_linear(path: &Path, out: &Path) -> Result<(), CliError> {
    let model = read_model(path)?;
    let Some(t) = model.linear() else {
        return Err(CliError::Validation(
            "`linear` needs a model with `linear A/B/C` matrices".to_string(),
        ));
    };
    // Reversed input channels are conjugated away so the gain and sign
    // checks see increasing inputs: B <- B D, C <- D C with D = diag(signs).
    let mut b = t.b.clone();
    let mut c = t.c.clone();
    for (j, &s) in model.order_inputs().signs().iter().enumerate() {
        if s < 0 {
            for i in 0..b.nrows() {
                b[(i, j)] = -b[(i, j)];
            }
            for k in 0..c.ncols() {
                c[(j, k)] = -c[(j, k)];
            }
        }
    }
    let report = small_gain_report(&t.a, &b, &c, model.order_states())?;
    ensure_out(out)?;
    let json_path = out.join("linear.json");
    write_json(
        &json_path,
        &LinearRun {
            config: LinearConfig {
                command: "linear",
                model: path.display().to_string(),
            },
            report: report.clone(),
        },
    )?;
    println!("rho(K) = {}", report.rho_k);
    println!("{}", report.verdict);
    println!("wrote {}", json_path.display());
    Ok(())
}

#[derive(Serialize)]
struct DdeConfig {
    command: &'static str,
    model: String,
    r: Vec<f64>,
    u0: Vec<f64>,
    u1: Vec<f64>,
    pair_source: String,
    visits_required: usize,
    delta: Option<f64>,
    t_max: Option<f64>,
    pair_tol: f64,
}

#[derive(Serialize)]
struct DdePoint {
    config: DdeConfig,
    status: String,
    report: OscillationReport,
}

#[allow(clippy::too_many_arguments)]
fn cmd_dde(
    path: &Path,
    r_list: &str,
    u0: Option<String>,
    u1: Option<String>,
    visits: usize,
    delta: Option<f64>,
    tmax: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let model = read_model(path)?;
    let m = model.m();
    if m == 0 {
        return Err(CliError::Validation(
            "model has no inputs: no feedback to delay".to_string(),
        ));
    }
    let rs = parse_floats(r_list, "--r")?;
    if rs.is_empty() {
        return Err(CliError::Validation("--r: no delays given".to_string()));
    }

    let (u0, u1, pair_source) = match (u0, u1) {
        (Some(a), Some(b)) => (
            parse_fixed_vec(Some(a), m, "--u0")?,
            parse_fixed_vec(Some(b), m, "--u1")?,
            "flags".to_string(),
        ),
        (None, None) => {
            let ctx = Characteristic::with_defaults(&model);
            let it = ctx.iterate(&vec![0.0; m], 500, 1e-9).map_err(CliError::from)?;
            match it.period_two {
                Some((a, b)) => (a, b, "iteration from 0".to_string()),
                None => {
                    return Err(CliError::Numerical(format!(
                        "no period-two pair: the iteration from 0 is {:?}; pass --u0/--u1",
                        it.classification
                    )))
                }
            }
        }
        _ => {
            return Err(CliError::Validation(
                "--u0 and --u1 must be given together".to_string(),
            ))
        }
    };

    ensure_out(out)?;
    let opts = IntegratorOpts::default();
    for &r in &rs {
        let report =
            pseudo_oscillation_experiment(&model, &u0, &u1, r, visits, delta, tmax, &opts)?;
        let csv_path = out.join(format!("dde_r{r}.csv"));
        write_text(&csv_path, &report.trajectory.to_csv())?;
        let json_path = out.join(format!("dde_r{r}.json"));
        let detected = report.pseudo_oscillation_detected;
        let counts = report.visit_counts;
        write_json(
            &json_path,
            &DdePoint {
                config: DdeConfig {
                    command: "dde",
                    model: path.display().to_string(),
                    r: rs.clone(),
                    u0: u0.clone(),
                    u1: u1.clone(),
                    pair_source: pair_source.clone(),
                    visits_required: visits,
                    delta,
                    t_max: tmax,
                    pair_tol: PAIR_TOL,
                },
                status: "ok".to_string(),
                report,
            },
        )?;
        println!(
            "r = {r}: pseudo-oscillation {} (visits {}/{}), wrote {}",
            if detected { "detected" } else { "not detected" },
            counts[0],
            counts[1],
            json_path.display()
        );
    }
    Ok(())
}
