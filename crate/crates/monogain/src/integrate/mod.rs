//! Runge-Kutta integration over model dynamics: fixed-step RK4, adaptive
//! RKF45 with embedded error control, input signals (constant, piecewise
//! constant, closed loop through the output map), divergence detection,
//! steady-state settling, and a single-delay DDE engine.

pub mod dde;
pub mod steady;

pub use dde::integrate_dde;
pub use steady::{find_steady_state, SteadyError, SteadyMethod, SteadyOpts, SteadyStateResult};

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::model::ModelDef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed,
    Rkf45Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorOpts {
    pub method: Method,
    /// Fixed step for RK4; initial step for RKF45.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    pub divergence_norm_bound: f64,
}

impl Default for IntegratorOpts {
    fn default() -> Self {
        IntegratorOpts {
            method: Method::Rkf45Adaptive,
            step: 0.01,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_steps: 1_000_000,
            divergence_norm_bound: 1e9,
        }
    }
}

impl IntegratorOpts {
    fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(IntegrateError::BadOptions {
                message: format!("step must be positive and finite, got {}", self.step),
            });
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(IntegrateError::BadOptions {
                message: "tolerances must be positive".to_string(),
            });
        }
        if self.divergence_norm_bound.is_nan() || self.divergence_norm_bound <= 0.0 {
            return Err(IntegrateError::BadOptions {
                message: "divergence bound must be positive".to_string(),
            });
        }
        if self.max_steps == 0 {
            return Err(IntegrateError::BadOptions {
                message: "max_steps must be at least 1".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    /// A caller-supplied stopping criterion fired.
    Converged,
    ReachedTEnd,
    /// The sup norm crossed the divergence bound or went non-finite; the
    /// offending state is kept as the last sample.
    Diverged,
    /// Only seen on partial trajectories attached to errors.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub min_step: f64,
    pub max_step: f64,
}

/// A solution curve: `times` strictly increasing, one state per time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub status: TrajectoryStatus,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("trajectory holds at least the initial point")
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least the initial point")
    }

    /// Linear interpolation at `t`, clamped to the covered time range.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.last_time() {
            return self.last_state().to_vec();
        }
        let hi = self.times.partition_point(|&ti| ti <= t);
        let (t0, t1) = (self.times[hi - 1], self.times[hi]);
        let w = (t - t0) / (t1 - t0);
        self.states[hi - 1]
            .iter()
            .zip(&self.states[hi])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// CSV with header `t,x1,...,xn`, one row per sample, full-precision
    /// shortest-roundtrip numbers.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t}"));
            for v in x {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }
}

/// Input u(t) fed to the dynamics while integrating.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSignal {
    Constant(Vec<f64>),
    /// `values[j]` applies from `starts[j]` until the next start; the first
    /// value also covers times before `starts[0]`.
    PiecewiseConstant { starts: Vec<f64>, values: Vec<Vec<f64>> },
    /// u = h(x): unity feedback through the model output.
    ClosedLoop,
}

impl InputSignal {
    fn check(&self, model: &ModelDef) -> Result<(), IntegrateError> {
        let m = model.m();
        let bad = |got: usize| IntegrateError::Dimension {
            message: format!("input vector has {got} entries, model expects {m}"),
        };
        match self {
            InputSignal::Constant(u) => {
                if u.len() != m {
                    return Err(bad(u.len()));
                }
            }
            InputSignal::PiecewiseConstant { starts, values } => {
                if starts.len() != values.len() || values.is_empty() {
                    return Err(IntegrateError::Dimension {
                        message: format!(
                            "piecewise schedule needs matching nonempty starts/values, got {}/{}",
                            starts.len(),
                            values.len()
                        ),
                    });
                }
                if !starts.windows(2).all(|w| w[0] < w[1]) {
                    return Err(IntegrateError::Dimension {
                        message: "piecewise segment starts must be strictly increasing".to_string(),
                    });
                }
                for v in values {
                    if v.len() != m {
                        return Err(bad(v.len()));
                    }
                }
            }
            InputSignal::ClosedLoop => {}
        }
        Ok(())
    }

    fn eval(&self, t: f64, x: &[f64], model: &ModelDef, buf: &mut [f64]) -> Result<(), EvalError> {
        match self {
            InputSignal::Constant(u) => buf.copy_from_slice(u),
            InputSignal::PiecewiseConstant { starts, values } => {
                let j = starts.partition_point(|&s| s <= t).saturating_sub(1);
                buf.copy_from_slice(&values[j]);
            }
            InputSignal::ClosedLoop => model.h(x, buf)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error)]
pub enum IntegrateError {
    #[error("dimension mismatch: {message}")]
    Dimension { message: String },
    #[error("bad integrator options: {message}")]
    BadOptions { message: String },
    #[error("right-hand side evaluation failed at t = {t}: {source}")]
    Eval {
        t: f64,
        partial: Trajectory,
        source: EvalError,
    },
    #[error("adaptive step underflow at t = {t} (step {step:e})")]
    StepUnderflow { t: f64, step: f64, partial: Trajectory },
    #[error("step budget {max_steps} exhausted at t = {t}")]
    MaxSteps {
        t: f64,
        max_steps: usize,
        partial: Trajectory,
    },
}

/// Integrate `dx/dt = f(x, u(t))` over `t_span`.
pub fn integrate(
    model: &ModelDef,
    x0: &[f64],
    input: &InputSignal,
    t_span: (f64, f64),
    opts: &IntegratorOpts,
) -> Result<Trajectory, IntegrateError> {
    integrate_with_stop(model, x0, input, t_span, opts, None)
}

/// As [`integrate`], plus an optional callback run after every accepted
/// step; returning `true` stops with status [`TrajectoryStatus::Converged`].
pub(crate) fn integrate_with_stop(
    model: &ModelDef,
    x0: &[f64],
    input: &InputSignal,
    t_span: (f64, f64),
    opts: &IntegratorOpts,
    stop: Option<&mut dyn FnMut(&Trajectory) -> bool>,
) -> Result<Trajectory, IntegrateError> {
    if x0.len() != model.n() {
        return Err(IntegrateError::Dimension {
            message: format!(
                "initial state has {} entries, model has {} states",
                x0.len(),
                model.n()
            ),
        });
    }
    input.check(model)?;
    let mut u = vec![0.0; model.m()];
    let rhs = move |t: f64, x: &[f64], dx: &mut [f64]| {
        input.eval(t, x, model, &mut u)?;
        model.f(x, &u, dx)
    };
    run_ivp(rhs, x0, t_span, opts, stop)
}

/// Method-dispatching initial-value runner over a raw right-hand side.
pub(crate) fn run_ivp<F>(
    rhs: F,
    x0: &[f64],
    t_span: (f64, f64),
    opts: &IntegratorOpts,
    stop: Option<&mut dyn FnMut(&Trajectory) -> bool>,
) -> Result<Trajectory, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), EvalError>,
{
    opts.validate()?;
    let (t0, t1) = t_span;
    if t1 <= t0 || !t0.is_finite() || !t1.is_finite() {
        return Err(IntegrateError::BadOptions {
            message: format!("need finite t1 > t0, got ({t0}, {t1})"),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::Dimension {
            message: "initial state must be finite".to_string(),
        });
    }
    match opts.method {
        Method::Rk4Fixed => run_rk4(rhs, x0, t0, t1, opts, stop),
        Method::Rkf45Adaptive => run_rkf45(rhs, x0, t0, t1, opts, stop),
    }
}

pub(crate) fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn diverged(x: &[f64], bound: f64) -> bool {
    let norm = inf_norm(x);
    !norm.is_finite() || norm > bound
}

struct Recorder {
    traj: Trajectory,
    min_step: f64,
    max_step: f64,
}

impl Recorder {
    fn new(t0: f64, x0: &[f64]) -> Self {
        Recorder {
            traj: Trajectory {
                times: vec![t0],
                states: vec![x0.to_vec()],
                status: TrajectoryStatus::ReachedTEnd,
                stats: StepStats::default(),
            },
            min_step: f64::INFINITY,
            max_step: 0.0,
        }
    }

    fn accept(&mut self, t: f64, x: &[f64], h: f64) {
        self.traj.times.push(t);
        self.traj.states.push(x.to_vec());
        self.traj.stats.accepted += 1;
        self.min_step = self.min_step.min(h);
        self.max_step = self.max_step.max(h);
    }

    fn finish(mut self, status: TrajectoryStatus) -> Trajectory {
        self.traj.status = status;
        if self.traj.stats.accepted > 0 {
            self.traj.stats.min_step = self.min_step;
            self.traj.stats.max_step = self.max_step;
        }
        self.traj
    }
}

macro_rules! try_rhs {
    ($rec:expr, $evals:expr, $t:expr, $call:expr) => {
        match $call {
            Ok(()) => $evals += 1,
            Err(source) => {
                let mut traj = $rec.finish(TrajectoryStatus::Failed);
                traj.stats.rhs_evals = $evals;
                return Err(IntegrateError::Eval {
                    t: $t,
                    partial: traj,
                    source,
                });
            }
        }
    };
}

fn run_rk4<F>(
    mut rhs: F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOpts,
    mut stop: Option<&mut dyn FnMut(&Trajectory) -> bool>,
) -> Result<Trajectory, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), EvalError>,
{
    let span = t1 - t0;
    let steps = ((span / opts.step).ceil() as usize).max(1);
    let h = span / steps as f64;
    let n = x0.len();

    let mut rec = Recorder::new(t0, x0);
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut xs = vec![0.0; n];

    for i in 0..steps {
        if i >= opts.max_steps {
            let t = rec.traj.last_time();
            let mut traj = rec.finish(TrajectoryStatus::Failed);
            traj.stats.rhs_evals = evals;
            return Err(IntegrateError::MaxSteps {
                t,
                max_steps: opts.max_steps,
                partial: traj,
            });
        }
        let t = t0 + i as f64 * h;
        try_rhs!(rec, evals, t, rhs(t, &x, &mut k1));
        for j in 0..n {
            xs[j] = x[j] + 0.5 * h * k1[j];
        }
        try_rhs!(rec, evals, t + 0.5 * h, rhs(t + 0.5 * h, &xs, &mut k2));
        for j in 0..n {
            xs[j] = x[j] + 0.5 * h * k2[j];
        }
        try_rhs!(rec, evals, t + 0.5 * h, rhs(t + 0.5 * h, &xs, &mut k3));
        for j in 0..n {
            xs[j] = x[j] + h * k3[j];
        }
        try_rhs!(rec, evals, t + h, rhs(t + h, &xs, &mut k4));
        for j in 0..n {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_next = t0 + (i + 1) as f64 * h;
        rec.accept(t_next, &x, h);
        if diverged(&x, opts.divergence_norm_bound) {
            let mut traj = rec.finish(TrajectoryStatus::Diverged);
            traj.stats.rhs_evals = evals;
            return Ok(traj);
        }
        if let Some(cb) = stop.as_deref_mut() {
            if cb(&rec.traj) {
                let mut traj = rec.finish(TrajectoryStatus::Converged);
                traj.stats.rhs_evals = evals;
                return Ok(traj);
            }
        }
    }
    let mut traj = rec.finish(TrajectoryStatus::ReachedTEnd);
    traj.stats.rhs_evals = evals;
    Ok(traj)
}

fn run_rkf45<F>(
    mut rhs: F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOpts,
    mut stop: Option<&mut dyn FnMut(&Trajectory) -> bool>,
) -> Result<Trajectory, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), EvalError>,
{
    let span = t1 - t0;
    let underflow = 1e-14 * span;
    let n = x0.len();

    let mut rec = Recorder::new(t0, x0);
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut h = opts.step.min(span);
    let mut k = vec![vec![0.0; n]; 6];
    let mut xs = vec![0.0; n];
    let mut x5 = vec![0.0; n];
    let mut attempts = 0usize;

    // Fehlberg stage offsets and coefficients.
    const C: [f64; 6] = [0.0, 0.25, 3.0 / 8.0, 12.0 / 13.0, 1.0, 0.5];
    const A: [[f64; 5]; 6] = [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.25, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
        [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
        [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
        [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
    ];
    const B5: [f64; 6] = [
        16.0 / 135.0,
        0.0,
        6656.0 / 12825.0,
        28561.0 / 56430.0,
        -9.0 / 50.0,
        2.0 / 55.0,
    ];
    const B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];

    while t < t1 - 1e-14 * span.max(1.0) {
        if attempts >= opts.max_steps {
            let mut traj = rec.finish(TrajectoryStatus::Failed);
            traj.stats.rhs_evals = evals;
            return Err(IntegrateError::MaxSteps {
                t,
                max_steps: opts.max_steps,
                partial: traj,
            });
        }
        attempts += 1;
        h = h.min(t1 - t);

        for s in 0..6 {
            for j in 0..n {
                let mut acc = x[j];
                for (q, kq) in k.iter().enumerate().take(s) {
                    acc += h * A[s][q] * kq[j];
                }
                xs[j] = acc;
            }
            let ts = t + C[s] * h;
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            try_rhs!(rec, evals, ts, rhs(ts, &xs, &mut tail[0]));
        }

        let mut err = 0.0_f64;
        for j in 0..n {
            let mut acc5 = x[j];
            let mut acc4 = x[j];
            for s in 0..6 {
                acc5 += h * B5[s] * k[s][j];
                acc4 += h * B4[s] * k[s][j];
            }
            x5[j] = acc5;
            let scale = opts.abs_tol + opts.rel_tol * x[j].abs().max(acc5.abs());
            let e = (acc5 - acc4).abs() / scale;
            if e.is_nan() {
                err = f64::INFINITY;
            } else {
                err = err.max(e);
            }
        }

        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };

        if err <= 1.0 {
            t += h;
            x.copy_from_slice(&x5);
            rec.accept(t, &x, h);
            if diverged(&x, opts.divergence_norm_bound) {
                let mut traj = rec.finish(TrajectoryStatus::Diverged);
                traj.stats.rhs_evals = evals;
                return Ok(traj);
            }
            if let Some(cb) = stop.as_deref_mut() {
                if cb(&rec.traj) {
                    let mut traj = rec.finish(TrajectoryStatus::Converged);
                    traj.stats.rhs_evals = evals;
                    return Ok(traj);
                }
            }
            h *= factor;
        } else {
            rec.traj.stats.rejected += 1;
            h *= factor;
            if h < underflow {
                let mut traj = rec.finish(TrajectoryStatus::Failed);
                traj.stats.rhs_evals = evals;
                return Err(IntegrateError::StepUnderflow {
                    t,
                    step: h,
                    partial: traj,
                });
            }
        }
    }
    let mut traj = rec.finish(TrajectoryStatus::ReachedTEnd);
    traj.stats.rhs_evals = evals;
    Ok(traj)
}
