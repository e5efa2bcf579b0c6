//! Delayed negative feedback ẋ(t) = f(x(t), h(x(t−r))) and the
//! pseudo-oscillation experiment: starting from constant history at the
//! steady state x0 paired with a period-two point of the characteristic, the
//! solution swings between the two associated steady states, visiting each
//! as many times as the horizon allows. Not a claim of a true periodic
//! orbit, only of repeated δ-visits.

use serde::Serialize;
use thiserror::Error;

use crate::characteristic::{CharError, CharOpts, Characteristic};
use crate::integrate::steady::{settle, SteadyOpts};
use crate::integrate::{
    integrate_dde, IntegrateError, IntegratorOpts, SteadyError, Trajectory, TrajectoryStatus,
};
use crate::model::ModelDef;

/// Residual tolerance when verifying that (u0, u1) is a period-two pair.
pub const PAIR_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DelayError {
    #[error("delay must be positive and finite, got {r}")]
    BadDelay { r: f64 },
    #[error("dimension mismatch: {message}")]
    Dimension { message: String },
    #[error("(u0, u1) is not a period-two pair of the characteristic: {why}")]
    PairNotPeriodTwo { why: String },
    #[error("the open loop under constant input did not settle; cannot pick a delay")]
    NoSettle,
    #[error(transparent)]
    Characteristic(#[from] CharError),
    #[error("integration failed: {0}")]
    Integration(#[from] IntegrateError),
    #[error("settling failed: {0}")]
    Steady(#[from] SteadyError),
}

/// The delayed closed loop of a model: ẋ(t) = f(x(t), h(x(t−r))).
pub struct DelayProblem<'m> {
    model: &'m ModelDef,
    r: f64,
}

pub fn delay_closed_loop(model: &ModelDef, r: f64) -> Result<DelayProblem<'_>, DelayError> {
    if r <= 0.0 || !r.is_finite() {
        return Err(DelayError::BadDelay { r });
    }
    Ok(DelayProblem { model, r })
}

impl<'m> DelayProblem<'m> {
    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn model(&self) -> &ModelDef {
        self.model
    }

    /// Integrate from the constant history x(t) = x0 for t ≤ 0.
    pub fn integrate(
        &self,
        x0: &[f64],
        t_end: f64,
        opts: &IntegratorOpts,
    ) -> Result<Trajectory, IntegrateError> {
        integrate_dde(self.model, self.r, x0, (0.0, t_end), opts)
    }
}

/// Settling time of ẋ = f(x, u) from `x0` under constant `u`: the time the
/// settle criterion fires. None when the horizon ran out first.
pub fn open_loop_settling_time(
    model: &ModelDef,
    u: &[f64],
    x0: &[f64],
    opts: &SteadyOpts,
) -> Result<Option<f64>, DelayError> {
    let traj = settle(model, u, x0, opts)?;
    if traj.status == TrajectoryStatus::Converged {
        Ok(Some(traj.last_time()))
    } else {
        Ok(None)
    }
}

/// A delay large enough for each feedback leg to settle before the input
/// switches: max(20, 10x the open-loop settling time of the slowest leg).
pub fn recommended_delay(
    model: &ModelDef,
    u0: &[f64],
    u1: &[f64],
) -> Result<f64, DelayError> {
    let ctx = Characteristic::with_defaults(model);
    let (_, x0) = ctx.value_and_state(u1, &vec![0.0; model.n()])?;
    let (_, x1) = ctx.value_and_state(u0, &x0)?;
    let opts = SteadyOpts::default();
    let leg_a = open_loop_settling_time(model, u0, &x0, &opts)?.ok_or(DelayError::NoSettle)?;
    let leg_b = open_loop_settling_time(model, u1, &x1, &opts)?.ok_or(DelayError::NoSettle)?;
    Ok(20.0_f64.max(10.0 * leg_a.max(leg_b)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Visit {
    /// Time of closest approach within the dwell.
    pub time: f64,
    /// 0 = x0, 1 = x1.
    pub target: usize,
    /// Distance at closest approach.
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OscillationReport {
    pub r: f64,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    /// Steady state with h(x0) = u0 (the constant history).
    pub x0: Vec<f64>,
    /// Steady state with h(x1) = u1.
    pub x1: Vec<f64>,
    pub delta: f64,
    pub t_max: f64,
    pub visits_required: usize,
    /// Debounced visit log, sorted by time.
    pub visits: Vec<Visit>,
    /// Closest approach to [x0, x1] over the whole trajectory.
    pub min_distances: [f64; 2],
    pub visit_counts: [usize; 2],
    pub alternating: bool,
    pub pseudo_oscillation_detected: bool,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

/// Drive the delayed loop from constant history x0 (the steady state with
/// h(x0) = u0) and log δ-visits to x0 and x1. Detected = each target visited
/// at least `visits_required` times, alternating.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_oscillation_experiment(
    model: &ModelDef,
    u0: &[f64],
    u1: &[f64],
    r: f64,
    visits_required: usize,
    delta: Option<f64>,
    t_max: Option<f64>,
    opts: &IntegratorOpts,
) -> Result<OscillationReport, DelayError> {
    if r <= 0.0 || !r.is_finite() {
        return Err(DelayError::BadDelay { r });
    }
    let m = model.m();
    if u0.len() != m || u1.len() != m {
        return Err(DelayError::Dimension {
            message: format!("u0 and u1 must have {m} entries"),
        });
    }

    // Verify the pair: k(u0) = u1, k(u1) = u0, u0 distinct from u1.
    let ctx = Characteristic::new(model, CharOpts::default());
    let (k_u0, x1) = ctx.value_and_state(u0, &vec![0.0; model.n()])?;
    let (k_u1, x0) = ctx.value_and_state(u1, &x1)?;
    let d01 = diff_norm(u0, u1);
    if d01 <= 10.0 * PAIR_TOL {
        return Err(DelayError::PairNotPeriodTwo {
            why: format!("u0 and u1 coincide to within {:.1e}", 10.0 * PAIR_TOL),
        });
    }
    let r0 = diff_norm(&k_u0, u1);
    let r1 = diff_norm(&k_u1, u0);
    if r0 > PAIR_TOL || r1 > PAIR_TOL {
        return Err(DelayError::PairNotPeriodTwo {
            why: format!(
                "|k(u0) - u1| = {r0:.3e}, |k(u1) - u0| = {r1:.3e} exceed {PAIR_TOL:.1e}"
            ),
        });
    }

    let delta = delta.unwrap_or_else(|| 0.1 * diff_norm(&x0, &x1));
    let t_max = t_max.unwrap_or(20.0 * r);
    let trajectory = integrate_dde(model, r, &x0, (0.0, t_max), opts)?;

    let window = r / 100.0;
    let (visits0, min0) = ball_visits(&trajectory, &x0, 0, delta, window);
    let (visits1, min1) = ball_visits(&trajectory, &x1, 1, delta, window);
    let mut visits: Vec<Visit> = visits0.into_iter().chain(visits1).collect();
    visits.sort_by(|a, b| a.time.partial_cmp(&b.time).expect("finite times"));

    let counts = [
        visits.iter().filter(|v| v.target == 0).count(),
        visits.iter().filter(|v| v.target == 1).count(),
    ];
    let alternating = visits.windows(2).all(|w| w[0].target != w[1].target);
    let detected =
        counts[0] >= visits_required && counts[1] >= visits_required && alternating;

    Ok(OscillationReport {
        r,
        u0: u0.to_vec(),
        u1: u1.to_vec(),
        x0,
        x1,
        delta,
        t_max,
        visits_required,
        visits,
        min_distances: [min0, min1],
        visit_counts: counts,
        alternating,
        pseudo_oscillation_detected: detected,
        trajectory,
    })
}

/// Run the experiment over a grid of delays with shared settings; horizon
/// scales with each delay (t_max = 20 r) unless given.
pub fn pseudo_oscillation_sweep(
    model: &ModelDef,
    u0: &[f64],
    u1: &[f64],
    rs: &[f64],
    visits_required: usize,
    delta: Option<f64>,
    opts: &IntegratorOpts,
) -> Result<Vec<OscillationReport>, DelayError> {
    rs.iter()
        .map(|&r| {
            pseudo_oscillation_experiment(model, u0, u1, r, visits_required, delta, None, opts)
        })
        .collect()
}

/// Debounced δ-ball visits: contiguous in-ball dwells, merged when the gap
/// between them is shorter than `window`, each contributing its closest
/// approach. Also returns the global minimum distance to the target.
fn ball_visits(
    traj: &Trajectory,
    target: &[f64],
    index: usize,
    delta: f64,
    window: f64,
) -> (Vec<Visit>, f64) {
    struct Dwell {
        best_t: f64,
        best_d: f64,
        exit_t: f64,
    }
    let mut visits: Vec<Dwell> = Vec::new();
    let mut open = false;
    let mut min_dist = f64::INFINITY;

    for (&t, x) in traj.times.iter().zip(&traj.states) {
        let d = diff_norm(x, target);
        min_dist = min_dist.min(d);
        if d < delta {
            let reopen = !open
                && visits
                    .last()
                    .is_some_and(|v| t - v.exit_t < window);
            if open || reopen {
                let v = visits.last_mut().expect("dwell exists");
                if d < v.best_d {
                    v.best_d = d;
                    v.best_t = t;
                }
                v.exit_t = t;
            } else {
                visits.push(Dwell {
                    best_t: t,
                    best_d: d,
                    exit_t: t,
                });
            }
            open = true;
        } else if open {
            open = false;
            if let Some(v) = visits.last_mut() {
                v.exit_t = t;
            }
        }
    }
    (
        visits
            .into_iter()
            .map(|v| Visit {
                time: v.best_t,
                target: index,
                distance: v.best_d,
            })
            .collect(),
        min_dist,
    )
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}
