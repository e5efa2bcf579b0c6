//! Single-delay feedback integration: dx/dt = f(x(t), h(x(t-r))) with
//! constant history, by the method of steps. Always fixed-step RK4 with the
//! step forced to divide the delay exactly; delayed values between grid
//! points come from cubic Hermite interpolation over stored states and
//! derivatives.

use super::{inf_norm, IntegrateError, IntegratorOpts, StepStats, Trajectory, TrajectoryStatus};
use crate::expr::EvalError;
use crate::model::ModelDef;

struct History {
    t0: f64,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
}

impl History {
    /// State at `tq`: constant history before `t0`, cubic Hermite between
    /// stored grid points. `tq` never exceeds the last stored time because
    /// the step never exceeds the delay.
    fn state_at(&self, tq: f64) -> Vec<f64> {
        if tq <= self.t0 {
            return self.states[0].clone();
        }
        let last = *self.times.last().expect("history holds the initial point");
        if tq >= last {
            return self.states.last().expect("history holds the initial point").clone();
        }
        let idx = self.times.partition_point(|&ti| ti <= tq);
        let (a, b) = (idx - 1, idx);
        let hseg = self.times[b] - self.times[a];
        let th = (tq - self.times[a]) / hseg;
        let (t2, t3) = (th * th, th * th * th);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + th;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        (0..self.states[a].len())
            .map(|j| {
                h00 * self.states[a][j]
                    + h10 * hseg * self.derivs[a][j]
                    + h01 * self.states[b][j]
                    + h11 * hseg * self.derivs[b][j]
            })
            .collect()
    }

    fn to_trajectory(&self, status: TrajectoryStatus, stats: StepStats) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            states: self.states.clone(),
            status,
            stats,
        }
    }
}

/// Integrate the delayed closed loop from constant history `x0`.
///
/// The effective step is `r / ceil(r / opts.step)` so grid points align
/// with delay multiples; `opts.method` is ignored (this engine is RK4 only).
pub fn integrate_dde(
    model: &ModelDef,
    r: f64,
    x0: &[f64],
    t_span: (f64, f64),
    opts: &IntegratorOpts,
) -> Result<Trajectory, IntegrateError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(IntegrateError::BadOptions {
            message: format!("delay must be positive and finite, got {r}"),
        });
    }
    let (t0, t1) = t_span;
    if t1 <= t0 || !t0.is_finite() || !t1.is_finite() {
        return Err(IntegrateError::BadOptions {
            message: format!("need finite t1 > t0, got ({t0}, {t1})"),
        });
    }
    if x0.len() != model.n() {
        return Err(IntegrateError::Dimension {
            message: format!(
                "history state has {} entries, model has {} states",
                x0.len(),
                model.n()
            ),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::Dimension {
            message: "history state must be finite".to_string(),
        });
    }
    {
        // Reuse the shared option validation (step/tolerance/bound checks).
        let mut probe = opts.clone();
        probe.method = super::Method::Rk4Fixed;
        probe.validate()?;
    }

    let h = r / (r / opts.step).ceil();
    let steps = (((t1 - t0) / h).ceil() as usize).max(1);
    let n = model.n();
    let m = model.m();

    let mut hist = History {
        t0,
        times: vec![t0],
        states: vec![x0.to_vec()],
        derivs: Vec::new(),
    };
    let mut u = vec![0.0; m];
    let mut evals = 0usize;

    // dx = f(x, h(x(t - r))), reading the delayed state from the history.
    macro_rules! eval_rhs {
        ($t:expr, $x:expr, $dx:expr, $stats:expr) => {{
            let xd = hist.state_at($t - r);
            let res: Result<(), EvalError> = model.h(&xd, &mut u).and_then(|()| model.f($x, &u, $dx));
            evals += 1;
            if let Err(source) = res {
                let mut stats: StepStats = $stats;
                stats.rhs_evals = evals;
                return Err(IntegrateError::Eval {
                    t: $t,
                    partial: hist.to_trajectory(TrajectoryStatus::Failed, stats),
                    source,
                });
            }
        }};
    }

    let stats_now = |accepted: usize, evals: usize| StepStats {
        accepted,
        rejected: 0,
        rhs_evals: evals,
        min_step: if accepted > 0 { h } else { 0.0 },
        max_step: if accepted > 0 { h } else { 0.0 },
    };

    let mut d0 = vec![0.0; n];
    eval_rhs!(t0, x0, &mut d0, stats_now(0, evals));
    hist.derivs.push(d0);

    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut xs = vec![0.0; n];

    for i in 0..steps {
        if i >= opts.max_steps {
            let t = hist.times[i];
            return Err(IntegrateError::MaxSteps {
                t,
                max_steps: opts.max_steps,
                partial: hist.to_trajectory(TrajectoryStatus::Failed, stats_now(i, evals)),
            });
        }
        let t = t0 + i as f64 * h;
        // k1 = f at the current grid point, already stored.
        k1.copy_from_slice(&hist.derivs[i]);
        for j in 0..n {
            xs[j] = x[j] + 0.5 * h * k1[j];
        }
        eval_rhs!(t + 0.5 * h, &xs, &mut k2, stats_now(i, evals));
        for j in 0..n {
            xs[j] = x[j] + 0.5 * h * k2[j];
        }
        eval_rhs!(t + 0.5 * h, &xs, &mut k3, stats_now(i, evals));
        for j in 0..n {
            xs[j] = x[j] + h * k3[j];
        }
        eval_rhs!(t + h, &xs, &mut k4, stats_now(i, evals));
        for j in 0..n {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_next = t0 + (i + 1) as f64 * h;
        hist.times.push(t_next);
        hist.states.push(x.clone());
        let norm = inf_norm(&x);
        if !norm.is_finite() || norm > opts.divergence_norm_bound {
            let mut stats = stats_now(i + 1, evals);
            stats.rhs_evals = evals;
            return Ok(hist.to_trajectory(TrajectoryStatus::Diverged, stats));
        }
        let mut d = vec![0.0; n];
        eval_rhs!(t_next, &x, &mut d, stats_now(i + 1, evals));
        hist.derivs.push(d);
    }

    Ok(hist.to_trajectory(TrajectoryStatus::ReachedTEnd, stats_now(steps, evals)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate, InputSignal, Method};
    use crate::model::load_model;

    fn scalar_gain(k: f64) -> ModelDef {
        load_model(&format!(
            "states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -{k} * x1\n"
        ))
        .unwrap()
    }

    #[test]
    fn small_gain_settles_for_unit_delay() {
        let model = scalar_gain(0.5);
        let traj = integrate_dde(&model, 1.0, &[1.0], (0.0, 40.0), &IntegratorOpts::default())
            .unwrap();
        assert_eq!(traj.status, TrajectoryStatus::ReachedTEnd);
        assert!(traj.last_state()[0].abs() < 1e-4, "x(40) = {}", traj.last_state()[0]);
    }

    #[test]
    fn step_is_forced_to_divide_the_delay() {
        let model = scalar_gain(0.5);
        let opts = IntegratorOpts {
            step: 0.3,
            ..IntegratorOpts::default()
        };
        let traj = integrate_dde(&model, 2.0, &[1.0], (0.0, 1.0), &opts).unwrap();
        assert_eq!(traj.times[1] - traj.times[0], 2.0 / 7.0);
    }

    #[test]
    fn large_gain_long_delay_keeps_ringing() {
        let model = scalar_gain(2.0);
        let traj = integrate_dde(&model, 5.0, &[1.0], (0.0, 200.0), &IntegratorOpts::default())
            .unwrap();
        let flips = traj
            .states
            .windows(2)
            .filter(|w| w[0][0].signum() != w[1][0].signum())
            .count();
        assert!(flips > 10, "expected sign-alternating response, got {flips} flips");
        assert!(
            traj.last_state()[0].abs() > 1e-4 || traj.status == TrajectoryStatus::Diverged,
            "must not settle: |x_end| = {}",
            traj.last_state()[0].abs()
        );
    }

    #[test]
    fn delay_beyond_span_reduces_to_frozen_input_ode() {
        let model = scalar_gain(0.5);
        let opts = IntegratorOpts {
            step: 0.1,
            ..IntegratorOpts::default()
        };
        let dde = integrate_dde(&model, 10.0, &[1.0], (0.0, 5.0), &opts).unwrap();
        // Delayed argument always reads the constant history, so the DDE is
        // exactly the ODE with u frozen at h(x0) = -0.5.
        let ode = integrate(
            &model,
            &[1.0],
            &InputSignal::Constant(vec![-0.5]),
            (0.0, 5.0),
            &IntegratorOpts {
                method: Method::Rk4Fixed,
                step: 0.1,
                ..IntegratorOpts::default()
            },
        )
        .unwrap();
        assert_eq!(dde.times.len(), ode.times.len());
        for (a, b) in dde.states.iter().zip(&ode.states) {
            assert_eq!(a, b, "identical arithmetic expected");
        }
    }

    #[test]
    fn divergence_detected() {
        // Unstable even without delay: x' = -x + 5x(t-r) has gain 5.
        let model = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = 5 * x1\n").unwrap();
        let traj = integrate_dde(&model, 0.5, &[1.0], (0.0, 50.0), &IntegratorOpts::default())
            .unwrap();
        assert_eq!(traj.status, TrajectoryStatus::Diverged);
    }

    #[test]
    fn bad_delay_rejected() {
        let model = scalar_gain(0.5);
        assert!(matches!(
            integrate_dde(&model, 0.0, &[1.0], (0.0, 1.0), &IntegratorOpts::default()),
            Err(IntegrateError::BadOptions { .. })
        ));
    }
}
