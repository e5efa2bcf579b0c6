//! Steady states under constant input: settle by integration, then polish
//! with a damped Newton step on f(x, u) = 0.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use super::{inf_norm, integrate_with_stop, InputSignal, IntegrateError, IntegratorOpts, TrajectoryStatus};
use crate::linear::Lu;
use crate::model::ModelDef;

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyOpts {
    pub integrator: IntegratorOpts,
    /// Give up settling past this horizon (soft: `converged = false`).
    pub t_max: f64,
    /// Settle when the vector field norm drops below this, scaled by
    /// `1 + |x|`: integration error grows with the state, so an absolute
    /// threshold is unreachable far from the origin...
    pub residual_tol: f64,
    /// ...and the state moved less than this (same scaling) over the
    /// trailing window.
    pub still_tol: f64,
    pub newton_max_iter: usize,
    pub newton_tol: f64,
}

impl Default for SteadyOpts {
    fn default() -> Self {
        SteadyOpts {
            integrator: IntegratorOpts::default(),
            t_max: 1e4,
            residual_tol: 1e-6,
            still_tol: 1e-8,
            newton_max_iter: 25,
            newton_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyMethod {
    Settled,
    NewtonPolished,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateResult {
    pub x: Vec<f64>,
    /// `max_i |f_i(x, u)|` at the returned state.
    pub residual: f64,
    pub method: SteadyMethod,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Error)]
pub enum SteadyError {
    #[error("trajectory diverged at t = {t} while settling")]
    Diverged { t: f64 },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// Integrate under constant input until the state is still and the vector
/// field small (status `Converged`), the horizon is hit (`ReachedTEnd`), or
/// the trajectory leaves the divergence bound. The converged trajectory's
/// final time is the settling time.
pub(crate) fn settle(
    model: &ModelDef,
    u_const: &[f64],
    x0: &[f64],
    opts: &SteadyOpts,
) -> Result<super::Trajectory, SteadyError> {
    let n = model.n();
    let input = InputSignal::Constant(u_const.to_vec());
    let mut fbuf = vec![0.0; n];
    let mut eval_failure = None;

    let mut stop = |traj: &super::Trajectory| -> bool {
        let t = traj.last_time();
        let t0 = traj.times[0];
        if t <= t0 {
            return false;
        }
        let x = traj.last_state();
        if let Err(e) = model.f(x, u_const, &mut fbuf) {
            eval_failure = Some((t, e));
            return true;
        }
        let scale = 1.0 + inf_norm(x);
        if inf_norm(&fbuf) >= opts.residual_tol * scale {
            return false;
        }
        let window = 0.05 * (t - t0);
        let prev = traj.state_at(t - window);
        let drift = x
            .iter()
            .zip(&prev)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        drift < opts.still_tol * scale
    };

    let run = integrate_with_stop(model, x0, &input, (0.0, opts.t_max), &opts.integrator, Some(&mut stop));
    let traj = match run {
        Ok(t) => t,
        Err(IntegrateError::MaxSteps { partial, .. }) => partial,
        Err(e) => return Err(e.into()),
    };
    if let Some((t, e)) = eval_failure {
        return Err(SteadyError::Integrate(IntegrateError::Eval {
            t,
            partial: traj,
            source: e,
        }));
    }
    if traj.status == TrajectoryStatus::Diverged {
        return Err(SteadyError::Diverged { t: traj.last_time() });
    }
    Ok(traj)
}

/// Integrate `dx/dt = f(x, u)` from `x0` until the state is still and the
/// vector field small, then Newton-polish. A singular Jacobian or a domain
/// error during polish is soft: the settled state is returned as-is.
pub fn find_steady_state(
    model: &ModelDef,
    u_const: &[f64],
    x0: &[f64],
    opts: &SteadyOpts,
) -> Result<SteadyStateResult, SteadyError> {
    let traj = settle(model, u_const, x0, opts)?;
    let settled = traj.status == TrajectoryStatus::Converged;

    let mut x = traj.last_state().to_vec();
    let mut residual = residual_norm(model, &x, u_const).unwrap_or(f64::INFINITY);
    let mut diagnostic = if settled {
        None
    } else {
        Some(format!(
            "did not settle by t = {} (status {:?}); returning the last state",
            traj.last_time(),
            traj.status
        ))
    };

    let mut method = SteadyMethod::Settled;
    if settled {
        match newton_polish(model, u_const, &x, residual, opts) {
            PolishOutcome::Improved { x: px, residual: pr } => {
                x = px;
                residual = pr;
                method = SteadyMethod::NewtonPolished;
            }
            PolishOutcome::Unchanged => {}
            PolishOutcome::Singular => {
                diagnostic = Some("singular Jacobian during polish; settled state returned".to_string());
            }
            PolishOutcome::EvalFailed(e) => {
                diagnostic = Some(format!("polish aborted ({e}); settled state returned"));
            }
        }
    }

    let converged = residual <= opts.residual_tol * (1.0 + inf_norm(&x));
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("residual {residual:e} above tolerance {:e}", opts.residual_tol));
    }
    Ok(SteadyStateResult {
        x,
        residual,
        method,
        converged,
        diagnostic,
    })
}

fn residual_norm(model: &ModelDef, x: &[f64], u: &[f64]) -> Result<f64, crate::expr::EvalError> {
    let mut f = vec![0.0; x.len()];
    model.f(x, u, &mut f)?;
    Ok(inf_norm(&f))
}

enum PolishOutcome {
    Improved { x: Vec<f64>, residual: f64 },
    Unchanged,
    Singular,
    EvalFailed(crate::expr::EvalError),
}

fn newton_polish(
    model: &ModelDef,
    u: &[f64],
    x0: &[f64],
    res0: f64,
    opts: &SteadyOpts,
) -> PolishOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut best = x0.to_vec();
    let mut best_res = res0;
    let mut fvec = vec![0.0; n];
    let mut fplus = vec![0.0; n];
    let mut fminus = vec![0.0; n];

    for _ in 0..opts.newton_max_iter {
        if let Err(e) = model.f(&x, u, &mut fvec) {
            return if best_res < res0 {
                PolishOutcome::Improved { x: best, residual: best_res }
            } else {
                PolishOutcome::EvalFailed(e)
            };
        }
        let res = inf_norm(&fvec);
        if res < best_res {
            best.copy_from_slice(&x);
            best_res = res;
        } else if res > best_res {
            break; // stalled; keep the best iterate
        }
        if best_res <= opts.newton_tol * (1.0 + inf_norm(&x)) {
            break;
        }

        // Central-difference Jacobian, column by column.
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.clone();
        for j in 0..n {
            let delta = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + delta;
            let ep = model.f(&xp, u, &mut fplus);
            xp[j] = x[j] - delta;
            let em = model.f(&xp, u, &mut fminus);
            xp[j] = x[j];
            if let Err(e) = ep.and(em) {
                return if best_res < res0 {
                    PolishOutcome::Improved { x: best, residual: best_res }
                } else {
                    PolishOutcome::EvalFailed(e)
                };
            }
            for i in 0..n {
                jac[(i, j)] = (fplus[i] - fminus[i]) / (2.0 * delta);
            }
        }
        let lu = Lu::factor(&jac);
        let Some(step) = lu.solve_vec(&fvec) else {
            return if best_res < res0 {
                PolishOutcome::Improved { x: best, residual: best_res }
            } else {
                PolishOutcome::Singular
            };
        };
        for j in 0..n {
            x[j] -= step[j];
        }
    }
    // Account for the final iterate.
    if let Ok(res) = residual_norm(model, &x, u) {
        if res < best_res {
            best = x;
            best_res = res;
        }
    }
    if best_res < res0 {
        PolishOutcome::Improved { x: best, residual: best_res }
    } else {
        PolishOutcome::Unchanged
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model;

    fn goodwin(v: f64, m: f64) -> ModelDef {
        load_model(&format!(
            "model goodwin\nstates x1 x2 x3\ninputs u1\nparam V = {v}\nparam m = {m}\n\
             dx1 = u1 - x1\ndx2 = x1 - x2\ndx3 = x2 - x3\ny1 = V / (1 + x3^m)\n"
        ))
        .unwrap()
    }

    #[test]
    fn scalar_linear_steady_state() {
        let model = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -0.5 * x1\n").unwrap();
        let r = find_steady_state(&model, &[3.0], &[0.0], &SteadyOpts::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-8, "x_u = {}", r.x[0]);
        assert!(r.residual <= 1e-6);
    }

    #[test]
    fn goodwin_chain_settles_to_diagonal() {
        let model = goodwin(1.0, 1.0);
        for c in [0.3, 1.0, 2.5] {
            let r = find_steady_state(&model, &[c], &[0.0, 0.0, 0.0], &SteadyOpts::default())
                .unwrap();
            assert!(r.converged);
            for v in &r.x {
                assert!((v - c).abs() < 1e-8, "expected ({c},{c},{c}), got {:?}", r.x);
            }
        }
    }

    #[test]
    fn polish_tightens_residual() {
        let model = goodwin(2.0, 4.0);
        let r = find_steady_state(&model, &[1.0], &[0.5, 0.5, 0.5], &SteadyOpts::default())
            .unwrap();
        assert_eq!(r.method, SteadyMethod::NewtonPolished);
        assert!(r.residual < 1e-10, "residual {}", r.residual);
    }

    #[test]
    fn blowup_is_a_divergence_error() {
        let model = load_model("states x1\ndx1 = x1^2\n").unwrap();
        let err = find_steady_state(&model, &[], &[1.0], &SteadyOpts::default()).unwrap_err();
        assert!(matches!(err, SteadyError::Diverged { .. }));
    }

    #[test]
    fn zero_field_settles_immediately() {
        let model = load_model("states x1\ndx1 = 0\n").unwrap();
        let r = find_steady_state(&model, &[], &[0.7], &SteadyOpts::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.x[0], 0.7);
        assert!(r.diagnostic.is_none());
    }

    #[test]
    fn singular_jacobian_is_soft() {
        // Both rows share the field 1 - x1 - x2, so the Jacobian is exactly
        // rank one everywhere; the settled state must survive unpolished.
        let model = load_model("states x1 x2\ndx1 = 1 - x1 - x2\ndx2 = 1 - x1 - x2\n").unwrap();
        let r = find_steady_state(&model, &[], &[0.0, 0.0], &SteadyOpts::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.method, SteadyMethod::Settled);
        assert!(r.diagnostic.unwrap().contains("singular Jacobian"));
        assert!((r.x[0] + r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slow_system_reports_nonconvergence() {
        // Relaxation time 1/eps with eps tiny: cannot settle by t_max = 1.
        let model = load_model("states x1\ndx1 = -0.0001 * x1 + 0.0001\n").unwrap();
        let opts = SteadyOpts {
            t_max: 1.0,
            ..SteadyOpts::default()
        };
        let r = find_steady_state(&model, &[], &[5.0], &opts).unwrap();
        assert!(!r.converged);
        assert!(r.diagnostic.is_some());
    }
}
