//! Cascading two copies of a system turns negative feedback into a monotone
//! problem: the extension ẋ = f(x,u), ż = f(z,h(x)) with output h(z) is
//! monotone under the product of the state order with its reverse, and its
//! closed loop ẋ = f(x,h(z)), ż = f(z,h(x)) restricts to the original
//! feedback system on the diagonal x = z. A unique extended equilibrium plus
//! bounded solutions yields global convergence of the original loop.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::characteristic::{CharError, Characteristic, K2SolutionSet};
use crate::expr::{EvalError, ExprAst};
use crate::integrate::{
    integrate, InputSignal, IntegrateError, IntegratorOpts, Trajectory, TrajectoryStatus,
};
use crate::linear::Lu;
use crate::model::{Dynamics, LinearTriple, ModelDef, ModelError};
use crate::order::{default_box, OrthantOrder};

#[derive(Debug, Error)]
pub enum ExtendedError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("integration failed: {0}")]
    Integration(#[from] IntegrateError),
    #[error(transparent)]
    Characteristic(#[from] CharError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("dimension mismatch: {message}")]
    Dimension { message: String },
}

/// An (x, z) pair of base-system states: the seed and solution unit of the
/// extended equilibrium search.
pub type StatePair = (Vec<f64>, Vec<f64>);

/// The open-loop cascade of two copies of `base`: states (x, z), dynamics
/// ẋ = f(x,u), ż = f(z,h(x)), output h(z).
pub struct ExtendedModel {
    pub base: ModelDef,
    pub model: ModelDef,
}

impl ExtendedModel {
    /// State dimension of the base system (the extension has twice this).
    pub fn base_dim(&self) -> usize {
        self.base.n()
    }

    /// Split an extended state into its x and z halves.
    pub fn split<'a>(&self, xi: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        assert_eq!(xi.len(), 2 * self.base_dim(), "extended state dimension");
        xi.split_at(self.base_dim())
    }

    /// Sampling box that keeps both halves in the base system's natural
    /// domain (the z half has a reversed order but the same domain).
    pub fn natural_box(&self) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = default_box(self.base.order_states());
        let mut lo2 = lo.clone();
        lo2.extend_from_slice(&lo);
        let mut hi2 = hi.clone();
        hi2.extend_from_slice(&hi);
        (lo2, hi2)
    }
}

fn state_renamer<'a>(names: &'a [String], suffix: &'a str) -> impl Fn(&str) -> Option<String> + 'a {
    move |v: &str| {
        if names.iter().any(|s| s == v) {
            Some(format!("{v}{suffix}"))
        } else {
            None
        }
    }
}

/// Substitute every input variable by the corresponding output expression.
fn substitute_inputs(e: &ExprAst, inputs: &[String], outputs: &[ExprAst]) -> ExprAst {
    e.substitute(&|v: &str| {
        inputs
            .iter()
            .position(|nm| nm == v)
            .map(|k| outputs[k].clone())
    })
}

fn empty_b_c(n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::zeros(n, 0), DMatrix::zeros(0, n))
}

/// Close the feedback loop u = y: the autonomous system ẋ = f(x, h(x)).
pub fn build_closed_loop(model: &ModelDef) -> Result<ModelDef, ModelError> {
    let dynamics = match model.dynamics() {
        Dynamics::Linear(t) => {
            // f(x, -Cx) = (A - BC) x
            let (b, c) = empty_b_c(t.n());
            Dynamics::Linear(LinearTriple::new(&t.a - &t.b * &t.c, b, c)?)
        }
        Dynamics::Expressions { rhs, outputs } => Dynamics::Expressions {
            rhs: rhs
                .iter()
                .map(|e| substitute_inputs(e, model.input_names(), outputs))
                .collect(),
            outputs: Vec::new(),
        },
    };
    ModelDef::from_parts(
        format!("{}_closed", model.name()),
        model.state_names().to_vec(),
        Vec::new(),
        model.params().to_vec(),
        dynamics,
        model.order_states().clone(),
        OrthantOrder::all_plus(0),
    )
}

fn suffixed_names(names: &[String], suffix: &str) -> Vec<String> {
    names.iter().map(|s| format!("{s}{suffix}")).collect()
}

/// The open-loop cascade: ẋ = f(x,u), ż = f(z,h(x)), output h(z), ordered by
/// product(order, reversed(order)).
pub fn build_extended_open(model: &ModelDef) -> Result<ExtendedModel, ModelError> {
    let n = model.n();
    let names = model.state_names();
    let mut state_names = suffixed_names(names, "_x");
    state_names.extend(suffixed_names(names, "_z"));

    let dynamics = match model.dynamics() {
        Dynamics::Linear(t) => {
            let m = t.m();
            let minus_bc = -(&t.b * &t.c);
            let mut a = DMatrix::zeros(2 * n, 2 * n);
            a.view_mut((0, 0), (n, n)).copy_from(&t.a);
            a.view_mut((n, 0), (n, n)).copy_from(&minus_bc);
            a.view_mut((n, n), (n, n)).copy_from(&t.a);
            let mut b = DMatrix::zeros(2 * n, m);
            b.view_mut((0, 0), (n, m)).copy_from(&t.b);
            // output h(xi) = -C z
            let mut c = DMatrix::zeros(m, 2 * n);
            c.view_mut((0, n), (m, n)).copy_from(&t.c);
            Dynamics::Linear(LinearTriple::new(a, b, c)?)
        }
        Dynamics::Expressions { rhs, outputs } => {
            let to_x = state_renamer(names, "_x");
            let to_z = state_renamer(names, "_z");
            let outputs_x: Vec<ExprAst> = outputs.iter().map(|e| e.rename(&to_x)).collect();
            let mut ext_rhs: Vec<ExprAst> = rhs.iter().map(|e| e.rename(&to_x)).collect();
            // z copy is driven by the x copy's output instead of the input.
            ext_rhs.extend(rhs.iter().map(|e| {
                substitute_inputs(e, model.input_names(), &outputs_x).rename(&to_z)
            }));
            let ext_outputs = outputs.iter().map(|e| e.rename(&to_z)).collect();
            Dynamics::Expressions {
                rhs: ext_rhs,
                outputs: ext_outputs,
            }
        }
    };
    let order = model.order_states().product(&model.order_states().reversed());
    let extended = ModelDef::from_parts(
        format!("{}_extended", model.name()),
        state_names,
        model.input_names().to_vec(),
        model.params().to_vec(),
        dynamics,
        order,
        model.order_inputs().clone(),
    )?;
    Ok(ExtendedModel {
        base: model.clone(),
        model: extended,
    })
}

/// The autonomous extended closed loop ẋ = f(x,h(z)), ż = f(z,h(x)).
pub fn build_extended_closed(model: &ModelDef) -> Result<ModelDef, ModelError> {
    let n = model.n();
    let names = model.state_names();
    let mut state_names = suffixed_names(names, "_x");
    state_names.extend(suffixed_names(names, "_z"));

    let dynamics = match model.dynamics() {
        Dynamics::Linear(t) => {
            let minus_bc = -(&t.b * &t.c);
            let mut a = DMatrix::zeros(2 * n, 2 * n);
            a.view_mut((0, 0), (n, n)).copy_from(&t.a);
            a.view_mut((0, n), (n, n)).copy_from(&minus_bc);
            a.view_mut((n, 0), (n, n)).copy_from(&minus_bc);
            a.view_mut((n, n), (n, n)).copy_from(&t.a);
            let (b, c) = empty_b_c(2 * n);
            Dynamics::Linear(LinearTriple::new(a, b, c)?)
        }
        Dynamics::Expressions { rhs, outputs } => {
            let to_x = state_renamer(names, "_x");
            let to_z = state_renamer(names, "_z");
            let outputs_x: Vec<ExprAst> = outputs.iter().map(|e| e.rename(&to_x)).collect();
            let outputs_z: Vec<ExprAst> = outputs.iter().map(|e| e.rename(&to_z)).collect();
            let mut ext_rhs: Vec<ExprAst> = rhs
                .iter()
                .map(|e| substitute_inputs(e, model.input_names(), &outputs_z).rename(&to_x))
                .collect();
            ext_rhs.extend(rhs.iter().map(|e| {
                substitute_inputs(e, model.input_names(), &outputs_x).rename(&to_z)
            }));
            Dynamics::Expressions {
                rhs: ext_rhs,
                outputs: Vec::new(),
            }
        }
    };
    let order = model.order_states().product(&model.order_states().reversed());
    ModelDef::from_parts(
        format!("{}_extended_closed", model.name()),
        state_names,
        Vec::new(),
        model.params().to_vec(),
        dynamics,
        order,
        OrthantOrder::all_plus(0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub trial: usize,
    pub time: f64,
    pub sup_norm: f64,
}

/// The sandwich construction: the output range seen on samples, as a
/// rectangle [u_lo, u_hi] in the input order, plus the base system driven by
/// the two constant extremes from the extreme sampled initial conditions.
/// Every solution with input in the rectangle stays between these two.
#[derive(Debug, Clone, Serialize)]
pub struct SandwichRectangle {
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub x0_lo: Vec<f64>,
    pub x0_hi: Vec<f64>,
    pub final_lo: Vec<f64>,
    pub final_hi: Vec<f64>,
    pub bounded: bool,
    #[serde(skip)]
    pub traj_lo: Trajectory,
    #[serde(skip)]
    pub traj_hi: Trajectory,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundednessReport {
    pub bounded: bool,
    pub trials: usize,
    pub horizon: f64,
    pub bound: f64,
    pub sup_norm_seen: f64,
    pub violations: Vec<BoundViolation>,
    /// Present when the output looked bounded on samples.
    pub rectangle: Option<SandwichRectangle>,
}

/// Integrate the extended closed loop of `model` from random initial
/// conditions and check every trajectory stays within `bound` in sup norm.
/// When the output map looks bounded on samples, also report the sandwich
/// rectangle and its two bracketing trajectories.
pub fn check_boundedness(
    model: &ModelDef,
    trials: usize,
    horizon: f64,
    bound: f64,
    seed: u64,
) -> Result<BoundednessReport, ExtendedError> {
    let closed = build_extended_closed(model)?;
    let n = model.n();
    let (lo, hi) = default_box(model.order_states());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let opts = IntegratorOpts {
        divergence_norm_bound: bound,
        ..IntegratorOpts::default()
    };

    let mut violations = Vec::new();
    let mut sup_seen = 0.0_f64;
    let mut ic_samples: Vec<Vec<f64>> = Vec::new();
    for trial in 0..trials {
        let xi0: Vec<f64> = (0..2 * n)
            .map(|i| {
                let (l, h) = (lo[i % n], hi[i % n]);
                if l < h {
                    rng.random_range(l..h)
                } else {
                    l
                }
            })
            .collect();
        ic_samples.push(xi0[..n].to_vec());
        ic_samples.push(xi0[n..].to_vec());
        let traj = integrate(
            &closed,
            &xi0,
            &InputSignal::Constant(vec![]),
            (0.0, horizon),
            &opts,
        )?;
        let mut worst = 0.0_f64;
        let mut worst_t = 0.0;
        for (t, x) in traj.times.iter().zip(&traj.states) {
            let norm = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            if norm > worst {
                worst = norm;
                worst_t = *t;
            }
        }
        sup_seen = sup_seen.max(worst);
        if worst > bound || traj.status == TrajectoryStatus::Diverged {
            violations.push(BoundViolation {
                trial,
                time: worst_t,
                sup_norm: worst,
            });
        }
    }

    let rectangle = sandwich_rectangle(model, &ic_samples, horizon, bound, &mut rng)?;
    Ok(BoundednessReport {
        bounded: violations.is_empty(),
        trials,
        horizon,
        bound,
        sup_norm_seen: sup_seen,
        violations,
        rectangle,
    })
}

/// Corner pair (lo, hi) of a rectangle in the input order.
type InputRect = (Vec<f64>, Vec<f64>);

/// Probe whether h looks bounded: compare its range on the sampling box with
/// its range on a much larger box. Bounded outputs keep the same extremes.
fn output_looks_bounded(
    model: &ModelDef,
    samples: &[Vec<f64>],
    bound: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<InputRect>, ExtendedError> {
    let (lo, hi) = default_box(model.order_states());
    let scale = bound.max(10.0);
    let mut values = Vec::new();
    for x in samples {
        match model.h_vec(x) {
            Ok(y) if y.iter().all(|v| v.is_finite()) => values.push(y),
            _ => return Ok(None),
        }
    }
    if values.is_empty() {
        return Ok(None);
    }
    let moderate_sup = values
        .iter()
        .flat_map(|y| y.iter())
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut far_sup = 0.0_f64;
    for _ in 0..64 {
        let x: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                let (l, h) = (l * scale / 2.0, h * scale / 2.0);
                if l < h {
                    rng.random_range(l..h)
                } else {
                    l
                }
            })
            .collect();
        match model.h_vec(&x) {
            Ok(y) if y.iter().all(|v| v.is_finite()) => {
                far_sup = far_sup.max(y.iter().fold(0.0_f64, |a, v| a.max(v.abs())));
            }
            _ => return Ok(None),
        }
    }
    if far_sup <= 1.1 * moderate_sup + 1e-6 {
        let (u_lo, u_hi) = model
            .order_inputs()
            .bounding_rectangle(&values)
            .map_err(|e| ExtendedError::Dimension {
                message: e.to_string(),
            })?;
        Ok(Some((u_lo, u_hi)))
    } else {
        Ok(None)
    }
}

fn sandwich_rectangle(
    model: &ModelDef,
    ic_samples: &[Vec<f64>],
    horizon: f64,
    bound: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<SandwichRectangle>, ExtendedError> {
    let Some((u_lo, u_hi)) = output_looks_bounded(model, ic_samples, bound, rng)? else {
        return Ok(None);
    };
    let (x0_lo, x0_hi) = model
        .order_states()
        .bounding_rectangle(ic_samples)
        .map_err(|e| ExtendedError::Dimension {
            message: e.to_string(),
        })?;
    let opts = IntegratorOpts {
        divergence_norm_bound: bound,
        ..IntegratorOpts::default()
    };
    let traj_lo = integrate(
        model,
        &x0_lo,
        &InputSignal::Constant(u_lo.clone()),
        (0.0, horizon),
        &opts,
    )?;
    let traj_hi = integrate(
        model,
        &x0_hi,
        &InputSignal::Constant(u_hi.clone()),
        (0.0, horizon),
        &opts,
    )?;
    let bounded = traj_lo.status != TrajectoryStatus::Diverged
        && traj_hi.status != TrajectoryStatus::Diverged;
    Ok(Some(SandwichRectangle {
        u_lo,
        u_hi,
        x0_lo,
        x0_hi,
        final_lo: traj_lo.last_state().to_vec(),
        final_hi: traj_hi.last_state().to_vec(),
        bounded,
        traj_lo,
        traj_hi,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub residual: f64,
    pub diagonal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub unique: bool,
    /// Outcome of the boundedness sampling, when it was run.
    pub bounded_check: Option<bool>,
    pub equilibria: Vec<Equilibrium>,
    pub verdict: String,
    pub seeds_tried: usize,
    pub seeds_failed: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriaOpts {
    pub random_seeds: usize,
    pub rng_seed: u64,
    pub tol: f64,
    pub newton_max_iter: usize,
    /// Box for random (x, z) seeds; the base default box, doubled, when unset.
    pub sample_box: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for EquilibriaOpts {
    fn default() -> Self {
        EquilibriaOpts {
            random_seeds: 32,
            rng_seed: 0,
            tol: 1e-10,
            newton_max_iter: 60,
            sample_box: None,
        }
    }
}

/// Map every solution u of k(k(u)) = u to its steady state x_u and form all
/// ordered pairs (x_{u_i}, x_{u_j}): Newton seeds that include every
/// steady-state pair the feedback loop can pin.
pub fn char_seed_pairs(
    ctx: &Characteristic,
    k2: &K2SolutionSet,
) -> Result<Vec<StatePair>, CharError> {
    let n = ctx.model().n();
    let mut states = Vec::with_capacity(k2.solutions.len());
    let mut seed = vec![0.0; n];
    for u in &k2.solutions {
        let (_, x_u) = ctx.value_and_state(u, &seed)?;
        seed.copy_from_slice(&x_u);
        states.push(x_u);
    }
    let mut pairs = Vec::with_capacity(states.len() * states.len());
    for a in &states {
        for b in &states {
            pairs.push((a.clone(), b.clone()));
        }
    }
    Ok(pairs)
}

/// Solve f(x,h(z)) = 0, f(z,h(x)) = 0 by damped Newton from many seeds.
/// `extra_seeds` augments the random multistart (typically char_seed_pairs).
/// The verdict claims global convergence only when the equilibrium is unique
/// AND the boundedness sampling passed.
pub fn find_extended_equilibria(
    model: &ModelDef,
    extra_seeds: &[StatePair],
    bounded: Option<&BoundednessReport>,
    opts: &EquilibriaOpts,
) -> Result<EquilibriumReport, ExtendedError> {
    let closed = build_extended_closed(model)?;
    let n = model.n();
    let dim = 2 * n;
    let (lo, hi) = match &opts.sample_box {
        Some((l, h)) => (l.clone(), h.clone()),
        None => {
            let (l, h) = default_box(model.order_states());
            let mut l2 = l.clone();
            l2.extend_from_slice(&l);
            let mut h2 = h.clone();
            h2.extend_from_slice(&h);
            (l2, h2)
        }
    };
    if lo.len() != dim || hi.len() != dim {
        return Err(ExtendedError::Dimension {
            message: format!("sample box must have dimension {dim}"),
        });
    }
    for (x, z) in extra_seeds {
        if x.len() != n || z.len() != n {
            return Err(ExtendedError::Dimension {
                message: format!("seed pair halves must each have dimension {n}"),
            });
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut seeds: Vec<Vec<f64>> = extra_seeds
        .iter()
        .map(|(x, z)| {
            let mut s = x.clone();
            s.extend_from_slice(z);
            s
        })
        .collect();
    for _ in 0..opts.random_seeds {
        seeds.push(
            (0..dim)
                .map(|i| {
                    if lo[i] < hi[i] {
                        rng.random_range(lo[i]..hi[i])
                    } else {
                        lo[i]
                    }
                })
                .collect(),
        );
    }

    let seeds_tried = seeds.len();
    let mut seeds_failed = 0usize;
    let mut found: Vec<Vec<f64>> = Vec::new();
    for seed in &seeds {
        match newton_equilibrium(&closed, seed, opts) {
            Some(sol) => {
                found.push(sol.clone());
                // Swap symmetry: (z, x) solves the same system.
                let mut swapped = sol[n..].to_vec();
                swapped.extend_from_slice(&sol[..n]);
                found.push(swapped);
            }
            None => seeds_failed += 1,
        }
    }

    found.sort_by(|a, b| a.partial_cmp(b).expect("finite solutions"));
    let dedup_radius = 100.0 * opts.tol;
    let mut unique_sols: Vec<Vec<f64>> = Vec::new();
    for s in found {
        if !unique_sols
            .iter()
            .any(|t| diff_norm(t, &s) <= dedup_radius)
        {
            unique_sols.push(s);
        }
    }

    let mut fbuf = vec![0.0; dim];
    let mut equilibria = Vec::with_capacity(unique_sols.len());
    for s in &unique_sols {
        closed.f(s, &[], &mut fbuf)?;
        let residual = fbuf.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if residual > opts.tol {
            continue;
        }
        let (x, z) = s.split_at(n);
        equilibria.push(Equilibrium {
            diagonal: diff_norm(x, z) <= 1e-6,
            x: x.to_vec(),
            z: z.to_vec(),
            residual,
        });
    }

    let unique = equilibria.len() == 1;
    let bounded_check = bounded.map(|b| b.bounded);
    let verdict = match (equilibria.len(), bounded_check) {
        (0, _) => "no equilibria found from the seeds tried".to_string(),
        (1, Some(true)) => {
            "globally convergent: the unique extended steady state attracts every bounded solution, so the closed loop converges from every initial condition".to_string()
        }
        (1, _) => "unique equilibrium, (B) unverified".to_string(),
        (k, _) => format!("{k} equilibria found; no global convergence claim"),
    };
    Ok(EquilibriumReport {
        unique,
        bounded_check,
        equilibria,
        verdict,
        seeds_tried,
        seeds_failed,
        tol: opts.tol,
    })
}

/// Newton with a central-difference Jacobian on the extended closed-loop
/// field. Returns None when the iteration stalls, the Jacobian is singular,
/// or the residual never reaches tol.
fn newton_equilibrium(closed: &ModelDef, seed: &[f64], opts: &EquilibriaOpts) -> Option<Vec<f64>> {
    let dim = seed.len();
    let mut x = seed.to_vec();
    let mut fvec = vec![0.0; dim];
    let mut fplus = vec![0.0; dim];
    let mut fminus = vec![0.0; dim];

    for _ in 0..opts.newton_max_iter {
        if closed.f(&x, &[], &mut fvec).is_err() {
            return None;
        }
        let res = fvec.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !res.is_finite() {
            return None;
        }
        if res <= opts.tol {
            return Some(x);
        }

        let mut jac = DMatrix::zeros(dim, dim);
        let mut xp = x.clone();
        for j in 0..dim {
            let delta = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + delta;
            let ep = closed.f(&xp, &[], &mut fplus);
            xp[j] = x[j] - delta;
            let em = closed.f(&xp, &[], &mut fminus);
            xp[j] = x[j];
            if ep.and(em).is_err() {
                return None;
            }
            for i in 0..dim {
                jac[(i, j)] = (fplus[i] - fminus[i]) / (2.0 * delta);
            }
        }
        let step = Lu::factor(&jac).solve_vec(&fvec)?;

        // Damped update: halve until the residual does not get worse.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let trial: Vec<f64> = x
                .iter()
                .zip(step.iter())
                .map(|(xi, si)| xi - lambda * si)
                .collect();
            if closed.f(&trial, &[], &mut fplus).is_ok() {
                let tres = fplus.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                if tres.is_finite() && tres < res {
                    x = trial;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    None
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}
