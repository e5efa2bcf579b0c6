//! The input-output characteristic k(u) = h(x_u): the output at the steady
//! state reached under constant input u. Includes the discrete feedback
//! iteration u+ = k(u), its classification (fixed point, period two,
//! divergent), anti-monotonicity sampling, and solutions of k(k(u)) = u.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::integrate::{find_steady_state, inf_norm, SteadyError, SteadyOpts};
use crate::model::ModelDef;
use crate::order::OrthantOrder;

#[derive(Debug, Clone, Error)]
pub enum CharError {
    #[error("dimension mismatch: {message}")]
    Dimension { message: String },
    /// The characteristic is undefined at `u` from the seed used: the
    /// settle-and-polish pipeline did not produce a steady state.
    #[error("characteristic undefined at u = {u:?}: {why}")]
    NoConvergence {
        u: Vec<f64>,
        why: String,
        /// Partial iteration orbit when this happened mid-iteration.
        orbit: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharOpts {
    pub steady: SteadyOpts,
    /// Steady-state seed for cold calls; zeros when unset.
    pub default_seed_state: Option<Vec<f64>>,
    /// Iteration u-norm bound. Kept well below the integrator divergence
    /// bound so orbit divergence is classified, not reported as a steady
    /// state failure.
    pub divergence_bound: f64,
    /// Cache key quantum for (u, seed) lookups.
    pub quantum: f64,
    pub k2_max_iter: usize,
    /// Slack for the anti-monotonicity comparisons.
    pub anti_slack: f64,
}

impl Default for CharOpts {
    fn default() -> Self {
        CharOpts {
            steady: SteadyOpts::default(),
            default_seed_state: None,
            divergence_bound: 1e6,
            quantum: 1e-12,
            k2_max_iter: 500,
            anti_slack: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationClass {
    FixedPoint,
    PeriodTwo,
    Divergent,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationResult {
    /// u0, k(u0), k(k(u0)), ...
    pub orbit: Vec<Vec<f64>>,
    pub classification: IterationClass,
    pub fixed_point: Option<Vec<f64>>,
    /// Lexicographically ordered period-two pair.
    pub period_two: Option<(Vec<f64>, Vec<f64>)>,
    pub iterations: usize,
    pub tol: f64,
}

impl IterationResult {
    /// CSV with header `i,u1,...,um`, one row per orbit point.
    pub fn orbit_csv(&self) -> String {
        let m = self.orbit.first().map_or(0, Vec::len);
        let mut out = String::from("i");
        for j in 1..=m {
            out.push_str(&format!(",u{j}"));
        }
        out.push('\n');
        for (i, u) in self.orbit.iter().enumerate() {
            out.push_str(&format!("{i}"));
            for v in u {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct K2SolutionSet {
    /// Solutions of k(k(u)) = u, sorted lexicographically, deduplicated at
    /// radius `100 * tol`.
    pub solutions: Vec<Vec<f64>>,
    /// `max_i |k(k(u)) - u|_i` per solution.
    pub residuals: Vec<f64>,
    pub unique: bool,
    /// Seeds whose k^2 orbit neither converged nor stayed bounded.
    pub undecided_seeds: Vec<Vec<f64>>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AntiViolation {
    pub u_low: Vec<f64>,
    pub u_high: Vec<f64>,
    pub k_low: Vec<f64>,
    pub k_high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AntiMonotoneVerdict {
    pub anti_monotone: bool,
    pub pairs_checked: usize,
    pub violations: Vec<AntiViolation>,
    pub slack: f64,
}

type CacheKey = (Vec<i64>, Vec<i64>);
/// Cached evaluation: the output k(u) and the steady state x_u behind it.
type CachedValue = (Vec<f64>, Vec<f64>);

/// Characteristic evaluation context: one model plus a steady-state cache
/// keyed by quantized (u, seed) pairs, so iterations and grids reuse work.
pub struct Characteristic<'m> {
    model: &'m ModelDef,
    opts: CharOpts,
    cache: RefCell<HashMap<CacheKey, CachedValue>>,
}

impl<'m> Characteristic<'m> {
    pub fn new(model: &'m ModelDef, opts: CharOpts) -> Self {
        Characteristic {
            model,
            opts,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_defaults(model: &'m ModelDef) -> Self {
        Characteristic::new(model, CharOpts::default())
    }

    pub fn model(&self) -> &ModelDef {
        self.model
    }

    pub fn opts(&self) -> &CharOpts {
        &self.opts
    }

    fn quantize(&self, v: &[f64]) -> Option<Vec<i64>> {
        v.iter()
            .map(|x| {
                let q = (x / self.opts.quantum).round();
                if q.abs() < 9.0e15 {
                    Some(q as i64)
                } else {
                    None
                }
            })
            .collect()
    }

    fn default_seed(&self) -> Vec<f64> {
        self.opts
            .default_seed_state
            .clone()
            .unwrap_or_else(|| vec![0.0; self.model.n()])
    }

    /// k(u) together with the steady state x_u it was read from.
    pub fn value_and_state(
        &self,
        u: &[f64],
        x_seed: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), CharError> {
        if u.len() != self.model.m() {
            return Err(CharError::Dimension {
                message: format!(
                    "input has {} entries, model has {} input channels",
                    u.len(),
                    self.model.m()
                ),
            });
        }
        if x_seed.len() != self.model.n() {
            return Err(CharError::Dimension {
                message: format!(
                    "seed state has {} entries, model has {} states",
                    x_seed.len(),
                    self.model.n()
                ),
            });
        }
        let key = match (self.quantize(u), self.quantize(x_seed)) {
            (Some(qu), Some(qs)) => Some((qu, qs)),
            _ => None,
        };
        if let Some(k) = &key {
            if let Some(hit) = self.cache.borrow().get(k) {
                return Ok(hit.clone());
            }
        }
        let no_conv = |why: String| CharError::NoConvergence {
            u: u.to_vec(),
            why,
            orbit: Vec::new(),
        };
        let ss = find_steady_state(self.model, u, x_seed, &self.opts.steady).map_err(|e| {
            no_conv(match e {
                SteadyError::Diverged { t } => format!("trajectory diverged at t = {t}"),
                SteadyError::Integrate(ie) => format!("integration failed: {ie}"),
            })
        })?;
        if !ss.converged {
            return Err(no_conv(
                ss.diagnostic.unwrap_or_else(|| "settling did not converge".to_string()),
            ));
        }
        let y = self
            .model
            .h_vec(&ss.x)
            .map_err(|e| no_conv(format!("output evaluation failed at x_u: {e}")))?;
        let entry = (y, ss.x);
        if let Some(k) = key {
            self.cache.borrow_mut().insert(k, entry.clone());
        }
        Ok(entry)
    }

    /// k(u) = h(x_u), settling from `x_seed`.
    pub fn char_value(&self, u: &[f64], x_seed: &[f64]) -> Result<Vec<f64>, CharError> {
        self.value_and_state(u, x_seed).map(|(y, _)| y)
    }

    /// Check k reverses the input order on every ordered pair of the grid.
    pub fn check_antimonotone(&self, grid: &[Vec<f64>]) -> Result<AntiMonotoneVerdict, CharError> {
        let order = self.model.order_inputs();
        let out_order = OrthantOrder::all_plus(self.model.m());
        let mut values = Vec::with_capacity(grid.len());
        let mut seed = self.default_seed();
        for u in grid {
            let (y, x_u) = self.value_and_state(u, &seed)?;
            values.push(y);
            seed = x_u; // warm start along the grid
        }
        let mut violations = Vec::new();
        let mut pairs = 0usize;
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                if i == j || grid[i] == grid[j] {
                    continue;
                }
                let le = order.leq(&grid[i], &grid[j]).map_err(|e| CharError::Dimension {
                    message: e.to_string(),
                })?;
                if !le {
                    continue;
                }
                pairs += 1;
                // u_i <= u_j must give k(u_j) <= k(u_i).
                let ok = out_order
                    .leq_slack(&values[j], &values[i], self.opts.anti_slack)
                    .expect("output dims match");
                if !ok {
                    violations.push(AntiViolation {
                        u_low: grid[i].clone(),
                        u_high: grid[j].clone(),
                        k_low: values[i].clone(),
                        k_high: values[j].clone(),
                    });
                }
            }
        }
        Ok(AntiMonotoneVerdict {
            anti_monotone: violations.is_empty(),
            pairs_checked: pairs,
            violations,
            slack: self.opts.anti_slack,
        })
    }

    /// Run u+ = k(u) from `u0` and classify the orbit.
    pub fn iterate(
        &self,
        u0: &[f64],
        max_iter: usize,
        tol: f64,
    ) -> Result<IterationResult, CharError> {
        let mut orbit = vec![u0.to_vec()];
        let mut seed = self.default_seed();
        let mut classification = IterationClass::Undecided;
        let mut fixed_point = None;
        let mut period_two = None;

        for _ in 0..max_iter {
            let u = orbit.last().expect("orbit starts nonempty").clone();
            if inf_norm(&u) > self.opts.divergence_bound {
                classification = IterationClass::Divergent;
                break;
            }
            let (next, x_u) = self.value_and_state(&u, &seed).map_err(|e| match e {
                CharError::NoConvergence { u, why, .. } => CharError::NoConvergence {
                    u,
                    why,
                    orbit: orbit.clone(),
                },
                other => other,
            })?;
            seed = x_u;
            orbit.push(next.clone());

            let step = diff_norm(&next, &u);
            if step <= tol {
                classification = IterationClass::FixedPoint;
                fixed_point = Some(next);
                break;
            }
            if orbit.len() >= 3 {
                let prev = &orbit[orbit.len() - 3];
                if diff_norm(&next, prev) <= tol && step > 10.0 * tol {
                    classification = IterationClass::PeriodTwo;
                    let (a, b) = (u, next);
                    period_two = Some(if lex_le(&a, &b) { (a, b) } else { (b, a) });
                    break;
                }
            }
        }
        if classification == IterationClass::Undecided && inf_norm(orbit.last().unwrap()) > self.opts.divergence_bound
        {
            classification = IterationClass::Divergent;
        }
        Ok(IterationResult {
            iterations: orbit.len() - 1,
            orbit,
            classification,
            fixed_point,
            period_two,
            tol,
        })
    }

    /// Locate solutions of k(k(u)) = u by iterating the (monotone) map k^2
    /// from each seed, then, in the scalar case, bisecting for the interior
    /// repelling solution the forward iteration cannot reach.
    pub fn find_k2_solutions(
        &self,
        seeds: &[Vec<f64>],
        tol: f64,
    ) -> Result<K2SolutionSet, CharError> {
        let mut solutions: Vec<Vec<f64>> = Vec::new();
        let mut undecided = Vec::new();
        let mut seed_state = self.default_seed();

        for u_seed in seeds {
            let mut u = u_seed.clone();
            let mut settled = None;
            for _ in 0..self.opts.k2_max_iter {
                if inf_norm(&u) > self.opts.divergence_bound {
                    break;
                }
                let next = self.k2(&u, &mut seed_state)?;
                if diff_norm(&next, &u) <= tol {
                    settled = Some(next);
                    break;
                }
                u = next;
            }
            match settled {
                Some(sol) => solutions.push(sol),
                None => undecided.push(u_seed.clone()),
            }
        }

        if self.model.m() == 1 {
            self.bisect_between(&mut solutions, tol, &mut seed_state)?;
        }

        solutions.sort_by(|a, b| a.partial_cmp(b).expect("finite solutions"));
        let dedup_radius = 100.0 * tol;
        let mut unique_sols: Vec<Vec<f64>> = Vec::new();
        for s in solutions {
            if !unique_sols.iter().any(|t| diff_norm(t, &s) <= dedup_radius) {
                unique_sols.push(s);
            }
        }
        let mut residuals = Vec::with_capacity(unique_sols.len());
        for s in &unique_sols {
            let ks = self.k2(s, &mut seed_state)?;
            residuals.push(diff_norm(&ks, s));
        }
        Ok(K2SolutionSet {
            unique: unique_sols.len() == 1 && undecided.is_empty(),
            solutions: unique_sols,
            residuals,
            undecided_seeds: undecided,
            tol,
        })
    }

    fn k2(&self, u: &[f64], seed: &mut Vec<f64>) -> Result<Vec<f64>, CharError> {
        let (mid, x1) = self.value_and_state(u, seed)?;
        *seed = x1;
        let (out, x2) = self.value_and_state(&mid, seed)?;
        *seed = x2;
        Ok(out)
    }

    /// Scalar refinement: between adjacent attracting solutions of k^2 sits
    /// a repelling one where g(u) = k^2(u) - u changes sign; bisect for it.
    fn bisect_between(
        &self,
        solutions: &mut Vec<Vec<f64>>,
        tol: f64,
        seed: &mut Vec<f64>,
    ) -> Result<(), CharError> {
        let mut pts: Vec<f64> = solutions.iter().map(|s| s[0]).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let mut found = Vec::new();
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 200.0 * tol {
                continue;
            }
            let g = |u: f64, seed: &mut Vec<f64>| -> Result<f64, CharError> {
                Ok(self.k2(&[u], seed)?[0] - u)
            };
            let (mut lo, mut hi) = (a + 0.1 * (b - a), b - 0.1 * (b - a));
            let (mut glo, mut ghi) = (g(lo, seed)?, g(hi, seed)?);
            if glo == 0.0 {
                found.push(lo);
                continue;
            }
            if ghi == 0.0 {
                found.push(hi);
                continue;
            }
            if glo.signum() == ghi.signum() {
                continue;
            }
            for _ in 0..200 {
                if hi - lo <= tol * 0.01 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let gm = g(mid, seed)?;
                if gm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if gm.signum() == glo.signum() {
                    lo = mid;
                    glo = gm;
                } else {
                    hi = mid;
                    ghi = gm;
                }
            }
            let _ = ghi;
            found.push(0.5 * (lo + hi));
        }
        for f in found {
            solutions.push(vec![f]);
        }
        Ok(())
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

fn lex_le(a: &[f64], b: &[f64]) -> bool {
    a.partial_cmp(b) != Some(std::cmp::Ordering::Greater)
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

    fn scalar_gain(k: f64) -> ModelDef {
        load_model(&format!(
            "states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -{k} * x1\n"
        ))
        .unwrap()
    }

    // Attracting period-two pair of u -> 2/(1+u^4), frozen from a
    // high-precision scalar iteration.
    const P2_LO: f64 = 0.11773217228902419;
    const P2_HI: f64 = 1.9996158266853646;

    #[test]
    fn linear_char_is_minus_gain_times_u() {
        let model = scalar_gain(0.5);
        let ctx = Characteristic::with_defaults(&model);
        let y = ctx.char_value(&[2.0], &[0.0]).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-8, "k(2) = {}", y[0]);
    }

    #[test]
    fn goodwin_char_is_hill_of_u() {
        let model = goodwin(1.0, 1.0);
        let ctx = Characteristic::with_defaults(&model);
        let y = ctx.char_value(&[1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-8, "k(1) = {}", y[0]);
    }

    #[test]
    fn undefined_characteristic_reports_no_convergence() {
        let model = load_model("states x1\ninputs u1\ndx1 = x1^2 + u1\ny1 = -x1\n").unwrap();
        let ctx = Characteristic::with_defaults(&model);
        let err = ctx.char_value(&[1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, CharError::NoConvergence { .. }));
    }

    #[test]
    fn cache_reuses_steady_states() {
        let model = goodwin(1.0, 1.0);
        let ctx = Characteristic::with_defaults(&model);
        let a = ctx.char_value(&[1.0], &[0.0, 0.0, 0.0]).unwrap();
        let b = ctx.char_value(&[1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ctx.cache.borrow().len(), 1);
    }

    #[test]
    fn hill_grid_is_anti_monotone() {
        let model = goodwin(1.0, 1.0);
        let ctx = Characteristic::with_defaults(&model);
        let grid: Vec<Vec<f64>> = [0.0, 0.5, 1.0, 2.0].iter().map(|&u| vec![u]).collect();
        let v = ctx.check_antimonotone(&grid).unwrap();
        assert!(v.anti_monotone, "{:?}", v.violations);
        assert_eq!(v.pairs_checked, 6);
    }

    #[test]
    fn monotone_output_fails_anti_check() {
        // Output +x rises with u: k(u) = u is monotone, not anti-monotone.
        let model = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = x1\n").unwrap();
        let ctx = Characteristic::with_defaults(&model);
        let grid: Vec<Vec<f64>> = [0.0, 1.0, 2.0].iter().map(|&u| vec![u]).collect();
        let v = ctx.check_antimonotone(&grid).unwrap();
        assert!(!v.anti_monotone);
        assert!(!v.violations.is_empty());
    }

    #[test]
    fn convergent_goodwin_iteration_hits_golden_ratio_root() {
        let model = goodwin(1.0, 1.0);
        let ctx = Characteristic::with_defaults(&model);
        let expect = (5.0_f64.sqrt() - 1.0) / 2.0;
        for u0 in [0.0, 1.0, 5.0] {
            let r = ctx.iterate(&[u0], 200, 1e-9).unwrap();
            assert_eq!(r.classification, IterationClass::FixedPoint, "from {u0}");
            let u = &r.fixed_point.as_ref().unwrap()[0];
            assert!((u - expect).abs() < 1e-6, "u* = {u} from {u0}");
        }
    }

    #[test]
    fn period_two_goodwin_iteration_classified() {
        let model = goodwin(2.0, 4.0);
        let ctx = Characteristic::with_defaults(&model);
        let r = ctx.iterate(&[0.0], 300, 1e-8).unwrap();
        assert_eq!(r.classification, IterationClass::PeriodTwo);
        let (lo, hi) = r.period_two.as_ref().unwrap();
        assert!((lo[0] - P2_LO).abs() < 1e-6, "low {}", lo[0]);
        assert!((hi[0] - P2_HI).abs() < 1e-6, "high {}", hi[0]);
    }

    #[test]
    fn linear_contraction_iterates_to_zero() {
        let model = scalar_gain(0.5);
        let ctx = Characteristic::with_defaults(&model);
        let r = ctx.iterate(&[1.0], 100, 1e-10).unwrap();
        assert_eq!(r.classification, IterationClass::FixedPoint);
        assert!(r.fixed_point.as_ref().unwrap()[0].abs() < 1e-8);
    }

    #[test]
    fn linear_expansion_diverges() {
        let model = scalar_gain(2.0);
        let ctx = Characteristic::with_defaults(&model);
        let r = ctx.iterate(&[1.0], 200, 1e-10).unwrap();
        assert_eq!(r.classification, IterationClass::Divergent);
    }

    #[test]
    fn k2_unique_in_convergent_regime() {
        let model = goodwin(1.0, 1.0);
        let ctx = Characteristic::with_defaults(&model);
        let seeds: Vec<Vec<f64>> = [0.0, 1.0, 5.0].iter().map(|&u| vec![u]).collect();
        let set = ctx.find_k2_solutions(&seeds, 1e-9).unwrap();
        assert!(set.unique, "{:?}", set.solutions);
        let expect = (5.0_f64.sqrt() - 1.0) / 2.0;
        assert!((set.solutions[0][0] - expect).abs() < 1e-6);
        assert!(set.residuals[0] < 1e-7);
    }

    #[test]
    fn k2_finds_three_solutions_in_period_two_regime() {
        let model = goodwin(2.0, 4.0);
        let ctx = Characteristic::with_defaults(&model);
        let seeds: Vec<Vec<f64>> = [0.0, 1.0, 5.0].iter().map(|&u| vec![u]).collect();
        let set = ctx.find_k2_solutions(&seeds, 1e-8).unwrap();
        assert_eq!(set.solutions.len(), 3, "{:?}", set.solutions);
        assert!(!set.unique);
        assert!((set.solutions[0][0] - P2_LO).abs() < 1e-5);
        assert!((set.solutions[1][0] - 1.0).abs() < 1e-5, "interior fixed point");
        assert!((set.solutions[2][0] - P2_HI).abs() < 1e-5);
    }

    #[test]
    fn k2_linear_contraction_unique_zero() {
        let model = scalar_gain(0.5);
        let ctx = Characteristic::with_defaults(&model);
        let seeds: Vec<Vec<f64>> = [-1.0, 0.5, 2.0].iter().map(|&u| vec![u]).collect();
        let set = ctx.find_k2_solutions(&seeds, 1e-9).unwrap();
        assert!(set.unique);
        assert!(set.solutions[0][0].abs() < 1e-7);
    }

    #[test]
    fn fixed_points_of_k_appear_among_k2_solutions() {
        let model = goodwin(1.0, 1.0);
        let ctx = Characteristic::with_defaults(&model);
        let r = ctx.iterate(&[0.0], 200, 1e-9).unwrap();
        let u_star = r.fixed_point.unwrap();
        let set = ctx.find_k2_solutions(&[vec![0.0], u_star.clone()], 1e-9).unwrap();
        assert!(set
            .solutions
            .iter()
            .any(|s| diff_norm(s, &u_star) < 1e-6));
    }

    #[test]
    fn orbit_csv_shape() {
        let model = scalar_gain(0.5);
        let ctx = Characteristic::with_defaults(&model);
        let r = ctx.iterate(&[1.0], 50, 1e-10).unwrap();
        let csv = r.orbit_csv();
        assert!(csv.starts_with("i,u1\n0,1\n"));
        assert_eq!(csv.lines().count(), r.orbit.len() + 1);
    }

    #[test]
    fn simulated_linear_char_matches_gain_matrix() {
        use nalgebra::DMatrix;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let (a, b, c) = crate::linear::random_metzler_instance(
                &mut rng,
                3,
                2,
                crate::linear::GainRegime::Below1,
            );
            let k = crate::linear::gain_matrix(&a, &b, &c).unwrap();
            let model = crate::model::ModelDef::from_linear("inst", &a, &b, &c).unwrap();
            let ctx = Characteristic::with_defaults(&model);
            for _ in 0..3 {
                let u: Vec<f64> = (0..2).map(|_| rng.random_range(0.1..2.0)).collect();
                let y = ctx.char_value(&u, &[0.0; 3]).unwrap();
                let ku = &k * DMatrix::from_column_slice(2, 1, &u);
                for i in 0..2 {
                    let expect = -ku[(i, 0)];
                    let rel = (y[i] - expect).abs() / expect.abs().max(1e-6);
                    assert!(rel < 1e-5, "k(u)[{i}] = {} vs {expect}", y[i]);
                }
            }
        }
    }
}
