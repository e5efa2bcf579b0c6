//! Orthant partial orders: sign-pattern cones on coordinate spaces.
//!
//! An order is a vector of signs, one per coordinate. `a <= b` holds when
//! `sign_i * (b_i - a_i) >= 0` for every coordinate, so an all-`+` order is
//! the usual componentwise comparison and a `-` entry reverses that
//! coordinate. Orders compose by concatenation (`product`) and flip under
//! `reversed`, which is how the doubled-cascade order `(x up, z down)` is
//! built from a base state order.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrderError {
    #[error("dimension mismatch: order has {order_dim} coordinates, vector has {vec_dim}")]
    DimensionMismatch { order_dim: usize, vec_dim: usize },
    #[error("empty point list")]
    EmptyInput,
    #[error("invalid sign entry {got}: every entry must be +1 or -1")]
    BadSign { got: i8 },
}

/// A partial order on `R^dim` given by one sign per coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct OrthantOrder {
    signs: Vec<i8>,
}

impl OrthantOrder {
    pub fn from_signs(signs: Vec<i8>) -> Result<OrthantOrder, OrderError> {
        if let Some(&bad) = signs.iter().find(|s| **s != 1 && **s != -1) {
            return Err(OrderError::BadSign { got: bad });
        }
        Ok(OrthantOrder { signs })
    }

    /// The standard componentwise order on `R^dim`.
    pub fn all_plus(dim: usize) -> OrthantOrder {
        OrthantOrder { signs: vec![1; dim] }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), OrderError> {
        if v.len() != self.signs.len() {
            Err(OrderError::DimensionMismatch {
                order_dim: self.signs.len(),
                vec_dim: v.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `a <= b` in this order.
    pub fn leq(&self, a: &[f64], b: &[f64]) -> Result<bool, OrderError> {
        self.leq_slack(a, b, 0.0)
    }

    /// `a <= b` up to a per-coordinate tolerance, used when the compared
    /// vectors carry integrator error.
    pub fn leq_slack(&self, a: &[f64], b: &[f64], slack: f64) -> Result<bool, OrderError> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        Ok(self
            .signs
            .iter()
            .zip(a.iter().zip(b))
            .all(|(&s, (&ai, &bi))| f64::from(s) * (bi - ai) >= -slack))
    }

    /// Same order with every coordinate flipped.
    pub fn reversed(&self) -> OrthantOrder {
        OrthantOrder {
            signs: self.signs.iter().map(|s| -s).collect(),
        }
    }

    /// Order on the product space: `self` on the first block of
    /// coordinates, `other` on the rest.
    pub fn product(&self, other: &OrthantOrder) -> OrthantOrder {
        let mut signs = self.signs.clone();
        signs.extend_from_slice(&other.signs);
        OrthantOrder { signs }
    }

    /// Tight rectangle `[lo, hi]` (in this order) containing every point:
    /// `lo <= p <= hi` for all `p`, with both bounds attained coordinatewise.
    pub fn bounding_rectangle(
        &self,
        points: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<f64>), OrderError> {
        let first = points.first().ok_or(OrderError::EmptyInput)?;
        self.check_dim(first)?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for p in &points[1..] {
            self.check_dim(p)?;
            for (i, &s) in self.signs.iter().enumerate() {
                // In order terms lo stays the minimum and hi the maximum,
                // which numerically means min/max swap on `-` coordinates.
                if f64::from(s) * (p[i] - lo[i]) < 0.0 {
                    lo[i] = p[i];
                }
                if f64::from(s) * (p[i] - hi[i]) > 0.0 {
                    hi[i] = p[i];
                }
            }
        }
        Ok((lo, hi))
    }
}

/// How the output map transforms the state order on the sampled pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputClass {
    Monotone,
    AntiMonotone,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneFailure {
    pub trial: usize,
    pub time: f64,
    pub coordinate: usize,
    /// How far the signed difference fell below `-slack`.
    pub gap: f64,
}

/// Sampling-based monotonicity verdict. A pass is evidence, not proof; a
/// failure is a concrete counterexample up to the stated slack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityVerdict {
    pub system_monotone: bool,
    pub output_class: OutputClass,
    pub failures: Vec<MonotoneFailure>,
    pub trials: usize,
    pub slack: f64,
}

#[derive(Debug, Clone)]
pub struct MonotoneCheckOpts {
    pub trials: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Sampling box for initial states, `(lo, hi)` per coordinate. Default:
    /// `[0, 2]` on `+` coordinates, `[-2, 0]` on `-` coordinates.
    pub state_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Sampling box for input values; same default scheme.
    pub input_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Comparison slack absorbing integrator error.
    pub slack: f64,
    /// Fixed RK4 steps per horizon (a multiple of 4 keeps the piecewise
    /// input switches on the step grid).
    pub steps: usize,
}

impl Default for MonotoneCheckOpts {
    fn default() -> Self {
        MonotoneCheckOpts {
            trials: 50,
            horizon: 20.0,
            seed: 0,
            state_box: None,
            input_box: None,
            slack: 1e-7,
            steps: 500,
        }
    }
}

#[derive(Debug, Error)]
pub enum MonotoneCheckError {
    #[error("bad options: {message}")]
    BadOptions { message: String },
    #[error("output evaluation failed on trial {trial}: {source}")]
    Output {
        trial: usize,
        state: Vec<f64>,
        source: crate::expr::EvalError,
    },
    #[error("integration failed on trial {trial}: {source}")]
    Integration {
        trial: usize,
        ic: Vec<f64>,
        source: crate::integrate::IntegrateError,
    },
}

/// Default sampling box when none is given: [0,2] per increasing coordinate,
/// [-2,0] per decreasing one.
pub fn default_box(order: &OrthantOrder) -> (Vec<f64>, Vec<f64>) {
    let lo = order
        .signs()
        .iter()
        .map(|&s| if s > 0 { 0.0 } else { -2.0 })
        .collect();
    let hi = order
        .signs()
        .iter()
        .map(|&s| if s > 0 { 2.0 } else { 0.0 })
        .collect();
    (lo, hi)
}

/// Try to falsify order preservation: integrate `trials` ordered pairs of
/// initial states under ordered inputs (constant on even trials, 4-segment
/// piecewise constant on odd ones) and compare state orders along the way;
/// classify the output map on the sampled initial pairs.
pub fn check_monotone(
    model: &crate::model::ModelDef,
    trials: usize,
    horizon: f64,
    seed: u64,
) -> Result<MonotonicityVerdict, MonotoneCheckError> {
    check_monotone_with(
        model,
        &MonotoneCheckOpts {
            trials,
            horizon,
            seed,
            ..MonotoneCheckOpts::default()
        },
    )
}

pub fn check_monotone_with(
    model: &crate::model::ModelDef,
    opts: &MonotoneCheckOpts,
) -> Result<MonotonicityVerdict, MonotoneCheckError> {
    use crate::integrate::{integrate, InputSignal, IntegratorOpts, Method};
    use rand::Rng;
    use rand::SeedableRng;

    let n = model.n();
    let m = model.m();
    if opts.horizon.is_nan() || opts.horizon <= 0.0 || opts.trials == 0 || opts.steps < 4 {
        return Err(MonotoneCheckError::BadOptions {
            message: "need horizon > 0, trials >= 1, steps >= 4".to_string(),
        });
    }
    let (lo_x, hi_x) = match &opts.state_box {
        Some(b) => b.clone(),
        None => default_box(model.order_states()),
    };
    let (lo_u, hi_u) = match &opts.input_box {
        Some(b) => b.clone(),
        None => default_box(model.order_inputs()),
    };
    if lo_x.len() != n || hi_x.len() != n || lo_u.len() != m || hi_u.len() != m {
        return Err(MonotoneCheckError::BadOptions {
            message: "sampling box dimensions must match the model".to_string(),
        });
    }

    let sx = model.order_states();
    let su = model.order_inputs();
    let out_order = OrthantOrder::all_plus(m);
    let int_opts = IntegratorOpts {
        method: Method::Rk4Fixed,
        step: opts.horizon / opts.steps as f64,
        ..IntegratorOpts::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);

    // Two points in the box, arranged per coordinate so the pair is ordered.
    // Both endpoints stay inside the box: reversed-sign coordinates must not
    // leave the model's natural domain.
    let sample_pair = |rng: &mut rand_chacha::ChaCha8Rng,
                       lo: &[f64],
                       hi: &[f64],
                       signs: &[i8]| {
        let mut a = Vec::with_capacity(lo.len());
        let mut b = Vec::with_capacity(lo.len());
        for ((&l, &h), &s) in lo.iter().zip(hi).zip(signs) {
            let (p, q) = if l < h {
                (rng.random_range(l..h), rng.random_range(l..h))
            } else {
                (l, l)
            };
            let (small, big) = if p <= q { (p, q) } else { (q, p) };
            if s >= 0 {
                a.push(small);
                b.push(big);
            } else {
                a.push(big);
                b.push(small);
            }
        }
        (a, b)
    };

    let mut failures = Vec::new();
    let mut out_monotone = true;
    let mut out_anti = true;

    for trial in 0..opts.trials {
        let (xa, xb) = sample_pair(&mut rng, &lo_x, &hi_x, sx.signs());

        if m > 0 {
            let ya = model.h_vec(&xa).map_err(|source| MonotoneCheckError::Output {
                trial,
                state: xa.clone(),
                source,
            })?;
            let yb = model.h_vec(&xb).map_err(|source| MonotoneCheckError::Output {
                trial,
                state: xb.clone(),
                source,
            })?;
            if !out_order.leq_slack(&ya, &yb, opts.slack).expect("dims match") {
                out_monotone = false;
            }
            if !out_order.leq_slack(&yb, &ya, opts.slack).expect("dims match") {
                out_anti = false;
            }
        }

        let (input_a, input_b) = if m == 0 {
            (InputSignal::Constant(vec![]), InputSignal::Constant(vec![]))
        } else if trial % 2 == 0 {
            let (ua, ub) = sample_pair(&mut rng, &lo_u, &hi_u, su.signs());
            (InputSignal::Constant(ua), InputSignal::Constant(ub))
        } else {
            let starts: Vec<f64> = (0..4).map(|k| opts.horizon * k as f64 / 4.0).collect();
            let mut va = Vec::new();
            let mut vb = Vec::new();
            for _ in 0..4 {
                let (ua, ub) = sample_pair(&mut rng, &lo_u, &hi_u, su.signs());
                va.push(ua);
                vb.push(ub);
            }
            (
                InputSignal::PiecewiseConstant { starts: starts.clone(), values: va },
                InputSignal::PiecewiseConstant { starts, values: vb },
            )
        };

        let run = |x0: &Vec<f64>, input: &InputSignal| {
            integrate(model, x0, input, (0.0, opts.horizon), &int_opts).map_err(|source| {
                MonotoneCheckError::Integration {
                    trial,
                    ic: x0.clone(),
                    source,
                }
            })
        };
        let ta = run(&xa, &input_a)?;
        let tb = run(&xb, &input_b)?;

        // Identical fixed-step grids; if one run diverged early, compare
        // over the common prefix only.
        let len = ta.times.len().min(tb.times.len());
        'scan: for idx in 0..len {
            let (pa, pb) = (&ta.states[idx], &tb.states[idx]);
            if !pa.iter().chain(pb.iter()).all(|v| v.is_finite()) {
                break;
            }
            for (i, &s) in sx.signs().iter().enumerate() {
                let signed = f64::from(s) * (pb[i] - pa[i]);
                if signed < -opts.slack {
                    failures.push(MonotoneFailure {
                        trial,
                        time: ta.times[idx],
                        coordinate: i,
                        gap: -opts.slack - signed,
                    });
                    break 'scan; // one counterexample per trial is enough
                }
            }
        }
    }

    let output_class = if out_monotone {
        OutputClass::Monotone
    } else if out_anti {
        OutputClass::AntiMonotone
    } else {
        OutputClass::Neither
    };
    Ok(MonotonicityVerdict {
        system_monotone: failures.is_empty(),
        output_class,
        failures,
        trials: opts.trials,
        slack: opts.slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(signs: &[i8]) -> OrthantOrder {
        OrthantOrder::from_signs(signs.to_vec()).unwrap()
    }

    #[test]
    fn leq_componentwise() {
        assert!(o(&[1, 1]).leq(&[1.0, 2.0], &[2.0, 3.0]).unwrap());
        assert!(!o(&[1, 1]).leq(&[1.0, 4.0], &[2.0, 3.0]).unwrap());
    }

    #[test]
    fn leq_mixed_signs() {
        // Second coordinate reversed: 5 >= 3 counts as "less or equal".
        assert!(o(&[1, -1]).leq(&[1.0, 5.0], &[2.0, 3.0]).unwrap());
        assert!(!o(&[1, -1]).leq(&[1.0, 2.0], &[2.0, 3.0]).unwrap());
    }

    #[test]
    fn leq_reflexive() {
        let ord = o(&[1, -1, 1]);
        let a = [0.3, -1.7, 2.2];
        assert!(ord.leq(&a, &a).unwrap());
    }

    #[test]
    fn leq_dimension_mismatch() {
        let err = o(&[1, 1]).leq(&[1.0], &[2.0, 3.0]).unwrap_err();
        assert_eq!(
            err,
            OrderError::DimensionMismatch {
                order_dim: 2,
                vec_dim: 1
            }
        );
    }

    #[test]
    fn leq_slack_absorbs_noise() {
        let ord = o(&[1]);
        assert!(!ord.leq(&[1.0], &[1.0 - 1e-9]).unwrap());
        assert!(ord.leq_slack(&[1.0], &[1.0 - 1e-9], 1e-7).unwrap());
    }

    #[test]
    fn reversed_flips_everything() {
        assert_eq!(o(&[1, 1]).reversed(), o(&[-1, -1]));
        let ord = o(&[1, -1, 1]);
        assert_eq!(ord.reversed().reversed(), ord);
    }

    #[test]
    fn product_concatenates() {
        let p = o(&[1]).product(&o(&[1]).reversed());
        assert_eq!(p, o(&[1, -1]));
        assert_eq!(p.dim(), 2);
        let assoc_l = o(&[1]).product(&o(&[-1])).product(&o(&[1, 1]));
        let assoc_r = o(&[1]).product(&o(&[-1]).product(&o(&[1, 1])));
        assert_eq!(assoc_l, assoc_r);
    }

    #[test]
    fn rejects_bad_signs() {
        assert_eq!(
            OrthantOrder::from_signs(vec![1, 0]).unwrap_err(),
            OrderError::BadSign { got: 0 }
        );
    }

    #[test]
    fn rectangle_scalar() {
        let (lo, hi) = o(&[1])
            .bounding_rectangle(&[vec![1.0], vec![3.0], vec![2.0]])
            .unwrap();
        assert_eq!((lo, hi), (vec![1.0], vec![3.0]));
    }

    #[test]
    fn rectangle_reversed_scalar() {
        let (lo, hi) = o(&[-1])
            .bounding_rectangle(&[vec![1.0], vec![3.0]])
            .unwrap();
        assert_eq!((lo, hi), (vec![3.0], vec![1.0]));
    }

    #[test]
    fn rectangle_two_dim() {
        let ord = o(&[1, 1]);
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let (lo, hi) = ord.bounding_rectangle(&pts).unwrap();
        assert_eq!((lo.clone(), hi.clone()), (vec![0.0, 0.0], vec![1.0, 1.0]));
        for p in &pts {
            assert!(ord.leq(&lo, p).unwrap());
            assert!(ord.leq(p, &hi).unwrap());
        }
    }

    #[test]
    fn rectangle_empty() {
        assert_eq!(
            o(&[1]).bounding_rectangle(&[]).unwrap_err(),
            OrderError::EmptyInput
        );
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_order(dim: usize) -> impl Strategy<Value = OrthantOrder> {
        proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], dim)
            .prop_map(|s| OrthantOrder::from_signs(s).unwrap())
    }

    proptest! {
        #[test]
        fn partial_order_laws(
            ord in arb_order(4),
            a in proptest::collection::vec(-10.0..10.0f64, 4),
            d1 in proptest::collection::vec(0.0..5.0f64, 4),
            d2 in proptest::collection::vec(0.0..5.0f64, 4),
        ) {
            // Build b >= a and c >= b by adding sign-aligned increments.
            let b: Vec<f64> = a.iter().zip(ord.signs()).zip(&d1)
                .map(|((&ai, &s), &di)| ai + f64::from(s) * di).collect();
            let c: Vec<f64> = b.iter().zip(ord.signs()).zip(&d2)
                .map(|((&bi, &s), &di)| bi + f64::from(s) * di).collect();
            prop_assert!(ord.leq(&a, &a).unwrap());
            prop_assert!(ord.leq(&a, &b).unwrap());
            prop_assert!(ord.leq(&b, &c).unwrap());
            prop_assert!(ord.leq(&a, &c).unwrap(), "transitivity");
            if ord.leq(&b, &a).unwrap() {
                prop_assert_eq!(&a, &b, "antisymmetry");
            }
        }

        #[test]
        fn rectangle_bounds_all_points(
            ord in arb_order(3),
            pts in proptest::collection::vec(proptest::collection::vec(-10.0..10.0f64, 3), 1..12),
        ) {
            let (lo, hi) = ord.bounding_rectangle(&pts).unwrap();
            prop_assert!(ord.leq(&lo, &hi).unwrap());
            for p in &pts {
                prop_assert!(ord.leq(&lo, p).unwrap());
                prop_assert!(ord.leq(p, &hi).unwrap());
            }
            // Tightness: every bound coordinate is attained by some point.
            for i in 0..3 {
                prop_assert!(pts.iter().any(|p| p[i] == lo[i]));
                prop_assert!(pts.iter().any(|p| p[i] == hi[i]));
            }
        }
    }
}

#[cfg(test)]
mod monotone_tests {
    use super::*;
    use crate::model::load_model;

    #[test]
    fn scalar_feedback_candidate_is_monotone_anti() {
        let model = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -0.5 * x1\n").unwrap();
        let v = check_monotone(&model, 20, 10.0, 1).unwrap();
        assert!(v.system_monotone, "{:?}", v.failures);
        assert_eq!(v.output_class, OutputClass::AntiMonotone);
    }

    #[test]
    fn goodwin_is_monotone_with_anti_output() {
        let model = load_model(
            "model goodwin\nstates x1 x2 x3\ninputs u1\nparam V = 2\nparam m = 4\n\
             dx1 = u1 - x1\ndx2 = x1 - x2\ndx3 = x2 - x3\ny1 = V / (1 + x3^m)\n",
        )
        .unwrap();
        let v = check_monotone(&model, 20, 15.0, 2).unwrap();
        assert!(v.system_monotone, "{:?}", v.failures);
        assert_eq!(v.output_class, OutputClass::AntiMonotone);
    }

    #[test]
    fn squared_output_is_neither_on_a_signed_box() {
        let model = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = x1^2\n").unwrap();
        let opts = MonotoneCheckOpts {
            trials: 30,
            horizon: 5.0,
            seed: 3,
            state_box: Some((vec![-2.0], vec![2.0])),
            ..MonotoneCheckOpts::default()
        };
        let v = check_monotone_with(&model, &opts).unwrap();
        assert!(v.system_monotone);
        assert_eq!(v.output_class, OutputClass::Neither);
    }

    #[test]
    fn sign_incompatible_input_breaks_order() {
        // State order reversed but input driving it up: ordered inputs
        // produce crossing trajectories.
        let model = load_model(
            "states x1\ninputs u1\norder_states -\norder_inputs +\ndx1 = -x1 + u1\ny1 = -x1\n",
        )
        .unwrap();
        let opts = MonotoneCheckOpts {
            trials: 20,
            horizon: 10.0,
            seed: 4,
            state_box: Some((vec![-2.0], vec![2.0])),
            input_box: Some((vec![0.0], vec![2.0])),
            ..MonotoneCheckOpts::default()
        };
        let v = check_monotone_with(&model, &opts).unwrap();
        assert!(!v.system_monotone);
        assert!(!v.failures.is_empty());
        let f = &v.failures[0];
        assert!(f.gap > 0.0 && f.time > 0.0);
    }

    #[test]
    fn quasi_monotone_linear_model_passes() {
        let model = load_model(
            "states x1 x2\ninputs u1\nlinear A = [[-2, 1], [0.5, -2]]\n\
             linear B = [[1], [0]]\nlinear C = [[0, 1]]\n",
        )
        .unwrap();
        let v = check_monotone(&model, 30, 10.0, 5).unwrap();
        assert!(v.system_monotone, "{:?}", v.failures);
        assert_eq!(v.output_class, OutputClass::AntiMonotone);
    }

    #[test]
    fn verdict_serializes_with_kebab_output_class() {
        let v = MonotonicityVerdict {
            system_monotone: true,
            output_class: OutputClass::AntiMonotone,
            failures: vec![],
            trials: 5,
            slack: 1e-7,
        };
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("\"output_class\":\"anti-monotone\""), "{json}");
        assert!(json.contains("\"system_monotone\":true"));
    }

    #[test]
    fn autonomous_model_checks_states_only() {
        let model = load_model("states x1\ndx1 = -x1\n").unwrap();
        let v = check_monotone(&model, 10, 5.0, 6).unwrap();
        assert!(v.system_monotone);
    }

    #[test]
    fn deterministic_per_seed() {
        let model = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -x1\n").unwrap();
        let a = check_monotone(&model, 10, 5.0, 42).unwrap();
        let b = check_monotone(&model, 10, 5.0, 42).unwrap();
        assert_eq!(a, b);
    }
}
