//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line with its runtime. Every tolerance is pinned as a named
//! constant next to the criterion that uses it.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monogain::characteristic::{Characteristic, IterationClass};
use monogain::delay::{delay_closed_loop, pseudo_oscillation_experiment, recommended_delay};
use monogain::extended::{
    build_closed_loop, build_extended_closed, build_extended_open, char_seed_pairs,
    check_boundedness, find_extended_equilibria, EquilibriaOpts,
};
use monogain::integrate::{integrate, InputSignal, IntegratorOpts, Method};
use monogain::linear::{
    eigenvalues, gain_matrix, is_hurwitz, random_metzler_instance, small_gain_report,
    spectral_radius, GainRegime,
};
use monogain::model::{load_model, ModelDef};
use monogain::order::{check_monotone_with, MonotoneCheckOpts, OrthantOrder, OutputClass};

fn criterion(number: usize, name: &str, budget: Option<Duration>, body: impl FnOnce()) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let within_budget = budget.is_none_or(|b| elapsed <= b);
    let pass = result.is_ok() && within_budget;
    println!(
        "criterion {number} ({name}): {} [{elapsed:.2?}]",
        if pass { "PASS" } else { "FAIL" }
    );
    if let Err(cause) = result {
        resume_unwind(cause);
    }
    if !within_budget {
        panic!(
            "criterion {number} overran its {:?} budget: {elapsed:?}",
            budget.unwrap()
        );
    }
}

fn fixture(name: &str) -> ModelDef {
    let path = format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"));
    load_model(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))).unwrap()
}

fn inf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

// 1. Scalar loop dx = -x + u, h(x) = -kx: rho(K) = k exactly; below k = 1
// the whole chain is Hurwitz, above it only A - BC survives and the gap
// flag is raised.
const C1_RHO_TOL: f64 = 1e-10;
const C1_BUDGET: Duration = Duration::from_secs(1);

#[test]
fn criterion_1_scalar_golden() {
    criterion(1, "scalar golden", Some(C1_BUDGET), || {
        let order = OrthantOrder::all_plus(1);
        for k in [0.25, 0.5, 0.9] {
            let report = small_gain_report(
                &dmatrix![-1.0],
                &dmatrix![1.0],
                &dmatrix![k],
                &order,
            )
            .unwrap();
            assert!((report.rho_k - k).abs() <= C1_RHO_TOL, "rho = {}", report.rho_k);
            assert_eq!(report.hurwitz_fgh, Some(true), "k = {k}");
            assert_eq!(report.hurwitz_a_minus_bc, Some(true), "k = {k}");
            assert_eq!(report.hurwitz_a_plus_bc, Some(true), "k = {k}");
            assert!(!report.gap_stable_but_small_gain_fails);
            assert!(is_hurwitz(&dmatrix![-(1.0 + k)]).unwrap());
            assert!(is_hurwitz(&dmatrix![-(1.0 - k)]).unwrap());
        }
        for k in [1.1, 2.0, 5.0] {
            let report = small_gain_report(
                &dmatrix![-1.0],
                &dmatrix![1.0],
                &dmatrix![k],
                &order,
            )
            .unwrap();
            assert!((report.rho_k - k).abs() <= C1_RHO_TOL, "rho = {}", report.rho_k);
            assert_eq!(report.hurwitz_fgh, Some(false), "k = {k}");
            assert_eq!(report.hurwitz_a_minus_bc, Some(true), "k = {k}");
            assert_eq!(report.hurwitz_a_plus_bc, Some(false), "k = {k}");
            assert!(report.gap_stable_but_small_gain_fails, "k = {k}");
            assert!(!is_hurwitz(&dmatrix![-(1.0 - k)]).unwrap());
        }
    });
}

// 2. 200 seeded random Metzler-Hurwitz instances (n <= 8, m <= 3), margin
// cases |rho(K) - 1| < 1e-6 excluded: the three-way equivalence holds on
// every instance and rho(K^2) = rho(K)^2 to 1e-8 relative.
const C2_MARGIN_EXCLUSION: f64 = 1e-6;
const C2_RHO_SQUARE_REL_TOL: f64 = 1e-8;
const C2_BUDGET: Duration = Duration::from_secs(10);

#[test]
fn criterion_2_equivalence_suite() {
    criterion(2, "linear equivalence suite", Some(C2_BUDGET), || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 200 {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(1..=3);
            let regime = if checked % 2 == 0 {
                GainRegime::Below1
            } else {
                GainRegime::Above1
            };
            let (a, b, c) = random_metzler_instance(&mut rng, n, m, regime);
            let k = gain_matrix(&a, &b, &c).unwrap();
            let rho = spectral_radius(&k).unwrap();
            if (rho - 1.0).abs() < C2_MARGIN_EXCLUSION {
                continue;
            }
            let report = small_gain_report(&a, &b, &c, &OrthantOrder::all_plus(n)).unwrap();
            assert_eq!(
                report.equivalence_consistent,
                Some(true),
                "instance {checked}: n={n} m={m} rho={rho}"
            );
            let expected = report.rho_k * report.rho_k;
            assert!(
                (report.rho_k2 - expected).abs() <= C2_RHO_SQUARE_REL_TOL * expected.max(1.0),
                "instance {checked}: rho(K^2) = {} vs rho(K)^2 = {expected}",
                report.rho_k2
            );
            checked += 1;
        }
    });
}

// 3. On 20 random linear instances the simulated characteristic matches the
// analytic steady-state gain -K u at 5 random inputs each.
const C3_REL_TOL: f64 = 1e-5;
const C3_BUDGET: Duration = Duration::from_secs(30);

#[test]
fn criterion_3_characteristic_consistency() {
    criterion(3, "characteristic vs -Ku", Some(C3_BUDGET), || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for inst in 0..20 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=2);
            let (a, b, c) = random_metzler_instance(&mut rng, n, m, GainRegime::Below1);
            let model = ModelDef::from_linear(format!("inst{inst}"), &a, &b, &c).unwrap();
            let k = gain_matrix(&a, &b, &c).unwrap();
            let ctx = Characteristic::with_defaults(&model);
            let mut seed = vec![0.0; n];
            for _ in 0..5 {
                let u: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
                let (y, x_u) = ctx.value_and_state(&u, &seed).unwrap();
                seed = x_u;
                let expected = -(&k * DVector::from_column_slice(&u));
                let scale = expected.amax().max(1.0);
                for j in 0..m {
                    assert!(
                        (y[j] - expected[j]).abs() <= C3_REL_TOL * scale,
                        "instance {inst}: k(u)[{j}] = {} vs {}",
                        y[j],
                        expected[j]
                    );
                }
            }
        }
    });
}

// 4. Extended closed loop from diagonal starts stays diagonal to 1e-9 and
// reproduces the closed loop to 1e-8; the extended open loop passes the
// sampling monotonicity check with a monotone output.
const C4_DIAGONAL_TOL: f64 = 1e-9;
const C4_MATCH_TOL: f64 = 1e-8;

#[test]
fn criterion_4_diagonal_and_monotonicity() {
    criterion(4, "extended diagonal suite", None, || {
        let model = fixture("goodwin3.model");
        let ext = build_extended_open(&model).unwrap();
        let ext_closed = build_extended_closed(&model).unwrap();
        let closed = build_closed_loop(&model).unwrap();
        let opts = IntegratorOpts {
            method: Method::Rk4Fixed,
            step: 0.01,
            ..IntegratorOpts::default()
        };
        let no_input = InputSignal::Constant(Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let x0: Vec<f64> = (0..model.n()).map(|_| rng.random_range(0.0..2.0)).collect();
            let mut xi0 = x0.clone();
            xi0.extend_from_slice(&x0);
            let ext_traj =
                integrate(&ext_closed, &xi0, &no_input, (0.0, 15.0), &opts).unwrap();
            let base_traj = integrate(&closed, &x0, &no_input, (0.0, 15.0), &opts).unwrap();
            assert_eq!(ext_traj.times.len(), base_traj.times.len());
            for (xi, x) in ext_traj.states.iter().zip(&base_traj.states) {
                let (xpart, zpart) = xi.split_at(model.n());
                assert!(
                    inf_diff(xpart, zpart) <= C4_DIAGONAL_TOL,
                    "trial {trial}: diagonal drift {}",
                    inf_diff(xpart, zpart)
                );
                assert!(
                    inf_diff(xpart, x) <= C4_MATCH_TOL,
                    "trial {trial}: closed-loop mismatch {}",
                    inf_diff(xpart, x)
                );
            }
        }
        let verdict = check_monotone_with(
            &ext.model,
            &MonotoneCheckOpts {
                trials: 50,
                state_box: Some(ext.natural_box()),
                ..MonotoneCheckOpts::default()
            },
        )
        .unwrap();
        assert!(verdict.system_monotone, "failures: {:?}", verdict.failures);
        assert_eq!(verdict.output_class, OutputClass::Monotone);
    });
}

// 5. Shallow Goodwin loop (V = 1, m = 1): the iteration contracts to the
// golden-ratio fixed point, k o k has a unique solution, the extended
// equilibrium is unique and diagonal with the global-convergence verdict,
// and direct closed-loop simulation lands on the same state.
const C5_USTAR: f64 = 0.618_033_988_749_894_9; // (sqrt(5) - 1) / 2
const C5_ITER_TOL: f64 = 1e-6;
const C5_SIM_TOL: f64 = 1e-4;

#[test]
fn criterion_5_goodwin_convergent_regime() {
    criterion(5, "convergent feedback loop", None, || {
        let model = fixture("goodwin3_v1m1.model");
        let ctx = Characteristic::with_defaults(&model);
        for s in [0.0, 1.0, 5.0] {
            let it = ctx.iterate(&[s], 500, 1e-9).unwrap();
            assert_eq!(it.classification, IterationClass::FixedPoint, "seed {s}");
            let fp = it.fixed_point.expect("fixed point present");
            assert!(
                (fp[0] - C5_USTAR).abs() <= C5_ITER_TOL,
                "seed {s}: limit {} vs {C5_USTAR}",
                fp[0]
            );
        }
        let seeds = vec![vec![0.0], vec![1.0], vec![5.0]];
        let k2 = ctx.find_k2_solutions(&seeds, 1e-9).unwrap();
        assert!(k2.unique, "solutions: {:?}", k2.solutions);

        let pairs = char_seed_pairs(&ctx, &k2).unwrap();
        let bounded = check_boundedness(&model, 20, 40.0, 1e6, 0).unwrap();
        assert!(bounded.bounded);
        let report =
            find_extended_equilibria(&model, &pairs, Some(&bounded), &EquilibriaOpts::default())
                .unwrap();
        assert!(report.unique, "equilibria: {:?}", report.equilibria.len());
        assert!(report.equilibria[0].diagonal);
        assert!(
            report.verdict.contains("globally convergent"),
            "verdict: {}",
            report.verdict
        );

        let xbar = report.equilibria[0].x.clone();
        let closed = build_closed_loop(&model).unwrap();
        let opts = IntegratorOpts::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let x0: Vec<f64> = (0..model.n()).map(|_| rng.random_range(0.0..2.0)).collect();
            let traj = integrate(
                &closed,
                &x0,
                &InputSignal::Constant(Vec::new()),
                (0.0, 60.0),
                &opts,
            )
            .unwrap();
            assert!(
                inf_diff(traj.last_state(), &xbar) <= C5_SIM_TOL,
                "trial {trial}: final {:?} vs {:?}",
                traj.last_state(),
                xbar
            );
        }
    });
}

// 6. Steep Goodwin loop (V = 2, m = 4): the iteration settles on a
// period-two orbit, k o k has exactly three solutions, and the extended
// system has three equilibria: one diagonal, two swap-symmetric partners.
const C6_SWAP_TOL: f64 = 1e-6;

#[test]
fn criterion_6_goodwin_period_two_regime() {
    criterion(6, "period-two feedback loop", None, || {
        let model = fixture("goodwin3.model");
        let ctx = Characteristic::with_defaults(&model);
        let it = ctx.iterate(&[0.0], 500, 1e-9).unwrap();
        assert_eq!(it.classification, IterationClass::PeriodTwo);

        let seeds = vec![vec![0.0], vec![1.0], vec![5.0]];
        let k2 = ctx.find_k2_solutions(&seeds, 1e-9).unwrap();
        assert_eq!(k2.solutions.len(), 3, "solutions: {:?}", k2.solutions);
        assert!(k2.undecided_seeds.is_empty());

        let pairs = char_seed_pairs(&ctx, &k2).unwrap();
        let bounded = check_boundedness(&model, 20, 40.0, 1e6, 0).unwrap();
        let report =
            find_extended_equilibria(&model, &pairs, Some(&bounded), &EquilibriaOpts::default())
                .unwrap();
        assert_eq!(report.equilibria.len(), 3);
        let diagonal: Vec<_> = report.equilibria.iter().filter(|e| e.diagonal).collect();
        let off: Vec<_> = report.equilibria.iter().filter(|e| !e.diagonal).collect();
        assert_eq!(diagonal.len(), 1);
        assert_eq!(off.len(), 2);
        assert!(
            inf_diff(&off[0].x, &off[1].z) <= C6_SWAP_TOL
                && inf_diff(&off[0].z, &off[1].x) <= C6_SWAP_TOL,
            "off-diagonal equilibria are not swap partners"
        );
    });
}

// 7. Delayed feedback: at the period-two parameters with r = 10x the
// open-loop settling time the trajectory from constant history x0 makes at
// least 3 alternating delta-visits to each target within 20r
// (delta = 0.1 ||x0 - x1||_inf); and the gain-1/2 scalar loop settles below
// 1e-4 for every delay in {0.5, 1, 2, 5, 10, 50}.
const C7_VISITS_REQUIRED: usize = 3;
const C7_LINEAR_SETTLE_TOL: f64 = 1e-4;
const C7_BUDGET: Duration = Duration::from_secs(120);

#[test]
fn criterion_7_pseudo_oscillation() {
    criterion(7, "delay pseudo-oscillation", Some(C7_BUDGET), || {
        let model = fixture("goodwin3.model");
        let ctx = Characteristic::with_defaults(&model);
        let it = ctx.iterate(&[0.0], 500, 1e-9).unwrap();
        let (u0, u1) = it.period_two.expect("period-two pair");
        let r = recommended_delay(&model, &u0, &u1).unwrap();
        assert!(r.is_finite() && r > 0.0);
        let report = pseudo_oscillation_experiment(
            &model,
            &u0,
            &u1,
            r,
            C7_VISITS_REQUIRED,
            None, // delta = 0.1 ||x0 - x1||_inf
            None, // t_max = 20 r
            &IntegratorOpts::default(),
        )
        .unwrap();
        assert!(
            report.pseudo_oscillation_detected,
            "r = {r}: visits {:?}, min distances {:?}",
            report.visit_counts, report.min_distances
        );
        assert!(report.alternating);
        assert!(report.visit_counts[0] >= C7_VISITS_REQUIRED);
        assert!(report.visit_counts[1] >= C7_VISITS_REQUIRED);

        let lag = load_model("states x1\ninputs u1\ndx1 = -x1 + u1\ny1 = -0.5 * x1\n").unwrap();
        for r in [0.5, 1.0, 2.0, 5.0, 10.0, 50.0] {
            let problem = delay_closed_loop(&lag, r).unwrap();
            let t_end = 40.0 + 15.0 * r;
            let traj = problem
                .integrate(&[1.0], t_end, &IntegratorOpts::default())
                .unwrap();
            assert!(
                traj.last_state()[0].abs() < C7_LINEAR_SETTLE_TOL,
                "r = {r}: |x({t_end})| = {}",
                traj.last_state()[0].abs()
            );
        }
    });
}

// 8. Numerics base: the fixed-step integrator shows fourth-order
// convergence on dx = -x (error ratio 16 +- 20% per step halving), and the
// eigensolver satisfies the trace and determinant identities on 100 random
// matrices up to n = 10.
const C8_RATIO_LO: f64 = 12.8;
const C8_RATIO_HI: f64 = 19.2;
const C8_EIG_REL_TOL: f64 = 1e-8;

#[test]
fn criterion_8_numerics_base() {
    criterion(8, "numerics base", None, || {
        let model = load_model("states x1\ninputs u1\ndx1 = -x1\ny1 = -x1\n").unwrap();
        let input = InputSignal::Constant(vec![0.0]);
        let exact = (-1.0f64).exp();
        let err_at = |h: f64| -> f64 {
            let opts = IntegratorOpts {
                method: Method::Rk4Fixed,
                step: h,
                ..IntegratorOpts::default()
            };
            let traj = integrate(&model, &[1.0], &input, (0.0, 1.0), &opts).unwrap();
            (traj.last_state()[0] - exact).abs()
        };
        let errors = [err_at(0.1), err_at(0.05), err_at(0.025)];
        for pair in errors.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(
                (C8_RATIO_LO..=C8_RATIO_HI).contains(&ratio),
                "convergence ratio {ratio} outside [{C8_RATIO_LO}, {C8_RATIO_HI}] (errors {errors:?})"
            );
        }

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for inst in 0..100 {
            let n = rng.random_range(1..=10);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let eig = eigenvalues(&a).unwrap();
            let trace: f64 = a.trace();
            let sum: f64 = eig.eigenvalues.iter().map(|l| l.re).sum();
            let sum_im: f64 = eig.eigenvalues.iter().map(|l| l.im).sum();
            assert!(
                (sum - trace).abs() <= C8_EIG_REL_TOL * trace.abs().max(1.0),
                "instance {inst}: eigenvalue sum {sum} vs trace {trace}"
            );
            assert!(sum_im.abs() <= C8_EIG_REL_TOL, "instance {inst}: sum im {sum_im}");
            let det = a.determinant();
            let prod = eig
                .eigenvalues
                .iter()
                .fold(num_complex::Complex64::new(1.0, 0.0), |acc, l| acc * l);
            assert!(
                (prod.re - det).abs() <= C8_EIG_REL_TOL * det.abs().max(1.0),
                "instance {inst}: eigenvalue product {} vs det {det}",
                prod.re
            );
            assert!(
                prod.im.abs() <= C8_EIG_REL_TOL * det.abs().max(1.0),
                "instance {inst}: product imaginary part {}",
                prod.im
            );
        }
    });
}
