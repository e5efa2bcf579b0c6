//! Exact small-gain analysis for linear systems `dx/dt = Ax + Bu`,
//! `y = -Cx`: quasi-monotonicity of `A`, Hurwitz tests, the gain matrix
//! `K = -C A^{-1} B` and its spectral radius, the doubled-cascade block
//! matrices, and the consistency report tying them together.

mod eigen;
mod lu;

pub use eigen::{eigenvalues, EigenResult, MAX_EIGEN_DIM};
pub use lu::Lu;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::order::OrthantOrder;

/// Real parts this close to zero refuse a strict Hurwitz verdict.
pub const HURWITZ_MARGIN: f64 = 1e-9;
/// Spectral radii this close to one refuse a strict small-gain verdict.
pub const RHO_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearError {
    #[error("dimension mismatch: {message}")]
    DimensionMismatch { message: String },
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("matrix dimension {dim} exceeds the supported maximum {max}", max = MAX_EIGEN_DIM)]
    TooLarge { dim: usize },
    #[error(
        "QR iteration did not converge after {iterations} sweeps; isolated {found} of {dim} eigenvalues",
        found = isolated.len()
    )]
    NoConvergence {
        isolated: Vec<Complex64>,
        iterations: usize,
        dim: usize,
    },
    #[error("matrix is singular at working precision")]
    SingularA,
    #[error("margin case: {what} = {value} lies inside the +-{band} dead zone")]
    MarginCase { what: String, value: f64, band: f64 },
}

/// `A` generates an order-preserving flow for the orthant order `signs`
/// exactly when every sign-conjugated off-diagonal entry is nonnegative
/// (the Metzler condition for the all-`+` order).
pub fn is_quasi_monotone(a: &DMatrix<f64>, signs: &OrthantOrder) -> Result<bool, LinearError> {
    if a.nrows() != a.ncols() {
        return Err(LinearError::DimensionMismatch {
            message: format!("A must be square, got {}x{}", a.nrows(), a.ncols()),
        });
    }
    if signs.dim() != a.nrows() {
        return Err(LinearError::DimensionMismatch {
            message: format!(
                "order has {} signs but A is {}x{}",
                signs.dim(),
                a.nrows(),
                a.nrows()
            ),
        });
    }
    let s = signs.signs();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j && f64::from(s[i]) * f64::from(s[j]) * a[(i, j)] < 0.0 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Strict Hurwitz test with a dead zone: real parts within
/// [`HURWITZ_MARGIN`] of zero are a [`LinearError::MarginCase`] so callers
/// never turn a borderline spectrum into a confident verdict.
pub fn is_hurwitz(m: &DMatrix<f64>) -> Result<bool, LinearError> {
    let res = eigenvalues(m)?;
    let mu = res.max_real_part;
    if mu < -HURWITZ_MARGIN {
        Ok(true)
    } else if mu > HURWITZ_MARGIN {
        Ok(false)
    } else {
        Err(LinearError::MarginCase {
            what: "max real part".to_string(),
            value: mu,
            band: HURWITZ_MARGIN,
        })
    }
}

/// Hurwitz test with the margin folded into the value: `None` = margin.
fn hurwitz_flag(m: &DMatrix<f64>) -> Result<Option<bool>, LinearError> {
    match is_hurwitz(m) {
        Ok(v) => Ok(Some(v)),
        Err(LinearError::MarginCase { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// The static gain `K = -C A^{-1} B` of the system at equilibrium.
pub fn gain_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinearError> {
    check_triple_dims(a, b, c)?;
    let lu = Lu::factor(a);
    let x = lu.solve_matrix(b).ok_or(LinearError::SingularA)?;
    Ok(-(c * x))
}

/// Largest eigenvalue modulus. For entrywise nonnegative matrices the QR
/// result is cross-checked in debug builds against a shifted power
/// iteration whenever that iteration converges.
pub fn spectral_radius(k: &DMatrix<f64>) -> Result<f64, LinearError> {
    let res = eigenvalues(k)?;
    let rho = res.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max);
    if k.iter().all(|v| *v >= 0.0) {
        if let Some(est) = perron_root_power_iteration(k) {
            debug_assert!(
                (est - rho).abs() <= 1e-6 * rho.max(1.0),
                "power iteration {est} disagrees with QR spectral radius {rho}"
            );
        }
    }
    Ok(rho)
}

/// Rayleigh-quotient power iteration on `K + I` (the shift keeps periodic
/// sign patterns from stalling the iteration), started from the all-ones
/// vector, 500 rounds. Returns `None` when the estimate has not settled.
pub(crate) fn perron_root_power_iteration(k: &DMatrix<f64>) -> Option<f64> {
    let n = k.nrows();
    if n == 0 {
        return None;
    }
    let mut x = vec![1.0_f64; n];
    let mut prev = f64::NAN;
    let mut est = f64::NAN;
    for _ in 0..500 {
        let mut y = x.clone();
        for i in 0..n {
            for (j, xj) in x.iter().enumerate() {
                y[i] += k[(i, j)] * xj;
            }
        }
        let num: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let den: f64 = x.iter().map(|a| a * a).sum();
        prev = est;
        est = num / den - 1.0;
        let max = y.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        for v in &mut y {
            *v /= max;
        }
        x = y;
    }
    if (est - prev).abs() <= 1e-9 * est.abs().max(1.0) {
        Some(est)
    } else {
        None
    }
}

/// Block matrices of the doubled open-loop cascade and its closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedMatrices {
    /// `[[A, 0], [-BC, A]]`
    pub f: DMatrix<f64>,
    /// `[B; 0]`
    pub g: DMatrix<f64>,
    /// `[0, -C]`
    pub h: DMatrix<f64>,
    /// `[[A, -BC], [-BC, A]]`
    pub f_plus_gh: DMatrix<f64>,
}

fn check_triple_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(usize, usize), LinearError> {
    if a.nrows() != a.ncols() {
        return Err(LinearError::DimensionMismatch {
            message: format!("A must be square, got {}x{}", a.nrows(), a.ncols()),
        });
    }
    let n = a.nrows();
    let m = b.ncols();
    if b.nrows() != n {
        return Err(LinearError::DimensionMismatch {
            message: format!("B must have {n} rows, got {}", b.nrows()),
        });
    }
    if c.nrows() != m || c.ncols() != n {
        return Err(LinearError::DimensionMismatch {
            message: format!("C must be {m}x{n}, got {}x{}", c.nrows(), c.ncols()),
        });
    }
    if [a, b, c].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(LinearError::NonFinite);
    }
    Ok((n, m))
}

pub fn extended_matrices(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<ExtendedMatrices, LinearError> {
    let (n, m) = check_triple_dims(a, b, c)?;
    let bc = b * c;
    let f = DMatrix::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, true) => a[(i, j)],
        (true, false) => 0.0,
        (false, true) => -bc[(i - n, j)],
        (false, false) => a[(i - n, j - n)],
    });
    let g = DMatrix::from_fn(2 * n, m, |i, j| if i < n { b[(i, j)] } else { 0.0 });
    let h = DMatrix::from_fn(m, 2 * n, |i, j| if j < n { 0.0 } else { -c[(i, j - n)] });
    let f_plus_gh = &f + &g * &h;
    Ok(ExtendedMatrices { f, g, h, f_plus_gh })
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Everything the linear small-gain story says about one `(A, B, C)`
/// triple. Hurwitz entries are `None` on margin cases; the three-way
/// consistency statement is only evaluated when every participating test
/// gave a strict answer.
#[derive(Debug, Clone, Serialize)]
pub struct SmallGainReport {
    pub k: Vec<Vec<f64>>,
    pub rho_k: f64,
    pub rho_k2: f64,
    pub rho_margin: bool,
    pub hurwitz_a: Option<bool>,
    pub hurwitz_fgh: Option<bool>,
    pub hurwitz_a_minus_bc: Option<bool>,
    pub hurwitz_a_plus_bc: Option<bool>,
    /// `(rho(K) < 1) == Hurwitz(F+GH) == (Hurwitz(A-BC) && Hurwitz(A+BC))`,
    /// evaluated outside margin cases.
    pub equivalence_consistent: Option<bool>,
    /// `A-BC` Hurwitz while `A+BC` is not: the delay-free closed loop is
    /// stable even though the small-gain condition fails.
    pub gap_stable_but_small_gain_fails: bool,
    pub assumptions_met: bool,
    pub assumption_notes: Vec<String>,
    pub verdict: String,
}

/// Compute the full report. `signs` is the state order; input channels are
/// taken in the all-`+` orientation (conjugate `B` and `C` beforehand if an
/// input coordinate is reversed; that leaves `BC`, `K`'s spectrum, and
/// every Hurwitz test unchanged).
pub fn small_gain_report(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    signs: &OrthantOrder,
) -> Result<SmallGainReport, LinearError> {
    let (n, _m) = check_triple_dims(a, b, c)?;
    if signs.dim() != n {
        return Err(LinearError::DimensionMismatch {
            message: format!("order has {} signs but A is {n}x{n}", signs.dim()),
        });
    }

    let mut notes = Vec::new();
    if !is_quasi_monotone(a, signs)? {
        notes.push("A is not quasi-monotone for the declared order".to_string());
    }
    let hurwitz_a = hurwitz_flag(a)?;
    match hurwitz_a {
        Some(true) => {}
        Some(false) => notes.push("A is not Hurwitz".to_string()),
        None => notes.push("A sits on the Hurwitz margin".to_string()),
    }
    let sg = signs.signs();
    let b_ok = (0..b.nrows()).all(|i| (0..b.ncols()).all(|j| f64::from(sg[i]) * b[(i, j)] >= 0.0));
    if !b_ok {
        notes.push("B is not sign-compatible with the state order".to_string());
    }
    let c_ok = (0..c.nrows()).all(|i| (0..c.ncols()).all(|j| f64::from(sg[j]) * c[(i, j)] >= 0.0));
    if !c_ok {
        notes.push("C is not sign-compatible with the state order".to_string());
    }
    let assumptions_met = notes.is_empty();

    let k = gain_matrix(a, b, c)?;
    let rho_k = spectral_radius(&k)?;
    let rho_k2 = spectral_radius(&(&k * &k))?;
    let rho_margin = (rho_k - 1.0).abs() < RHO_MARGIN;

    if assumptions_met {
        let scale = k.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if k.iter().any(|v| *v < -1e-12 * scale) {
            notes.push(
                "warning: K has negative entries despite monotone assumptions holding"
                    .to_string(),
            );
        }
    }

    let ext = extended_matrices(a, b, c)?;
    let bc = b * c;
    let a_minus_bc = a - &bc;
    let a_plus_bc = a + &bc;
    let hurwitz_fgh = hurwitz_flag(&ext.f_plus_gh)?;
    let hurwitz_a_minus_bc = hurwitz_flag(&a_minus_bc)?;
    let hurwitz_a_plus_bc = hurwitz_flag(&a_plus_bc)?;

    let equivalence_consistent = match (rho_margin, hurwitz_fgh, hurwitz_a_minus_bc, hurwitz_a_plus_bc)
    {
        (false, Some(fgh), Some(minus), Some(plus)) => {
            let small_gain = rho_k < 1.0;
            Some(small_gain == fgh && fgh == (minus && plus))
        }
        _ => None,
    };
    let gap = hurwitz_a_minus_bc == Some(true) && hurwitz_a_plus_bc == Some(false);

    let verdict = if !assumptions_met {
        format!("assumptions unmet ({}); quantities computed anyway", notes.join("; "))
    } else if rho_margin {
        format!("margin case: rho(K) = {rho_k} is within {RHO_MARGIN} of 1; no strict verdict")
    } else if rho_k < 1.0 {
        format!("small-gain holds: rho(K) = {rho_k} < 1; closed loop stable for any delay")
    } else if gap {
        "small-gain fails; A-BC Hurwitz (closed loop still stable)".to_string()
    } else {
        "small-gain fails and the closed loop is unstable (A-BC not Hurwitz)".to_string()
    };

    Ok(SmallGainReport {
        k: matrix_rows(&k),
        rho_k,
        rho_k2,
        rho_margin,
        hurwitz_a,
        hurwitz_fgh,
        hurwitz_a_minus_bc,
        hurwitz_a_plus_bc,
        equivalence_consistent,
        gap_stable_but_small_gain_fails: gap,
        assumptions_met,
        assumption_notes: notes,
        verdict,
    })
}

/// Which side of `rho(K) = 1` a random instance should land on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainRegime {
    Below1,
    Above1,
}

/// Random Metzler-Hurwitz instance for test suites: `A = Q - (rho(Q)+d) I`
/// with `Q` entrywise uniform(0,1) and `d` uniform(0.1,1), which is Metzler
/// and Hurwitz by construction; `B`, `C` entrywise uniform(0,1) with `B`
/// rescaled so `rho(K)` lands in the requested regime, away from 1.
pub fn random_metzler_instance<R: rand::Rng>(
    rng: &mut R,
    n: usize,
    m: usize,
    regime: GainRegime,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    assert!(n >= 1 && m >= 1);
    loop {
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let rho_q = spectral_radius(&q).expect("nonnegative matrix spectrum");
        let delta = rng.random_range(0.1..1.0);
        let a = &q - DMatrix::identity(n, n) * (rho_q + delta);
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..1.0));
        let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
        let Ok(k) = gain_matrix(&a, &b, &c) else {
            continue;
        };
        let Ok(rho0) = spectral_radius(&k) else {
            continue;
        };
        if rho0 < 1e-9 {
            continue;
        }
        let target = match regime {
            GainRegime::Below1 => rng.random_range(0.05..0.9),
            GainRegime::Above1 => rng.random_range(1.1..4.0),
        };
        // K is linear in B, so scaling B scales rho(K) exactly.
        return (a, b * (target / rho0), c);
    }
}
