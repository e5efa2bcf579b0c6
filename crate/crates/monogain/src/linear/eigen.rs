//! Eigenvalues of real square matrices.
//!
//! Pipeline: diagonal balancing (radix-2 similarity scaling), Householder
//! reduction to upper Hessenberg form, then implicitly shifted Francis
//! double-step QR iteration to quasi-triangular form, reading eigenvalues
//! off the 1x1 and 2x2 diagonal blocks. This is the classical
//! EISPACK/Handbook route; only eigenvalues are computed, so no
//! transformation accumulation or back-substitution is carried.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::LinearError;

pub const MAX_EIGEN_DIM: usize = 200;
/// Total Francis sweeps allowed per matrix before giving up.
const SWEEPS_PER_DIM: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// All eigenvalues, sorted by descending real part, then descending
    /// imaginary part. Complex values occur in conjugate pairs.
    pub eigenvalues: Vec<Complex64>,
    pub max_real_part: f64,
    /// Francis sweeps used.
    pub iterations: usize,
}

/// Balance a matrix by an exact diagonal similarity (powers of two), making
/// row and column norms comparable. Eigenvalues are preserved exactly.
fn balance(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    const RADIX: f64 = 2.0;
    const SQRDX: f64 = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= SQRDX;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= SQRDX;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    g = 1.0 / f;
                    for j in 0..n {
                        a[(i, j)] *= g;
                    }
                    for j in 0..n {
                        a[(j, i)] *= f;
                    }
                }
            }
        }
    }
}

/// Householder reduction to upper Hessenberg form (the Handbook `orthes`
/// procedure). Entries below the first subdiagonal are left as reduction
/// residue; the QR stage never reads them.
fn hessenberg(h: &mut DMatrix<f64>) {
    let n = h.nrows();
    if n < 3 {
        return;
    }
    let low = 0usize;
    let high = n - 1;
    let mut ort = vec![0.0_f64; n];

    for m in (low + 1)..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[(i, m - 1)].abs();
        }
        if scale != 0.0 {
            let mut hh = 0.0;
            for i in (m..=high).rev() {
                ort[i] = h[(i, m - 1)] / scale;
                hh += ort[i] * ort[i];
            }
            let mut g = hh.sqrt();
            if ort[m] > 0.0 {
                g = -g;
            }
            hh -= ort[m] * g;
            ort[m] -= g;

            // H <- (I - u u^T / hh) H (I - u u^T / hh)
            for j in m..n {
                let mut f = 0.0;
                for i in (m..=high).rev() {
                    f += ort[i] * h[(i, j)];
                }
                f /= hh;
                for i in m..=high {
                    h[(i, j)] -= f * ort[i];
                }
            }
            for i in 0..=high {
                let mut f = 0.0;
                for j in (m..=high).rev() {
                    f += ort[j] * h[(i, j)];
                }
                f /= hh;
                for j in m..=high {
                    h[(i, j)] -= f * ort[j];
                }
            }
            ort[m] *= scale;
            h[(m, m - 1)] = scale * g;
        }
    }
}

/// Ok: (real parts, imaginary parts, sweeps used). Err on sweep
/// exhaustion: the isolated suffix of the spectrum plus the sweep count.
type HqrResult = Result<(Vec<f64>, Vec<f64>, usize), (Vec<Complex64>, usize)>;

/// Francis double-shift QR on an upper Hessenberg matrix (the Handbook
/// `hqr` procedure, eigenvalues only).
#[allow(clippy::too_many_lines, unused_assignments)]
fn hqr(h: &mut DMatrix<f64>) -> HqrResult {
    let nn = h.nrows() as isize;
    let mut d = vec![0.0_f64; nn as usize];
    let mut e = vec![0.0_f64; nn as usize];

    let at = |h: &DMatrix<f64>, i: isize, j: isize| h[(i as usize, j as usize)];
    macro_rules! hm {
        ($i:expr, $j:expr) => {
            h[($i as usize, $j as usize)]
        };
    }

    let mut n = nn - 1;
    let low: isize = 0;
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in (i - 1).max(0)..nn {
            norm += at(h, i, j).abs();
        }
    }

    let cap = SWEEPS_PER_DIM * nn as usize;
    let mut total_sweeps = 0usize;
    let mut iter = 0;
    while n >= low {
        // Look for a single small subdiagonal element.
        let mut l = n;
        while l > low {
            s = at(h, l - 1, l - 1).abs() + at(h, l, l).abs();
            if s == 0.0 {
                s = norm;
            }
            if at(h, l, l - 1).abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One root found.
            hm!(n, n) += exshift;
            d[n as usize] = at(h, n, n);
            e[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // Two roots found.
            w = at(h, n, n - 1) * at(h, n - 1, n);
            p = (at(h, n - 1, n - 1) - at(h, n, n)) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            hm!(n, n) += exshift;
            hm!(n - 1, n - 1) += exshift;
            x = at(h, n, n);
            if q >= 0.0 {
                // Real pair.
                z = if p >= 0.0 { p + z } else { p - z };
                d[(n - 1) as usize] = x + z;
                d[n as usize] = d[(n - 1) as usize];
                if z != 0.0 {
                    d[n as usize] = x - w / z;
                }
                e[(n - 1) as usize] = 0.0;
                e[n as usize] = 0.0;
            } else {
                // Complex conjugate pair.
                d[(n - 1) as usize] = x + p;
                d[n as usize] = x + p;
                e[(n - 1) as usize] = z;
                e[n as usize] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            // No convergence yet: form a shift.
            x = at(h, n, n);
            y = 0.0;
            w = 0.0;
            if l < n {
                y = at(h, n - 1, n - 1);
                w = at(h, n, n - 1) * at(h, n - 1, n);
            }

            // Exceptional shift (Wilkinson's ad hoc form).
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    hm!(i, i) -= x;
                }
                s = at(h, n, n - 1).abs() + at(h, n - 1, n - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }

            // Second exceptional shift.
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        hm!(i, i) -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }

            iter += 1;
            total_sweeps += 1;
            if total_sweeps > cap {
                // Roots at indices > n were already isolated.
                let found: Vec<Complex64> = ((n + 1)..nn)
                    .map(|i| Complex64::new(d[i as usize], e[i as usize]))
                    .collect();
                return Err((found, total_sweeps));
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            while m >= l {
                z = at(h, m, m);
                r = x - z;
                s = y - z;
                p = (r * s - w) / at(h, m + 1, m) + at(h, m, m + 1);
                q = at(h, m + 1, m + 1) - z - r - s;
                r = at(h, m + 2, m + 1);
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if at(h, m, m - 1).abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs()
                            * (at(h, m - 1, m - 1).abs()
                                + z.abs()
                                + at(h, m + 1, m + 1).abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in (m + 2)..=n {
                hm!(i, i - 2) = 0.0;
                if i > m + 2 {
                    hm!(i, i - 3) = 0.0;
                }
            }

            // Double QR step on rows l..=n, columns m..=n.
            for k in m..n {
                let notlast = k != n - 1;
                if k != m {
                    p = at(h, k, k - 1);
                    q = at(h, k + 1, k - 1);
                    r = if notlast { at(h, k + 2, k - 1) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        hm!(k, k - 1) = -s * x;
                    } else if l != m {
                        hm!(k, k - 1) = -at(h, k, k - 1);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    // Row modification.
                    for j in k..nn {
                        p = at(h, k, j) + q * at(h, k + 1, j);
                        if notlast {
                            p += r * at(h, k + 2, j);
                            hm!(k + 2, j) -= p * z;
                        }
                        hm!(k, j) -= p * x;
                        hm!(k + 1, j) -= p * y;
                    }

                    // Column modification.
                    for i in 0..=n.min(k + 3) {
                        p = x * at(h, i, k) + y * at(h, i, k + 1);
                        if notlast {
                            p += z * at(h, i, k + 2);
                            hm!(i, k + 2) -= p * r;
                        }
                        hm!(i, k) -= p;
                        hm!(i, k + 1) -= p * q;
                    }
                }
            }
        }
    }

    Ok((d, e, total_sweeps))
}

/// All eigenvalues of a square real matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<EigenResult, LinearError> {
    if m.nrows() != m.ncols() {
        return Err(LinearError::DimensionMismatch {
            message: format!("eigenvalues need a square matrix, got {}x{}", m.nrows(), m.ncols()),
        });
    }
    let dim = m.nrows();
    if dim == 0 {
        return Err(LinearError::DimensionMismatch {
            message: "eigenvalues need a nonempty matrix".to_string(),
        });
    }
    if dim > MAX_EIGEN_DIM {
        return Err(LinearError::TooLarge { dim });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFinite);
    }

    let mut h = m.clone();
    balance(&mut h);
    hessenberg(&mut h);
    let (d, e, iterations) = hqr(&mut h).map_err(|(partial, iterations)| {
        LinearError::NoConvergence {
            isolated: partial,
            iterations,
            dim,
        }
    })?;

    let mut eigenvalues: Vec<Complex64> = d
        .into_iter()
        .zip(e)
        .map(|(re, im)| Complex64::new(re, im))
        .collect();
    eigenvalues.sort_by(|a, b| {
        b.re.partial_cmp(&a.re)
            .unwrap()
            .then(b.im.partial_cmp(&a.im).unwrap())
    });
    let max_real_part = eigenvalues
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EigenResult {
        eigenvalues,
        max_real_part,
        iterations,
    })
}
