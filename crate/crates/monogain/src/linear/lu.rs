//! LU factorization with partial pivoting, for linear solves, determinants,
//! and Newton steps elsewhere in the crate.

use nalgebra::DMatrix;

/// Factored form of a square matrix. A pivot is treated as zero when its
/// magnitude is at most `1e-12 * max|a_ij|`; the factorization still
/// completes so the determinant stays meaningful, but solves are refused.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DMatrix<f64>,
    // pivots[k] = row swapped into position k at elimination step k
    pivots: Vec<usize>,
    swap_sign: f64,
    singular: bool,
}

impl Lu {
    pub fn factor(a: &DMatrix<f64>) -> Lu {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let mut lu = a.clone();
        let max_abs = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let floor = 1e-12 * max_abs;
        let mut pivots = Vec::with_capacity(n);
        let mut swap_sign = 1.0;
        let mut singular = n > 0 && max_abs == 0.0;
        for k in 0..n {
            let mut piv = k;
            let mut best = lu[(k, k)].abs();
            for i in (k + 1)..n {
                if lu[(i, k)].abs() > best {
                    best = lu[(i, k)].abs();
                    piv = i;
                }
            }
            pivots.push(piv);
            if piv != k {
                lu.swap_rows(piv, k);
                swap_sign = -swap_sign;
            }
            let pivot = lu[(k, k)];
            if pivot.abs() <= floor {
                singular = true;
                continue;
            }
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                for j in (k + 1)..n {
                    lu[(i, j)] -= factor * lu[(k, j)];
                }
            }
        }
        Lu {
            lu,
            pivots,
            swap_sign,
            singular,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    pub fn det(&self) -> f64 {
        let mut d = self.swap_sign;
        for k in 0..self.lu.nrows() {
            d *= self.lu[(k, k)];
        }
        d
    }

    /// Solve `A x = b` for one right-hand side. `None` when singular.
    // Index loops mirror the triangular-solve recurrences.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_vec(&self, b: &[f64]) -> Option<Vec<f64>> {
        if self.singular {
            return None;
        }
        let n = self.lu.nrows();
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.pivots[k]);
        }
        // Forward: L y = P b with unit diagonal L.
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        // Back: U x = y.
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        Some(x)
    }

    /// Solve `A X = B` column by column. `None` when singular.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        if self.singular {
            return None;
        }
        let n = self.lu.nrows();
        assert_eq!(b.nrows(), n);
        let mut x = DMatrix::zeros(n, b.ncols());
        let mut col = vec![0.0; n];
        for j in 0..b.ncols() {
            for i in 0..n {
                col[i] = b[(i, j)];
            }
            let sol = self.solve_vec(&col)?;
            for i in 0..n {
                x[(i, j)] = sol[i];
            }
        }
        Some(x)
    }
}
