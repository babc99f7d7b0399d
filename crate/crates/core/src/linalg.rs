//! Small dense linear algebra: LU factorisation with partial pivoting for
//! the per-cell and per-regression systems, which never exceed a few dozen
//! rows. Matrices are row-major `Vec<f64>` slices.

use alloc::vec;
use alloc::vec::Vec;

/// LU factorisation (Doolittle, partial pivoting) of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    pivots: Vec<usize>,
    /// Product of pivot magnitudes and row swaps; zero signals singularity.
    min_pivot: f64,
    max_pivot: f64,
}

impl Lu {
    /// Factor `a` (row-major, `n` x `n`). Returns `None` if a pivot is exactly zero.
    pub fn factor(a: &[f64], n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n, "matrix shape mismatch");
        let mut lu = a.to_vec();
        let mut pivots = vec![0usize; n];
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0f64;
        for col in 0..n {
            let mut p = col;
            let mut best = lu[col * n + col].abs();
            for r in (col + 1)..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 {
                return None;
            }
            pivots[col] = p;
            if p != col {
                for c in 0..n {
                    lu.swap(col * n + c, p * n + c);
                }
            }
            let diag = lu[col * n + col];
            min_pivot = min_pivot.min(diag.abs());
            max_pivot = max_pivot.max(diag.abs());
            for r in (col + 1)..n {
                let factor = lu[r * n + col] / diag;
                lu[r * n + col] = factor;
                for c in (col + 1)..n {
                    lu[r * n + c] -= factor * lu[col * n + c];
                }
            }
        }
        Some(Lu {
            n,
            lu,
            pivots,
            min_pivot,
            max_pivot,
        })
    }

    /// Crude condition estimate: ratio of extreme pivot magnitudes.
    pub fn pivot_ratio(&self) -> f64 {
        if self.min_pivot == 0.0 {
            f64::INFINITY
        } else {
            self.max_pivot / self.min_pivot
        }
    }

    /// Solve `A x = b` in place: apply the row permutation, then the two
    /// triangular solves.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n, "rhs length mismatch");
        for col in 0..n {
            let p = self.pivots[col];
            if p != col {
                b.swap(col, p);
            }
        }
        for col in 0..n {
            for r in (col + 1)..n {
                b[r] -= self.lu[r * n + col] * b[col];
            }
        }
        for col in (0..n).rev() {
            b[col] /= self.lu[col * n + col];
            for r in 0..col {
                b[r] -= self.lu[r * n + col] * b[col];
            }
        }
    }

    /// Solve for a fresh right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solve `A^T x = b` in place using the same factorisation:
    /// `P A = L U` gives `A^T x = b  <=>  U^T (L^T (P x)) = b`.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n, "rhs length mismatch");
        // U^T v = b (lower triangular, non-unit diagonal).
        for col in 0..n {
            b[col] /= self.lu[col * n + col];
            for r in (col + 1)..n {
                b[r] -= self.lu[col * n + r] * b[col];
            }
        }
        // L^T w = v (upper triangular, unit diagonal).
        for col in (0..n).rev() {
            for r in 0..col {
                b[r] -= self.lu[col * n + r] * b[col];
            }
        }
        // x = P^{-1} w: undo the row swaps in reverse order.
        for col in (0..n).rev() {
            let p = self.pivots[col];
            if p != col {
                b.swap(col, p);
            }
        }
    }

    /// Dense inverse, column by column.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// 1-norm condition number of a square matrix, computed from its explicit
/// inverse. Intended for the small regression Gram matrices only.
pub fn condition_1(a: &[f64], n: usize) -> f64 {
    let Some(lu) = Lu::factor(a, n) else {
        return f64::INFINITY;
    };
    let inv = lu.inverse();
    norm_1(a, n) * norm_1(&inv, n)
}

fn norm_1(a: &[f64], n: usize) -> f64 {
    let mut best = 0.0f64;
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += a[i * n + j].abs();
        }
        best = best.max(s);
    }
    best
}

/// `y = A x` for a row-major `n x m` matrix.
pub fn matvec(a: &[f64], n: usize, m: usize, x: &[f64], y: &mut [f64]) {
    assert_eq!(a.len(), n * m);
    assert_eq!(x.len(), m);
    assert_eq!(y.len(), n);
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &a[i * m..(i + 1) * m];
        let mut s = 0.0;
        for (aij, xj) in row.iter().zip(x.iter()) {
            s += aij * xj;
        }
        *yi = s;
    }
}
