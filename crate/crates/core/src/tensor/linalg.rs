//! Small dense linear-algebra kernels: Cholesky factorization,
//! triangular solves, SPD inverse and log-determinant.
//!
//! Matrices are row-major `&[f64]` of dimension `n * n`.

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` when the matrix is not numerically positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve `L x = b` by forward substitution, `L` lower triangular.
pub fn solve_lower(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve `L^T x = b` by back substitution, `L` lower triangular.
pub fn solve_lower_transpose(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve `A x = b` for SPD `A` given its Cholesky factor.
pub fn spd_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let y = solve_lower(l, b, n);
    solve_lower_transpose(l, &y, n)
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn spd_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for col in 0..n {
        e[col] = 1.0;
        let x = spd_solve(l, &e, n);
        e[col] = 0.0;
        for row in 0..n {
            inv[row * n + col] = x[row];
        }
    }
    inv
}

/// `ln det A` of an SPD matrix from its Cholesky factor.
pub fn log_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat_vec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
            .collect()
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.5, 2.0, 5.0, 1.0, 0.5, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += l[i * 3 + k] * l[j * 3 + k];
                }
                assert!((s - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&a, 2).is_none());
    }

    #[test]
    fn solve_round_trip() {
        let a = [4.0, 2.0, 0.5, 2.0, 5.0, 1.0, 0.5, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = spd_solve(&l, &b, 3);
        let back = mat_vec(&a, &x, 3);
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_and_log_det() {
        let a = [2.0, 0.3, 0.3, 1.5];
        let l = cholesky(&a, 2).unwrap();
        let inv = spd_inverse(&l, 2);
        let det: f64 = 2.0 * 1.5 - 0.3 * 0.3;
        assert!((log_det(&l, 2) - det.ln()).abs() < 1e-12);
        // A * A^-1 = I
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    s += a[i * 2 + k] * inv[k * 2 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-12);
            }
        }
    }
}
