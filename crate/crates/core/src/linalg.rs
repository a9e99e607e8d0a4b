//! Small dense solvers for the normal equations of the CP solvers.

/// In-place Cholesky factorization of a row-major SPD matrix.
///
/// On success the lower triangle holds `L` with `A = L Lᵀ`. Returns `false`
/// when a pivot is not strictly positive.
pub(crate) fn cholesky(a: &mut [f64], n: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0 && d.is_finite()) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky`].
pub(crate) fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `(A + ridge·I) X = B` for a symmetric PSD `A` (`n × n`) and `m`
/// right-hand sides stored as the rows of `rhs` (`m × n`), in place.
///
/// The ridge is raised tenfold until the factorization succeeds.
pub(crate) fn solve_spd_rows(a: &[f64], n: usize, ridge: f64, rhs: &mut [f64]) {
    let mut lambda = ridge;
    let mut work = a.to_vec();
    loop {
        work.copy_from_slice(a);
        for i in 0..n {
            work[i * n + i] += lambda;
        }
        if cholesky(&mut work, n) {
            break;
        }
        let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
        lambda = if lambda == 0.0 { 1e-12 * scale } else { lambda * 10.0 };
    }
    for row in rhs.chunks_mut(n) {
        cholesky_solve(&work, n, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        let a = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let x = [1.0, -2.0, 0.5];
        let mut b: Vec<f64> = (0..3).map(|i| (0..3).map(|k| a[i * 3 + k] * x[k]).sum()).collect();
        solve_spd_rows(&a, 3, 0.0, &mut b);
        for (u, v) in b.iter().zip(x) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_gets_regularized() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let mut b = vec![2.0, 2.0];
        solve_spd_rows(&a, 2, 0.0, &mut b);
        assert!(b.iter().all(|v| v.is_finite()));
        assert!((b[0] + b[1] - 2.0).abs() < 1e-6);
    }
}
