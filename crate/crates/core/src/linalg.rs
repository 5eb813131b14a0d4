//! Small dense linear algebra helpers.

use alloc::vec::Vec;

/// Singular values of a row-major `rows × cols` matrix, descending.
///
/// One-sided Jacobi rotations on the columns of the taller orientation.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    // Work on columns of an m×n matrix with m >= n, stored column-major.
    let (m, n, mut u): (usize, usize, Vec<f64>) = if rows >= cols {
        let mut u = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            u.extend((0..rows).map(|i| a[i * cols + j]));
        }
        (rows, cols, u)
    } else {
        (cols, rows, a.to_vec())
    };
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (&u[p * m..(p + 1) * m], &u[q * m..(q + 1) * m]);
                let alpha: f64 = cp.iter().map(|v| v * v).sum();
                let beta: f64 = cq.iter().map(|v| v * v).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for i in 0..m {
                    let x = u[p * m + i];
                    let y = u[q * m + i];
                    u[p * m + i] = c * x - s * y;
                    u[q * m + i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> =
        (0..n).map(|j| libm::sqrt(u[j * m..(j + 1) * m].iter().map(|v| v * v).sum::<f64>())).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
