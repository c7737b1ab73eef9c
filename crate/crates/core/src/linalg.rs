//! Dense symmetric eigensolver and small matrix helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sweep cap for the cyclic Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm, relative to `‖A‖_F`, at which Jacobi stops.
pub const JACOBI_REL_TOL: f64 = 1e-12;

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub vectors: DMatrix<f64>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Only the lower triangle is trusted; the input is symmetrized first.
/// Eigenvectors are sign-normalized so their first entry above `1e-12` in
/// magnitude is positive; eigenvalues come out descending and runs of equal
/// eigenvalues are ordered lexicographically by eigenvector.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Input(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }

    // row-major working copy, symmetrized
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_REL_TOL * frob;
    let off_norm = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    let mut converged = off_norm(&a) <= tol;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    a[k * n + p] = new_kp;
                    a[p * n + k] = new_kp;
                    a[k * n + q] = new_kq;
                    a[q * n + k] = new_kq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= tol;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut col: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
            if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    col.iter_mut().for_each(|x| *x = -*x);
                }
            }
            (a[j * n + j], col)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));

    // order runs of numerically equal eigenvalues by eigenvector
    let scale = pairs.iter().fold(1.0_f64, |m, p| m.max(p.0.abs()));
    let tie = 1e-12 * scale;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (pairs[end - 1].0 - pairs[end].0).abs() <= tie {
            end += 1;
        }
        if end - start > 1 {
            pairs[start..end].sort_by(|x, y| {
                x.1.iter()
                    .zip(&y.1)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        start = end;
    }

    let values = DVector::from_iterator(n, pairs.iter().map(|p| p.0));
    let vectors = DMatrix::from_fn(n, n, |i, j| pairs[j].1[i]);
    Ok(SymmetricEigen { values, vectors, sweeps })
}

/// Symmetric PSD square root `V diag(√max(λ,0)) Vᵀ`.
pub fn psd_sqrt(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(matrix)?;
    let scale = eig.values.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if eig.values.iter().any(|&l| l < -1e-8 * (1.0 + scale)) {
        return Err(Error::Numerical("matrix is not positive semidefinite".into()));
    }
    let roots = eig.values.map(|l| l.max(0.0).sqrt());
    let scaled = DMatrix::from_fn(eig.vectors.nrows(), eig.vectors.ncols(), |i, j| {
        eig.vectors[(i, j)] * roots[j]
    });
    Ok(&scaled * eig.vectors.transpose())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// `n` points log-spaced from `min` to `max` inclusive.
pub fn logspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let (lo, hi) = (min.log10(), max.log10());
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        max
                    } else {
                        10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)
                    }
                })
                .collect()
        }
    }
}

pub fn is_sorted_ascending(grid: &[f64]) -> bool {
    grid.windows(2).all(|w| w[0] < w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a + a.transpose()
    }

    #[test]
    fn reconstructs_random_symmetric() {
        for (n, seed) in [(1, 1), (2, 2), (7, 3), (30, 4)] {
            let a = random_symmetric(n, seed);
            let eig = symmetric_eigen(&a).unwrap();
            let d = DMatrix::from_diagonal(&eig.values);
            let rec = &eig.vectors * d * eig.vectors.transpose();
            assert!(max_abs(&(rec - &a)) < 1e-10);
            let gram = eig.vectors.transpose() * &eig.vectors;
            assert!(max_abs(&(gram - DMatrix::identity(n, n))) < 1e-10);
            assert!(eig.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn agrees_with_library_eigenvalues() {
        let a = random_symmetric(12, 9);
        let ours = symmetric_eigen(&a).unwrap();
        let mut theirs: Vec<f64> = a.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in ours.values.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_identity_is_deterministic() {
        let a = DMatrix::<f64>::identity(4, 4) * 2.0;
        let e1 = symmetric_eigen(&a).unwrap();
        let e2 = symmetric_eigen(&a).unwrap();
        assert_eq!(e1.vectors, e2.vectors);
        assert_eq!(e1.values, e2.values);
        // lexicographic ascending among sign-normalized unit vectors
        assert_eq!(e1.vectors.column(0)[3], 1.0);
        assert_eq!(e1.vectors.column(3)[0], 1.0);
    }

    #[test]
    fn sign_normalized_columns() {
        let a = random_symmetric(6, 11);
        let eig = symmetric_eigen(&a).unwrap();
        for j in 0..6 {
            let first = eig.vectors.column(j).iter().copied().find(|x| x.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn zero_matrix() {
        let eig = symmetric_eigen(&DMatrix::zeros(3, 3)).unwrap();
        assert!(eig.values.iter().all(|&v| v == 0.0));
        assert_eq!(eig.sweeps, 0);
    }

    #[test]
    fn rejects_nonfinite_and_nonsquare() {
        let mut a = DMatrix::<f64>::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(symmetric_eigen(&a), Err(Error::Input(_))));
        assert!(symmetric_eigen(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let b = random_symmetric(5, 5);
        let c = &b * b.transpose();
        let s = psd_sqrt(&c).unwrap();
        assert!(max_abs(&(&s * &s - &c)) < 1e-9);
        assert!(psd_sqrt(&(-DMatrix::<f64>::identity(2, 2))).is_err());
    }

    #[test]
    fn logspace_endpoints() {
        let g = logspace(1e-3, 1e2, 180);
        assert_eq!(g.len(), 180);
        assert!((g[0] - 1e-3).abs() < 1e-18);
        assert_eq!(g[179], 1e2);
        assert!(is_sorted_ascending(&g));
    }
}
