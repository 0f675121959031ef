//! Dense symmetric eigendecomposition and the PSD matrix square root.
//!
//! A cyclic Jacobi sweep is all the evaluation metrics need: covariance
//! matrices here are small (feature dimensions in the tens), and Jacobi is
//! simple enough to verify directly against analytic oracles. Everything is
//! f64; these routines sit on the metrics path, not the training path.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

const MAX_SWEEPS: usize = 64;

/// Eigenvalues (ascending) and matching orthonormal eigenvector columns of a
/// symmetric matrix. The input is symmetrized as `(A + A^T)/2` first, so tiny
/// floating-point asymmetry is tolerated.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomposition of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix for eigendecomposition".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }

    let mut m = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (a[[i, j]] + a[[j, i]]));
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(1.0);
    let tol = 1e-14 * scale;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                // Rotation angle that annihilates m[p][q].
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok((values, vectors))
}

/// Square root of a symmetric positive semidefinite matrix. Eigenvalues in
/// `[-neg_tol, 0)` are treated as floating-point noise and clamped to zero;
/// anything below `-neg_tol` means the matrix is genuinely indefinite.
pub fn sqrtm_psd(a: &Array2<f64>, neg_tol: f64) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let n = vals.len();
    let mut roots = Array1::<f64>::zeros(n);
    for (i, &l) in vals.iter().enumerate() {
        if l < -neg_tol {
            return Err(Error::InvalidArgument(format!(
                "matrix is not positive semidefinite: eigenvalue {l}"
            )));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    // V diag(sqrt(l)) V^T
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        col *= roots[j];
    }
    Ok(scaled.dot(&vecs.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
    }

    #[test]
    fn two_by_two_analytic() {
        let a = ndarray::array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        // Eigenvector of lambda=3 is (1,1)/sqrt(2) up to sign.
        let r = (vecs[[0, 1]] / vecs[[1, 1]] - 1.0).abs();
        assert!(r < 1e-10, "ratio error {r}");
    }

    #[test]
    fn diagonal_matrix_passthrough() {
        let a = Array2::from_diag(&ndarray::array![3.0, -1.0, 2.0]);
        let (vals, _) = symmetric_eigen(&a).unwrap();
        assert_eq!(vals.to_vec(), vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..5 {
            let n = 6;
            let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let a = &b + &b.t();
            let (vals, vecs) = symmetric_eigen(&a).unwrap();

            let ident = vecs.t().dot(&vecs);
            assert!(max_abs_diff(&ident, &Array2::eye(n)) < 1e-10);

            let mut scaled = vecs.clone();
            for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
                col *= vals[j];
            }
            let recon = scaled.dot(&vecs.t());
            assert!(max_abs_diff(&recon, &a) < 1e-9);
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let mut rng = StdRng::seed_from_u64(9);
        let n = 5;
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let a = b.t().dot(&b); // PSD by construction
        let s = sqrtm_psd(&a, 1e-8).unwrap();
        assert!(max_abs_diff(&s.dot(&s), &a) < 1e-9);
        assert!(max_abs_diff(&s, &s.t().to_owned()) < 1e-10);
    }

    #[test]
    fn sqrtm_diagonal_and_identity() {
        let i3: Array2<f64> = Array2::eye(3);
        assert!(max_abs_diff(&sqrtm_psd(&i3, 1e-8).unwrap(), &i3) < 1e-12);
        let d = Array2::from_diag(&ndarray::array![4.0, 9.0, 0.25]);
        let expect = Array2::from_diag(&ndarray::array![2.0, 3.0, 0.5]);
        assert!(max_abs_diff(&sqrtm_psd(&d, 1e-8).unwrap(), &expect) < 1e-12);
    }

    #[test]
    fn sqrtm_clamps_noise_but_rejects_indefinite() {
        let near = Array2::from_diag(&ndarray::array![1.0, -5e-9]);
        let s = sqrtm_psd(&near, 1e-8).unwrap();
        assert_eq!(s[[1, 1]], 0.0);

        let bad = Array2::from_diag(&ndarray::array![1.0, -0.5]);
        assert!(sqrtm_psd(&bad, 1e-8).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(symmetric_eigen(&rect).is_err());
        let nan = Array2::from_elem((2, 2), f64::NAN);
        assert!(symmetric_eigen(&nan).is_err());
        let empty = Array2::<f64>::zeros((0, 0));
        assert!(symmetric_eigen(&empty).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn eigen_reconstruction_property(
            seed in 0u64..1000,
            n in 2usize..8,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-2.0..2.0));
            let a = &b + &b.t();
            let (vals, vecs) = symmetric_eigen(&a).unwrap();
            prop_assert!(vals.windows(2).into_iter().all(|w| w[0] <= w[1]));

            let mut scaled = vecs.clone();
            for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
                col *= vals[j];
            }
            let recon = scaled.dot(&vecs.t());
            prop_assert!(max_abs_diff(&recon, &a) < 1e-8);
        }
    }
}
