//! Value-level SPD linear algebra shared by the tape ops and the analytic
//! coding-rate gradient: Cholesky factorization, log-determinant, linear
//! solves, and a Jacobi eigenvalue routine for symmetric matrices.

use super::{Tensor, TensorError};

const SYMMETRY_TOL: f64 = 1e-10;

/// Symmetrize `a` in place as (A + A^T)/2 after checking it is symmetric
/// within `SYMMETRY_TOL` relative to its largest entry. Guards against
/// drift from accumulated rounding in products like Z Z^T.
fn symmetrized(a: &Tensor) -> Result<Tensor, TensorError> {
    let d = a.rows();
    if a.cols() != d {
        return Err(TensorError::ShapeMismatch {
            op: "cholesky",
            expected: vec![d, d],
            got: a.shape().to_vec(),
        });
    }
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut out = a.clone();
    for i in 0..d {
        for j in (i + 1)..d {
            let diff = (a.at(i, j) - a.at(j, i)).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(TensorError::NotSymmetric { i, j, diff, tol: SYMMETRY_TOL * scale });
            }
            let mean = 0.5 * (a.at(i, j) + a.at(j, i));
            out.set(i, j, mean);
            out.set(j, i, mean);
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor L with L L^T = (A + A^T)/2.
///
/// Fails with the pivot index when the matrix is not positive definite.
pub fn cholesky(a: &Tensor) -> Result<Tensor, TensorError> {
    let a = symmetrized(a)?;
    let d = a.rows();
    let mut l = Tensor::zeros(vec![d, d]);
    for j in 0..d {
        let mut s = a.at(j, j);
        for k in 0..j {
            s -= l.at(j, k) * l.at(j, k);
        }
        if s <= 0.0 || !s.is_finite() {
            return Err(TensorError::NotPositiveDefinite { index: j, value: s });
        }
        let ljj = s.sqrt();
        l.set(j, j, ljj);
        let inv = 1.0 / ljj;
        for i in (j + 1)..d {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s * inv);
        }
    }
    Ok(l)
}

/// log det A for SPD A, computed as 2 * sum_i log L_ii.
pub fn logdet_spd(a: &Tensor) -> Result<f64, TensorError> {
    let l = cholesky(a)?;
    Ok(logdet_from_factor(&l))
}

pub(crate) fn logdet_from_factor(l: &Tensor) -> f64 {
    let d = l.rows();
    2.0 * (0..d).map(|i| l.at(i, i).ln()).sum::<f64>()
}

/// Solve A X = B column-by-column given the Cholesky factor of A.
pub(crate) fn solve_with_factor(l: &Tensor, b: &Tensor) -> Tensor {
    let d = l.rows();
    let n = b.cols();
    let mut x = Tensor::zeros(vec![d, n]);
    let mut y = vec![0.0; d];
    let mut col = vec![0.0; d];
    for j in 0..n {
        for i in 0..d {
            col[i] = b.at(i, j);
        }
        // forward: L y = b
        for i in 0..d {
            let mut s = col[i];
            for k in 0..i {
                s -= l.at(i, k) * y[k];
            }
            y[i] = s / l.at(i, i);
        }
        // back: L^T x = y
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l.at(k, i) * col[k];
            }
            col[i] = s / l.at(i, i);
        }
        for i in 0..d {
            x.set(i, j, col[i]);
        }
    }
    x
}

/// Solve A X = B for SPD A via Cholesky; never forms A^-1 explicitly.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if b.rows() != a.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "spd_solve",
            expected: vec![a.rows(), b.cols()],
            got: b.shape().to_vec(),
        });
    }
    let l = cholesky(a)?;
    Ok(solve_with_factor(&l, b))
}

/// Inverse of SPD A from its Cholesky factor (used only for adjoint rules,
/// where the full inverse genuinely is the gradient).
pub(crate) fn inverse_from_factor(l: &Tensor) -> Tensor {
    let d = l.rows();
    solve_with_factor(l, &Tensor::eye(d))
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// returned in descending order.
pub fn sym_eigvals(a: &Tensor) -> Result<Vec<f64>, TensorError> {
    let a = symmetrized(a)?;
    let d = a.rows();
    let mut m = a.data().to_vec();
    let idx = |i: usize, j: usize| i * d + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[idx(i, j)] * m[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = m[idx(k, p)];
                    let akq = m[idx(k, q)];
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = m[idx(p, k)];
                    let aqk = m[idx(q, k)];
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| m[idx(i, i)]).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut b = Tensor::zeros(vec![d, d]);
        for v in b.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let bt = b.transpose();
        let mut a = Tensor::new(
            vec![d, d],
            crate::tensor::matmul_raw(b.data(), bt.data(), d, d, d),
        )
        .unwrap();
        for i in 0..d {
            let v = a.at(i, i) + 1.0;
            a.set(i, i, v);
        }
        a
    }

    #[test]
    fn hand_computed_2x2() {
        let a = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        assert!((l.at(0, 0) - 2.0).abs() < 1e-12);
        assert!((l.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((l.at(1, 1) - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(l.at(0, 1), 0.0);
    }

    #[test]
    fn identity_factors_to_identity() {
        for d in [1, 3, 7] {
            assert_eq!(cholesky(&Tensor::eye(d)).unwrap(), Tensor::eye(d));
        }
    }

    #[test]
    fn reconstruction_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in [2, 5, 16, 64] {
            let a = random_spd(d, &mut rng);
            let l = cholesky(&a).unwrap();
            let lt = l.transpose();
            let rec = crate::tensor::matmul_raw(l.data(), lt.data(), d, d, d);
            let err: f64 = rec
                .iter()
                .zip(a.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-9 * a.frobenius_norm().max(1.0), "d={d} err={err}");
        }
    }

    #[test]
    fn non_pd_names_pivot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        match cholesky(&a) {
            Err(TensorError::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.1, 1.0]]);
        assert!(matches!(cholesky(&a), Err(TensorError::NotSymmetric { .. })));
    }

    #[test]
    fn logdet_identity_and_diag() {
        assert!(logdet_spd(&Tensor::eye(5)).unwrap().abs() < 1e-14);
        let e = std::f64::consts::E;
        let a = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, e, 0.0],
            vec![0.0, 0.0, e * e],
        ]);
        assert!((logdet_spd(&a).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_identity_and_diag() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(spd_solve(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![2.0], vec![8.0]]);
        let x = spd_solve(&a, &b).unwrap();
        assert!((x.at(0, 0) - 1.0).abs() < 1e-14);
        assert!((x.at(1, 0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [4, 12, 32] {
            let a = random_spd(d, &mut rng);
            let mut b = Tensor::zeros(vec![d, 3]);
            for v in b.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let x = spd_solve(&a, &b).unwrap();
            let ax = Tensor::new(
                vec![d, 3],
                crate::tensor::matmul_raw(a.data(), x.data(), d, d, 3),
            )
            .unwrap();
            let mut res = ax.clone();
            res.axpy(1.0, &b, -1.0);
            assert!(res.frobenius_norm() < 1e-8 * b.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn jacobi_eigvals_match_construction() {
        // diag(5, 2, 1) rotated by a known orthogonal matrix keeps eigenvalues
        let q = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut b = Tensor::zeros(vec![3, 3]);
            for v in b.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            // Gram-Schmidt
            let mut cols: Vec<Vec<f64>> = (0..3).map(|j| b.column(j)).collect();
            for j in 0..3 {
                for k in 0..j {
                    let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                    for i in 0..3 {
                        cols[j][i] -= dot * cols[k][i];
                    }
                }
                let n: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in cols[j].iter_mut() {
                    *v /= n;
                }
            }
            let mut q = Tensor::zeros(vec![3, 3]);
            for j in 0..3 {
                for i in 0..3 {
                    q.set(i, j, cols[j][i]);
                }
            }
            q
        };
        let lam = [5.0, 2.0, 1.0];
        let mut a = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += q.at(i, k) * lam[k] * q.at(j, k);
                }
                a.set(i, j, s);
            }
        }
        let eig = sym_eigvals(&a).unwrap();
        for (got, want) in eig.iter().zip(lam.iter()) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }
}
