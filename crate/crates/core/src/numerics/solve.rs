//! Solvers: batch normal-equation update, symmetric eigendecomposition,
//! Moore-Penrose pseudo-inverse, and the rank-one inverse update.

use super::{DenseMatrix, NumericsError};
use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

/// Cholesky factor (lower triangular) of a symmetric positive-definite
/// matrix, or None when a pivot degenerates.
fn cholesky(a: &DenseMatrix) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for k in 0..j {
                sum -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l.set(i, j, fmath::sqrt(sum));
            } else {
                l.set(i, j, sum / l.at(j, j));
            }
        }
    }
    Some(l)
}

/// Solve L L^T x = b in place given the Cholesky factor L.
fn cholesky_solve(l: &DenseMatrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.at(i, k) * b[k];
        }
        b[i] = sum / l.at(i, i);
    }
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l.at(k, i) * b[k];
        }
        b[i] = sum / l.at(i, i);
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns) with no ordering
/// guarantee.
pub fn sym_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = m.frobenius_norm().max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.at(p, q) * m.at(p, q);
            }
        }
        if fmath::sqrt(2.0 * off) <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if fmath::abs(apq) <= 1e-300 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + fmath::sqrt(theta * theta + 1.0))
                } else {
                    -1.0 / (-theta + fmath::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / fmath::sqrt(t * t + 1.0);
                let s = t * c;
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    if k != p && k != q {
                        let akp = m.at(k, p);
                        let akq = m.at(k, q);
                        m.set(k, p, c * akp - s * akq);
                        m.set(p, k, c * akp - s * akq);
                        m.set(k, q, s * akp + c * akq);
                        m.set(q, k, s * akp + c * akq);
                    }
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let vals = (0..n).map(|i| m.at(i, i)).collect();
    Ok((vals, v))
}

/// Pseudo-inverse solve of x A = b rows via the eigendecomposition of a
/// symmetric A, dropping eigenvalues below `rel_cut` * max |lambda|.
fn eigen_solve_rows(a: &DenseMatrix, b: &DenseMatrix, rel_cut: f64) -> Result<DenseMatrix, NumericsError> {
    let (vals, vecs) = sym_eigen(a)?;
    let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(fmath::abs(*v)));
    let cut = rel_cut * max_abs;
    // B V diag(1/lambda) V^T, skipping truncated directions.
    let bv = b.matmul(&vecs)?;
    let mut scaled = bv.clone();
    for j in 0..vals.len() {
        let inv = if fmath::abs(vals[j]) > cut && cut.is_finite() {
            1.0 / vals[j]
        } else {
            0.0
        };
        for i in 0..scaled.rows() {
            let v = scaled.at(i, j) * inv;
            scaled.set(i, j, v);
        }
    }
    scaled.matmul_bt(&vecs)
}

/// Closed-form batch update: the Delta minimizing the joint preservation +
/// edit least squares, obtained from Delta (C_p + K K^T + ridge I) = R K^T.
///
/// Well-conditioned systems go through Cholesky; rank-deficient ones fall
/// back to the minimum-norm eigen solve (the right-hand side always lies in
/// the range of the Gram matrix, so the equations stay consistent). The
/// returned Delta satisfies the normal equations to 1e-8 relative, or the
/// call fails with a retriable error suggesting a larger ridge.
pub fn solve_update(
    c_p: &DenseMatrix,
    k_t: &DenseMatrix,
    r: &DenseMatrix,
    ridge: f64,
) -> Result<DenseMatrix, NumericsError> {
    if !c_p.is_square() {
        return Err(NumericsError::NonSquare {
            rows: c_p.rows(),
            cols: c_p.cols(),
        });
    }
    let d = c_p.rows();
    if k_t.rows() != d {
        return Err(NumericsError::DimensionMismatch {
            context: "solve_update keys",
            expected: d,
            actual: k_t.rows(),
        });
    }
    if r.cols() != k_t.cols() {
        return Err(NumericsError::DimensionMismatch {
            context: "solve_update residuals",
            expected: k_t.cols(),
            actual: r.cols(),
        });
    }
    if !(ridge >= 0.0) {
        return Err(NumericsError::BadParameter {
            context: "ridge must be >= 0",
        });
    }
    if !c_p.is_symmetric(1e-9 * (1.0 + c_p.frobenius_norm())) {
        return Err(NumericsError::BadParameter {
            context: "preserved covariance must be symmetric",
        });
    }

    let mut a = c_p.add(&k_t.matmul_bt(k_t)?)?;
    a.add_diagonal(ridge);
    let b = r.matmul_bt(k_t)?;
    let tol = 1e-8 * (1.0 + b.frobenius_norm());

    let residual = |delta: &DenseMatrix| -> Result<f64, NumericsError> {
        let mut prod = delta.matmul(&a)?;
        for (p, q) in prod.as_mut_slice().iter_mut().zip(b.as_slice().iter()) {
            *p -= q;
        }
        Ok(prod.frobenius_norm())
    };

    if let Some(l) = cholesky(&a) {
        // Delta A = B with symmetric A: solve A x = row for each row of B.
        let mut delta = b.clone();
        for i in 0..delta.rows() {
            cholesky_solve(&l, delta.row_mut(i));
        }
        if delta.as_slice().iter().all(|v| v.is_finite()) && residual(&delta)? <= tol {
            return Ok(delta);
        }
    }

    let delta = eigen_solve_rows(&a, &b, 1e-12)?;
    if delta.as_slice().iter().all(|v| v.is_finite()) && residual(&delta)? <= tol {
        return Ok(delta);
    }
    Err(NumericsError::FactorizationFailed)
}

/// Moore-Penrose pseudo-inverse of a square matrix by one-sided Jacobi SVD.
/// Singular values at or below `tol` * sigma_max are truncated.
pub fn pseudo_inverse(m: &DenseMatrix, tol: f64) -> Result<DenseMatrix, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NonSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !(tol > 0.0) {
        return Err(NumericsError::BadParameter {
            context: "pseudo_inverse tolerance must be > 0",
        });
    }
    let n = m.rows();
    // Working copy W as columns; W = U Sigma V^T is reached when the columns
    // of W are mutually orthogonal.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..n {
                    alpha += w[p][i] * w[p][i];
                    beta += w[q][i] * w[q][i];
                    gamma += w[p][i] * w[q][i];
                }
                if fmath::abs(gamma) <= 1e-15 * fmath::sqrt(alpha * beta) || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + fmath::sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + fmath::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = c * t;
                for i in 0..n {
                    let wp = w[p][i];
                    let wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigmas: Vec<f64> = w
        .iter()
        .map(|col| fmath::sqrt(col.iter().map(|x| x * x).sum()))
        .collect();
    let sigma_max = sigmas.iter().fold(0.0f64, |m, s| m.max(*s));
    let cut = tol * sigma_max;
    // M^+ = sum_j v_j u_j^T / sigma_j over retained singular triplets.
    let mut out = DenseMatrix::zeros(n, n);
    for j in 0..n {
        if sigmas[j] <= cut || sigmas[j] == 0.0 {
            continue;
        }
        let inv = 1.0 / (sigmas[j] * sigmas[j]);
        for row in 0..n {
            let vj = v[j][row] * inv;
            if vj == 0.0 {
                continue;
            }
            for col in 0..n {
                let val = out.at(row, col) + vj * w[j][col];
                out.set(row, col, val);
            }
        }
    }
    Ok(out)
}

/// Rank-one inverse update: given K^{-1} and a vector k, returns
/// (K + k k^T)^{-1} = K^{-1} - (K^{-1} k k^T K^{-1}) / (1 + k^T K^{-1} k).
pub fn woodbury_update(k_inv: &DenseMatrix, k: &[f64]) -> Result<DenseMatrix, NumericsError> {
    if !k_inv.is_square() {
        return Err(NumericsError::NonSquare {
            rows: k_inv.rows(),
            cols: k_inv.cols(),
        });
    }
    if k.len() != k_inv.rows() {
        return Err(NumericsError::DimensionMismatch {
            context: "woodbury vector",
            expected: k_inv.rows(),
            actual: k.len(),
        });
    }
    let u = k_inv.matvec(k)?;
    let mut denom = 1.0;
    for (a, b) in k.iter().zip(u.iter()) {
        denom += a * b;
    }
    if denom <= 1e-12 {
        return Err(NumericsError::SingularUpdate { denominator: denom });
    }
    let n = k_inv.rows();
    let mut out = k_inv.clone();
    for i in 0..n {
        let ui = u[i] / denom;
        for j in 0..n {
            let val = out.at(i, j) - ui * u[j];
            out.set(i, j, val);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
        let mut data = vec![0.0; rows * cols];
        rng.fill_normal(&mut data, 1.0);
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_spd(rng: &mut Rng, n: usize) -> DenseMatrix {
        let g = random_matrix(rng, n, n);
        let mut a = g.matmul_bt(&g).unwrap();
        a.add_diagonal(0.5);
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = Rng::new(11);
        let a = random_spd(&mut rng, 6);
        let l = cholesky(&a).unwrap();
        let back = l.matmul_bt(&l).unwrap();
        assert!(a.max_abs_diff(&back) < 1e-10);
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let mut rng = Rng::new(12);
        let a = random_spd(&mut rng, 8);
        let (vals, vecs) = sym_eigen(&a).unwrap();
        // V diag(vals) V^T == A
        let mut vd = vecs.clone();
        for j in 0..8 {
            for i in 0..8 {
                let x = vd.at(i, j) * vals[j];
                vd.set(i, j, x);
            }
        }
        let back = vd.matmul_bt(&vecs).unwrap();
        assert!(a.max_abs_diff(&back) < 1e-9);
    }

    #[test]
    fn solve_update_single_unit_key_is_exact() {
        // C_p = 0 and one unit key: Delta must reproduce the residual on
        // that key exactly.
        let d = 5;
        let c_p = DenseMatrix::zeros(d, d);
        let mut k = vec![0.0; d];
        k[0] = 1.0;
        let k_t = DenseMatrix::from_columns(&[k.clone()]).unwrap();
        let r_vec = vec![0.5, -1.25, 2.0, 0.0, 3.5];
        let r = DenseMatrix::from_columns(&[r_vec.clone()]).unwrap();
        let delta = solve_update(&c_p, &k_t, &r, 0.0).unwrap();
        let out = delta.matvec(&k).unwrap();
        for (o, e) in out.iter().zip(r_vec.iter()) {
            assert!((o - e).abs() < 1e-12, "got {o}, expected {e}");
        }
    }

    #[test]
    fn solve_update_zero_residual_gives_zero_delta() {
        let mut rng = Rng::new(13);
        let c_p = random_spd(&mut rng, 4);
        let k_t = random_matrix(&mut rng, 4, 3);
        let r = DenseMatrix::zeros(4, 3);
        let delta = solve_update(&c_p, &k_t, &r, 0.0).unwrap();
        assert!(delta.frobenius_norm() < 1e-12);
    }

    #[test]
    fn solve_update_rejects_mismatched_shapes() {
        let c_p = DenseMatrix::zeros(4, 4);
        let k_t = DenseMatrix::zeros(3, 2);
        let r = DenseMatrix::zeros(4, 2);
        assert!(solve_update(&c_p, &k_t, &r, 0.0).is_err());
    }

    #[test]
    fn solve_update_residual_bound_holds_on_rank_deficient_systems() {
        let mut rng = Rng::new(14);
        for trial in 0..30 {
            let d = 3 + rng.below(8);
            let n = 1 + rng.below(2 * d);
            let c_p = DenseMatrix::zeros(d, d);
            let k_t = random_matrix(&mut rng, d, n);
            let r = random_matrix(&mut rng, d, n);
            let delta = solve_update(&c_p, &k_t, &r, 0.0).unwrap();
            let mut a = c_p.add(&k_t.matmul_bt(&k_t).unwrap()).unwrap();
            a.add_diagonal(0.0);
            let b = r.matmul_bt(&k_t).unwrap();
            let mut prod = delta.matmul(&a).unwrap();
            for (p, q) in prod.as_mut_slice().iter_mut().zip(b.as_slice().iter()) {
                *p -= q;
            }
            let res = prod.frobenius_norm();
            assert!(
                res <= 1e-8 * (1.0 + b.frobenius_norm()),
                "trial {trial}: residual {res}"
            );
        }
    }

    #[test]
    fn pseudo_inverse_of_identity_and_zero() {
        let id = DenseMatrix::identity(4);
        let p = pseudo_inverse(&id, 1e-12).unwrap();
        assert!(p.max_abs_diff(&id) < 1e-12);
        let z = DenseMatrix::zeros(4, 4);
        let pz = pseudo_inverse(&z, 1e-12).unwrap();
        assert!(pz.frobenius_norm() == 0.0);
    }

    #[test]
    fn pseudo_inverse_of_unit_rank_one_is_itself() {
        let k = vec![0.6, 0.0, 0.8];
        let mut data = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                data[i * 3 + j] = k[i] * k[j];
            }
        }
        let m = DenseMatrix::from_vec(3, 3, data).unwrap();
        let p = pseudo_inverse(&m, 1e-12).unwrap();
        assert!(p.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn pseudo_inverse_satisfies_moore_penrose_identities() {
        let mut rng = Rng::new(15);
        for _ in 0..10 {
            let n = 2 + rng.below(6);
            // Mix full-rank and singular inputs.
            let mut m = random_matrix(&mut rng, n, n);
            if rng.below(2) == 0 && n > 1 {
                let dup = m.column(0);
                for i in 0..n {
                    m.set(i, n - 1, dup[i]);
                }
            }
            let p = pseudo_inverse(&m, 1e-12).unwrap();
            let mpm = m.matmul(&p).unwrap().matmul(&m).unwrap();
            let pmp = p.matmul(&m).unwrap().matmul(&p).unwrap();
            assert!(mpm.max_abs_diff(&m) < 1e-8, "M P M != M");
            assert!(pmp.max_abs_diff(&p) < 1e-8, "P M P != P");
            let mp = m.matmul(&p).unwrap();
            let pm = p.matmul(&m).unwrap();
            assert!(mp.max_abs_diff(&mp.transpose()) < 1e-8, "M P not symmetric");
            assert!(pm.max_abs_diff(&pm.transpose()) < 1e-8, "P M not symmetric");
        }
    }

    #[test]
    fn pseudo_inverse_rejects_non_square() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            pseudo_inverse(&m, 1e-12),
            Err(NumericsError::NonSquare { .. })
        ));
    }

    #[test]
    fn woodbury_zero_vector_is_identity_update() {
        let mut rng = Rng::new(16);
        let a = random_spd(&mut rng, 5);
        let a_inv = eigen_solve_rows(&a, &DenseMatrix::identity(5), 1e-14).unwrap();
        let updated = woodbury_update(&a_inv, &[0.0; 5]).unwrap();
        assert!(updated.max_abs_diff(&a_inv) < 1e-15);
    }

    #[test]
    fn woodbury_matches_direct_inverse() {
        let mut rng = Rng::new(17);
        let n = 8;
        let a = random_spd(&mut rng, n);
        let a_inv = eigen_solve_rows(&a, &DenseMatrix::identity(n), 1e-14).unwrap();
        let mut k = vec![0.0; n];
        rng.fill_normal(&mut k, 1.0);
        let updated = woodbury_update(&a_inv, &k).unwrap();
        // Direct: inverse of A + k k^T.
        let mut a2 = a.clone();
        for i in 0..n {
            for j in 0..n {
                let v = a2.at(i, j) + k[i] * k[j];
                a2.set(i, j, v);
            }
        }
        let direct = eigen_solve_rows(&a2, &DenseMatrix::identity(n), 1e-14).unwrap();
        assert!(updated.max_abs_diff(&direct) < 1e-8);
        // And (K + kk^T) * updated == I.
        let prod = a2.matmul(&updated).unwrap();
        assert!(prod.max_abs_diff(&DenseMatrix::identity(n)) < 1e-8);
    }

    #[test]
    fn woodbury_self_weight_update_formula() {
        // After adding k_j, the self weight k_i^T K^{-1} k_i drops by exactly
        // (k_i^T K^{-1} k_j)^2 / (1 + k_j^T K^{-1} k_j).
        let mut rng = Rng::new(18);
        let n = 6;
        let a = random_spd(&mut rng, n);
        let a_inv = eigen_solve_rows(&a, &DenseMatrix::identity(n), 1e-14).unwrap();
        let mut ki = vec![0.0; n];
        let mut kj = vec![0.0; n];
        rng.fill_normal(&mut ki, 1.0);
        rng.fill_normal(&mut kj, 1.0);
        let quad = |m: &DenseMatrix, x: &[f64], y: &[f64]| -> f64 {
            let my = m.matvec(y).unwrap();
            x.iter().zip(my.iter()).map(|(a, b)| a * b).sum()
        };
        let before = quad(&a_inv, &ki, &ki);
        let cross = quad(&a_inv, &ki, &kj);
        let denom = 1.0 + quad(&a_inv, &kj, &kj);
        let updated = woodbury_update(&a_inv, &kj).unwrap();
        let after = quad(&updated, &ki, &ki);
        let predicted = before - cross * cross / denom;
        assert!((after - predicted).abs() < 1e-10);
        // The correction term is a square over a positive denominator.
        assert!(before - after >= -1e-12);
    }

    #[test]
    fn woodbury_rejects_singular_denominator() {
        // K^{-1} = -I and k = e_1 drives the denominator to zero.
        let mut neg = DenseMatrix::identity(3);
        for i in 0..3 {
            neg.set(i, i, -1.0);
        }
        let mut k = vec![0.0; 3];
        k[0] = 1.0;
        assert!(matches!(
            woodbury_update(&neg, &k),
            Err(NumericsError::SingularUpdate { .. })
        ));
    }
}
