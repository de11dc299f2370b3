//! Jacobi-based symmetric eigendecomposition and SVD, and the inverse square
//! root built on them.

use super::Matrix;
use crate::error::{Error, Result};

/// Eigenvalues drop below this before the `-1/2` power is taken.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Largest tolerated `‖a − aᵀ‖_∞` for inputs that must be symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 100;

/// `a = vectors · diag(values) · vectorsᵀ`, values sorted descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// `vectors · diag(f(values)) · vectorsᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lambda) in self.values.iter().enumerate() {
            let w = f(lambda);
            for i in 0..n {
                scaled[(i, j)] *= w;
            }
        }
        scaled
            .matmul_t(&self.vectors)
            .expect("square eigenvector matrix")
    }
}

/// Cyclic Jacobi rotations. Input is assumed symmetric; only the full matrix
/// is rotated so mild asymmetry is averaged away.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::shape("symmetric_eigen", a.shape(), (a.cols(), a.rows())));
    }
    a.ensure_finite("symmetric_eigen")?;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok(SymmetricEigen {
            values: vec![0.0; n],
            vectors: v,
        });
    }

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// `a = u · diag(singular) · vᵀ` with singular values sorted descending.
///
/// Columns of `u` belonging to zero singular values are left as zero.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular: Vec<f64>,
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD for `m×n` inputs with `m ≥ n`.
pub fn svd(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::shape("svd", a.shape(), (n, m)));
    }
    a.ensure_finite("svd")?;
    let mut u = a.clone();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..m {
                    let (up, uq) = (u[(k, p)], u[(k, q)]);
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (up, uq) = (u[(k, p)], u[(k, q)]);
                    u[(k, p)] = c * up - s * uq;
                    u[(k, q)] = s * up + c * uq;
                }
                for k in 0..n {
                    let (vp, vq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|k| u[(k, j)] * u[(k, j)]).sum::<f64>().sqrt())
        .collect();
    let largest = norms.iter().cloned().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u_out = Matrix::zeros(m, n);
    let mut v_out = Matrix::zeros(n, n);
    let mut singular = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singular.push(sigma);
        if sigma > 1e-14 * largest && sigma > 0.0 {
            for k in 0..m {
                u_out[(k, dst)] = u[(k, src)] / sigma;
            }
        }
        for k in 0..n {
            v_out[(k, dst)] = v[(k, src)];
        }
    }
    Ok(Svd {
        u: u_out,
        singular,
        v: v_out,
    })
}

/// `(a + ridge·I)^{-1/2}` for symmetric `a`, eigenvalues floored at
/// [`EIGEN_FLOOR`].
pub fn matrix_inv_sqrt(a: &Matrix, ridge: f64) -> Result<Matrix> {
    matrix_inv_sqrt_floored(a, ridge, EIGEN_FLOOR)
}

/// [`matrix_inv_sqrt`] with an explicit eigenvalue floor.
pub fn matrix_inv_sqrt_floored(a: &Matrix, ridge: f64, floor: f64) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape("matrix_inv_sqrt", a.shape(), (a.cols(), a.rows())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Contract(format!("ridge must be >= 0, got {ridge}")));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Contract(format!(
            "matrix_inv_sqrt needs a symmetric input (asymmetry {asym:.3e})"
        )));
    }
    let mut shifted = a.clone();
    for i in 0..a.rows() {
        shifted[(i, i)] += ridge;
    }
    let eig = symmetric_eigen(&shifted)?;
    let out = eig.reconstruct_with(|l| l.max(floor).powf(-0.5));
    out.ensure_finite("matrix_inv_sqrt")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        let data = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(m, n, data).unwrap()
    }

    #[test]
    fn eigen_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 6, 6);
        let a = x.add(&x.transpose()).unwrap();
        let eig = symmetric_eigen(&a).unwrap();
        let back = eig.reconstruct_with(|l| l);
        assert!(back.sub(&a).unwrap().max_abs() < 1e-12);
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 7, 4);
        let d = svd(&a).unwrap();
        let us = {
            let mut us = d.u.clone();
            for j in 0..4 {
                for i in 0..7 {
                    us[(i, j)] *= d.singular[j];
                }
            }
            us
        };
        let back = us.matmul_t(&d.v).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-12);
        let vtv = d.v.t_matmul(&d.v).unwrap();
        assert!(vtv.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn svd_of_zero_matrix() {
        let d = svd(&Matrix::zeros(3, 3)).unwrap();
        assert!(d.singular.iter().all(|&s| s == 0.0));
        assert!(d.u.is_finite());
    }

    #[test]
    fn inv_sqrt_identity_and_diagonal() {
        let i = Matrix::identity(3);
        assert!(matrix_inv_sqrt(&i, 0.0).unwrap().sub(&i).unwrap().max_abs() < 1e-15);
        let d = matrix_inv_sqrt(&Matrix::diag(&[4.0, 9.0]), 0.0).unwrap();
        let expect = Matrix::diag(&[0.5, 1.0 / 3.0]);
        assert!(d.sub(&expect).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn inv_sqrt_rejects_asymmetric() {
        let a = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(matrix_inv_sqrt(&a, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn inv_sqrt_floors_singular_input() {
        let out = matrix_inv_sqrt(&Matrix::zeros(2, 2), 0.0).unwrap();
        assert!(out.is_finite());
        assert!((out[(0, 0)] - 1e6).abs() < 1e-3);
    }
}
