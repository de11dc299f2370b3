use molt_core::numerics::Matrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect();
    Matrix::from_rows(&rows)
}

/// Canonical correlations by Cholesky whitening and an SVD, which shares
/// nothing with the eigen-based path under test.
pub fn correlations(x: &Matrix, y: &Matrix, ridge: f64) -> Vec<f64> {
    let (x, y) = (to_na(x), to_na(y));
    let b = x.nrows() as f64;
    let center = |m: &DMatrix<f64>| {
        let mean = m.row_mean();
        let mut c = m.clone();
        for mut row in c.row_iter_mut() {
            row -= &mean;
        }
        c
    };
    let (xc, yc) = (center(&x), center(&y));
    let d = x.ncols();
    let sxx = xc.transpose() * &xc / (b - 1.0) + DMatrix::identity(d, d) * ridge;
    let syy = yc.transpose() * &yc / (b - 1.0) + DMatrix::identity(d, d) * ridge;
    let sxy = xc.transpose() * &yc / (b - 1.0);
    let lx = sxx.cholesky().unwrap().l();
    let ly = syy.cholesky().unwrap().l();
    let left = lx.solve_lower_triangular(&sxy).unwrap();
    let t = ly.solve_lower_triangular(&left.transpose()).unwrap().transpose();
    t.svd(false, false).singular_values.iter().copied().collect()
}

/// `y = coupling · x M + noise`
pub fn random_pair(seed: u64, b: usize, d: usize, coupling: f64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::gaussian(&mut rng, b, d, 1.0);
    let mix = Matrix::gaussian(&mut rng, d, d, 1.0);
    let mut y = x.matmul(&mix).unwrap().scale(coupling);
    y.add_assign(&Matrix::gaussian(&mut rng, b, d, 1.0)).unwrap();
    (x, y)
}

/// Random orthogonal `n×n`.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    from_na(&to_na(&Matrix::gaussian(rng, n, n, 1.0)).qr().q())
}

/// SPD matrix whose extreme eigenvalues are exactly `max_cond` apart.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, max_cond: f64) -> Matrix {
    let q = to_na(&orthogonal(rng, n));
    let top = max_cond.log10();
    let lambdas: Vec<f64> = (0..n)
        .map(|i| match i {
            0 => 1e-3,
            1 => 1e-3 * max_cond,
            _ => 1e-3 * 10f64.powf(rng.random_range(0.0..top)),
        })
        .collect();
    let a = &q * DMatrix::from_diagonal(&DVector::from_vec(lambdas)) * q.transpose();
    from_na(&((&a + a.transpose()) * 0.5))
}

/// `‖B A B − I‖_∞` (max absolute row sum).
pub fn whitening_residual(a: &Matrix, b: &Matrix) -> f64 {
    let mut bab = b.matmul(a).unwrap().matmul(b).unwrap();
    for i in 0..a.rows() {
        bab[(i, i)] -= 1.0;
    }
    (0..bab.rows()).map(|r| bab.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Standardized 1-d column with sample variance exactly 1 up to rounding.
pub fn unit_variance_column(seed: u64, b: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = raw.iter().sum::<f64>() / b as f64;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b as f64 - 1.0);
    Matrix::from_vec(b, 1, raw.iter().map(|v| (v - mean) / var.sqrt()).collect()).unwrap()
}

/// Two views with exactly zero sample cross-covariance.
pub fn uncorrelated_pair() -> (Matrix, Matrix) {
    let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
    let y = Matrix::from_rows(&[[1.0], [-1.0], [-1.0], [1.0]]);
    let y = Matrix::hstack(&[&y, &y.scale(2.0)]).unwrap();
    (x, y)
}
