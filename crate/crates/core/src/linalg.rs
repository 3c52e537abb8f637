//! Fixed-size aliases for the gearshift problem and a few small dense helpers.

use nalgebra::{DMatrix, SMatrix, SVector, SymmetricEigen};

/// Number of states: motor speed, output speed, vehicle speed, driveshaft elongation.
pub const NX: usize = 4;
/// Number of plant inputs: motor torque, clutch 1 torque, clutch 2 torque.
pub const NU: usize = 3;
/// Number of feedback-controlled inputs (motor and clutch 2).
pub const NFB: usize = 2;
/// GP feature width `[x; u]`.
pub const NZ: usize = NX + NU;

pub type StateVec = SVector<f64, NX>;
pub type ControlVec = SVector<f64, NU>;
pub type FeatureVec = SVector<f64, NZ>;
pub type StateMat = SMatrix<f64, NX, NX>;
pub type InputMat = SMatrix<f64, NX, NU>;
pub type FeatureMat = SMatrix<f64, NZ, NZ>;
pub type GainMat = SMatrix<f64, NFB, NX>;
pub type FullGainMat = SMatrix<f64, NU, NX>;

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize<const N: usize>(m: &mut SMatrix<f64, N, N>) {
    for i in 0..N {
        for j in (i + 1)..N {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetrizes `m` and, if it has eigenvalues below `-tol`, clips them to zero.
///
/// Matrices that already factor as PSD are left untouched so the operation is
/// smooth wherever the input is well conditioned; non-finite input is returned
/// symmetrized but otherwise unchanged.
pub fn psd_floor<const N: usize>(m: &mut SMatrix<f64, N, N>, tol: f64) {
    symmetrize(m);
    if m.cholesky().is_some() || !m.iter().all(|v| v.is_finite()) {
        return;
    }
    let eig = SymmetricEigen::new(DMatrix::from_column_slice(N, N, m.as_slice()));
    if eig.eigenvalues.iter().all(|&l| l >= -tol) {
        return;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    m.copy_from_slice(r.as_slice());
    symmetrize(m);
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    SymmetricEigen::new(DMatrix::from_column_slice(N, N, m.as_slice())).eigenvalues.min()
}

/// Exact zero-order-hold discretization of `ẋ = A x + B u` over `dt`,
/// via the exponential of the augmented matrix `[[A, B], [0, 0]]`.
pub fn zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = (aug * dt).exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

/// Discrete-time infinite-horizon LQR by fixed-point iteration of the Riccati
/// recursion. Returns the gain `K` (for `u = -K x`) and the Riccati solution `P`.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let mut p = q.clone();
    let at = a.transpose();
    let bt = b.transpose();
    for _ in 0..max_iter {
        let pa = &p * a;
        let pb = &p * b;
        let s = r + &bt * &pb;
        let sk = s.lu().solve(&(&bt * &pa))?;
        let next = q + &at * &pa - (&at * &pb) * sk;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) {
            return None;
        }
        let change = (&next - &p).amax();
        p = next;
        if change <= tol * p.amax().max(1.0) {
            let s = r + &bt * &p * b;
            let k = s.lu().solve(&(&bt * &p * a))?;
            return Some((k, p));
        }
    }
    None
}

/// Spectral radius of a real square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}
