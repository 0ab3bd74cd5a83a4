//! Dense symmetric eigen-machinery shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{FsvdError, Result};

/// Default relative cutoff below which Gram eigenvalues are treated as zero.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    /// Eigenvectors stored column-wise in the order of `values`.
    pub vectors: DMatrix<f64>,
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_square(a: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(FsvdError::DimensionMismatch {
            context,
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    Ok(())
}

pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> SortedEigen {
    let n = a.nrows();
    if n == 0 {
        return SortedEigen {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        };
    }
    let eig = symmetrize(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    SortedEigen { values, vectors }
}

/// Flip `v` so that its first non-negligible entry is positive.
pub fn canonical_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// `G^{-1/2}` restricted to the eigenspace of `G` whose eigenvalues exceed
/// `rel_tol * λ_max`.
#[derive(Debug, Clone)]
pub struct InverseSqrt {
    /// The symmetric pseudo-inverse square root (q×q).
    pub matrix: DMatrix<f64>,
    /// `Q_r Λ_r^{-1/2}` (q×rank); `factorᵀ G factor = I`.
    pub factor: DMatrix<f64>,
    pub rank: usize,
}

pub fn symmetric_inverse_sqrt(g: &DMatrix<f64>, rel_tol: f64) -> Result<InverseSqrt> {
    check_square(g, "symmetric inverse square root")?;
    let n = g.nrows();
    let eig = sorted_symmetric_eigen(g);
    let lmax = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    if let Some(&lmin) = eig.values.last() {
        if lmin < -rel_tol * lmax || (lmax == 0.0 && lmin < 0.0) {
            return Err(FsvdError::NotPositiveSemidefinite {
                min_eigenvalue: lmin,
                scale: lmax,
            });
        }
    }
    let rank = eig
        .values
        .iter()
        .take_while(|&&l| lmax > 0.0 && l > rel_tol * lmax)
        .count();
    let mut factor = DMatrix::zeros(n, rank);
    for k in 0..rank {
        let scaled = eig.vectors.column(k) / eig.values[k].sqrt();
        factor.set_column(k, &scaled);
    }
    let basis = eig.vectors.columns(0, rank);
    let matrix = &factor * basis.transpose();
    Ok(InverseSqrt {
        matrix,
        factor,
        rank,
    })
}

/// Leading generalized eigenpairs of `Ω b = λ Γ b`, computed by whitening
/// with `Γ^{-1/2}`. Columns of the returned coefficient matrix satisfy
/// `bⱼᵀ Γ bₖ = δⱼₖ`; eigenvalues are nonincreasing.
#[derive(Debug, Clone)]
pub struct GeneralizedEigen {
    pub coefficients: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

pub fn generalized_leading_eigen(
    omega: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    p: usize,
    rel_tol: f64,
) -> Result<GeneralizedEigen> {
    check_square(omega, "omega matrix")?;
    check_square(gamma, "gram matrix")?;
    if omega.nrows() != gamma.nrows() {
        return Err(FsvdError::DimensionMismatch {
            context: "omega vs gram matrix",
            expected: gamma.nrows(),
            found: omega.nrows(),
        });
    }
    let whitener = symmetric_inverse_sqrt(gamma, rel_tol)?;
    if p > whitener.rank {
        return Err(FsvdError::RankExceeded {
            requested: p,
            available: whitener.rank,
        });
    }
    let f = &whitener.factor;
    let whitened = f.transpose() * omega * f;
    let eig = sorted_symmetric_eigen(&whitened);
    let q = omega.nrows();
    let mut coefficients = DMatrix::zeros(q, p);
    let mut eigenvalues = Vec::with_capacity(p);
    for k in 0..p {
        let mut b: DVector<f64> = f * eig.vectors.column(k);
        canonical_sign(&mut b);
        eigenvalues.push(eig.values[k]);
        coefficients.set_column(k, &b);
    }
    Ok(GeneralizedEigen {
        coefficients,
        eigenvalues,
    })
}

/// Orthonormal basis (q × (q − rank A)) of the vectors orthogonal to every
/// column of `a`.
pub fn orthogonal_complement(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::identity(q, q);
    }
    let eig = sorted_symmetric_eigen(&(a * a.transpose()));
    let lmax = eig.values[0].max(0.0);
    let rank = eig
        .values
        .iter()
        .take_while(|&&l| lmax > 0.0 && l > 1e-12 * lmax)
        .count();
    eig.vectors.columns(rank, q - rank).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_inverse_sqrt() {
        let s = symmetric_inverse_sqrt(&DMatrix::identity(4, 4), DEFAULT_REL_TOL).unwrap();
        assert_eq!(s.rank, 4);
        assert_relative_eq!(s.matrix, DMatrix::identity(4, 4), epsilon = 1e-14);
    }

    #[test]
    fn diagonal_inverse_sqrt() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let s = symmetric_inverse_sqrt(&g, DEFAULT_REL_TOL).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]));
        assert_relative_eq!(s.matrix, want, epsilon = 1e-14);
    }

    #[test]
    fn random_spd_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 5);
        let g = &a * a.transpose() + DMatrix::identity(5, 5) * 0.1;
        let s = symmetric_inverse_sqrt(&g, DEFAULT_REL_TOL).unwrap();
        let recon = &s.matrix * &g * &s.matrix;
        assert_relative_eq!(recon, DMatrix::identity(5, 5), epsilon = 1e-10);
    }

    #[test]
    fn rank_deficient_drops_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 5, 3);
        let g = &a * a.transpose();
        let s = symmetric_inverse_sqrt(&g, DEFAULT_REL_TOL).unwrap();
        assert_eq!(s.rank, 3);
        let recon = s.factor.transpose() * &g * &s.factor;
        assert_relative_eq!(recon, DMatrix::identity(3, 3), epsilon = 1e-10);
    }

    #[test]
    fn rejects_indefinite() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(
            symmetric_inverse_sqrt(&g, DEFAULT_REL_TOL),
            Err(FsvdError::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn complement_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 6, 2);
        let n = orthogonal_complement(&a);
        assert_eq!(n.ncols(), 4);
        assert!((a.transpose() * &n).amax() < 1e-12);
        assert_relative_eq!(n.transpose() * &n, DMatrix::identity(4, 4), epsilon = 1e-12);
    }
}
