//! Tensor-product penalized cubic B-spline smoother for a mean surface.
//!
//! The fit minimizes
//!
//! ```text
//! Σⱼₖ vⱼ uₖ (μ̂(sⱼ,tₖ) − f(sⱼ,tₖ))² + θ ∬ (f_ss² + f_tt²)
//! ```
//!
//! over `f(s,t) = Σ C_ab βₐ(s) γ_b(t)`. With coefficients vectorized
//! column-major (`a + q_s·b`), the normal matrix is
//! `G_t⊗G_s + θ (E_t⊗P_s + P_t⊗E_s)`, where `G` are quadrature Gram
//! matrices, `E` exact Gram matrices and `P` second-derivative penalties.

use nalgebra::{DMatrix, DVector};

use crate::bspline::{evaluate_basis, gram_matrix, second_derivative_penalty, SplineBasis};
use crate::error::{FsvdError, Result};
use crate::fsvd::{weighted_frobenius_sq, MeanSurface};
use crate::grid::Grid;
use crate::linalg::{sorted_symmetric_eigen, symmetric_inverse_sqrt, DEFAULT_REL_TOL};

/// Number of log-spaced smoothing values probed before refinement.
pub const THETA_GRID_SIZE: usize = 40;
/// Probed range of `θ / normalizer`.
pub const THETA_RANGE: (f64, f64) = (1e-8, 1e4);

#[derive(Debug, Clone, PartialEq)]
pub struct TpsFit {
    pub s_basis: SplineBasis,
    pub t_basis: SplineBasis,
    /// q_s × q_t coefficient matrix.
    pub coefficients: DMatrix<f64>,
    pub theta: f64,
}

impl TpsFit {
    pub fn eval_points(&self, s_points: &[f64], t_points: &[f64]) -> Result<DMatrix<f64>> {
        let bs = self.s_basis.evaluate_points(s_points)?;
        let bt = self.t_basis.evaluate_points(t_points)?;
        Ok(bs.transpose() * &self.coefficients * bt)
    }

    pub fn surface(&self, eval_s: &Grid, eval_t: &Grid) -> Result<MeanSurface> {
        let values = self.eval_points(eval_s.points(), eval_t.points())?;
        MeanSurface::new(eval_s.clone(), eval_t.clone(), values)
    }
}

/// Cubic bases with a knot at every interior grid point.
pub fn grid_bases(s_grid: &Grid, t_grid: &Grid) -> Result<(SplineBasis, SplineBasis)> {
    Ok((
        SplineBasis::knots_at_grid(4, s_grid)?,
        SplineBasis::knots_at_grid(4, t_grid)?,
    ))
}

struct AxisMatrices {
    basis_values: DMatrix<f64>,
    weights: Vec<f64>,
    quad_gram: DMatrix<f64>,
    exact_gram: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl AxisMatrices {
    fn new(basis: &SplineBasis, grid: &Grid) -> Result<Self> {
        let basis_values = evaluate_basis(basis, grid)?;
        let w = grid.weights();
        Ok(Self {
            quad_gram: gram_matrix(&basis_values, &w)?,
            basis_values,
            weights: w.as_slice().to_vec(),
            exact_gram: basis.exact_gram(),
            penalty: second_derivative_penalty(basis)?,
        })
    }
}

fn rhs(s: &AxisMatrices, t: &AxisMatrices, mean: &MeanSurface) -> DVector<f64> {
    let mut wm = mean.values.clone();
    for j in 0..wm.nrows() {
        for k in 0..wm.ncols() {
            wm[(j, k)] *= s.weights[j] * t.weights[k];
        }
    }
    let r = &s.basis_values * wm * t.basis_values.transpose();
    DVector::from_column_slice(r.as_slice())
}

fn check_mean(mean: &MeanSurface, theta: f64) -> Result<()> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(FsvdError::InvalidConfig(format!(
            "smoothing parameter must be finite and >= 0, got {theta}"
        )));
    }
    if mean.s_grid.len() < 2 || mean.t_grid.len() < 2 {
        return Err(FsvdError::InvalidGrid("surface grids too small".into()));
    }
    Ok(())
}

/// Fit with cubic bases knotted at the grid points.
pub fn fit_tps(mean: &MeanSurface, theta: f64) -> Result<TpsFit> {
    let (s_basis, t_basis) = grid_bases(&mean.s_grid, &mean.t_grid)?;
    fit_tps_with_bases(mean, &s_basis, &t_basis, theta)
}

/// Fit by one dense Cholesky solve of the penalized normal equations.
pub fn fit_tps_with_bases(
    mean: &MeanSurface,
    s_basis: &SplineBasis,
    t_basis: &SplineBasis,
    theta: f64,
) -> Result<TpsFit> {
    check_mean(mean, theta)?;
    let s = AxisMatrices::new(s_basis, &mean.s_grid)?;
    let t = AxisMatrices::new(t_basis, &mean.t_grid)?;
    let (qs, qt) = (s_basis.dim(), t_basis.dim());
    if theta == 0.0 {
        let rs = symmetric_inverse_sqrt(&s.quad_gram, DEFAULT_REL_TOL)?.rank;
        let rt = symmetric_inverse_sqrt(&t.quad_gram, DEFAULT_REL_TOL)?.rank;
        if rs < qs || rt < qt {
            return Err(FsvdError::Singular(format!(
                "design has rank {rs}x{rt} for {qs}x{qt} coefficients; use a smoothing parameter > 0"
            )));
        }
    }
    let normal = t.quad_gram.kronecker(&s.quad_gram)
        + (t.exact_gram.kronecker(&s.penalty) + t.penalty.kronecker(&s.exact_gram)) * theta;
    let chol = normal.cholesky().ok_or_else(|| {
        FsvdError::Singular("penalized normal equations are not positive definite; use a smoothing parameter > 0".into())
    })?;
    let c = chol.solve(&rhs(&s, &t, mean));
    Ok(TpsFit {
        s_basis: s_basis.clone(),
        t_basis: t_basis.clone(),
        coefficients: DMatrix::from_column_slice(qs, qt, c.as_slice()),
        theta,
    })
}

/// Precomputed simultaneous diagonalization of the design and penalty
/// matrices for one pair of grids, so that each smoothing value costs one
/// matrix–vector product.
///
/// With `S = D + c·R` (`D` design, `R` penalty, `c = tr D / tr R`) and
/// `Zᵀ S Z = I`, `Zᵀ D Z = Λ`, the system `D + τc·R` becomes diagonal:
/// `Λ + τ(I − Λ)`.
pub struct TpsSolver {
    s: AxisMatrices,
    t: AxisMatrices,
    s_basis: SplineBasis,
    t_basis: SplineBasis,
    s_grid: Grid,
    t_grid: Grid,
    transform: DMatrix<f64>,
    design_eigenvalues: Vec<f64>,
    normalizer: f64,
}

impl TpsSolver {
    pub fn new(s_grid: &Grid, t_grid: &Grid) -> Result<Self> {
        let (s_basis, t_basis) = grid_bases(s_grid, t_grid)?;
        Self::with_bases(s_grid, t_grid, s_basis, t_basis)
    }

    pub fn with_bases(
        s_grid: &Grid,
        t_grid: &Grid,
        s_basis: SplineBasis,
        t_basis: SplineBasis,
    ) -> Result<Self> {
        let s = AxisMatrices::new(&s_basis, s_grid)?;
        let t = AxisMatrices::new(&t_basis, t_grid)?;
        let design = t.quad_gram.kronecker(&s.quad_gram);
        let penalty = t.exact_gram.kronecker(&s.penalty) + t.penalty.kronecker(&s.exact_gram);
        let normalizer = design.trace() / penalty.trace();
        let stacked = &design + &penalty * normalizer;
        let l = stacked
            .cholesky()
            .ok_or_else(|| FsvdError::Singular("design plus penalty is not positive definite".into()))?
            .l();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(design.nrows(), design.nrows()))
            .ok_or_else(|| FsvdError::Singular("triangular factor is singular".into()))?;
        let reduced = &l_inv * &design * l_inv.transpose();
        let eig = sorted_symmetric_eigen(&reduced);
        let transform = l_inv.transpose() * eig.vectors;
        let design_eigenvalues = eig.values.iter().map(|l| l.clamp(0.0, 1.0)).collect();
        Ok(Self {
            s,
            t,
            s_basis,
            t_basis,
            s_grid: s_grid.clone(),
            t_grid: t_grid.clone(),
            transform,
            design_eigenvalues,
            normalizer,
        })
    }

    /// Scale converting relative smoothing values `τ` to `θ = τ · normalizer`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    fn check_grids(&self, mean: &MeanSurface) -> Result<()> {
        if mean.s_grid != self.s_grid || mean.t_grid != self.t_grid {
            return Err(FsvdError::Inconsistent(
                "surface grids differ from the solver grids".into(),
            ));
        }
        Ok(())
    }

    /// Coordinates of the right-hand side in the diagonalizing basis.
    pub fn project(&self, mean: &MeanSurface) -> Result<DVector<f64>> {
        self.check_grids(mean)?;
        Ok(self.transform.transpose() * rhs(&self.s, &self.t, mean))
    }

    /// Coefficients for `θ = tau · normalizer` from projected data.
    pub fn coefficients(&self, projected: &DVector<f64>, tau: f64) -> DMatrix<f64> {
        let scaled = DVector::from_iterator(
            projected.len(),
            projected
                .iter()
                .zip(&self.design_eigenvalues)
                .map(|(y, l)| y / (l + tau * (1.0 - l))),
        );
        let c = &self.transform * scaled;
        DMatrix::from_column_slice(self.s_basis.dim(), self.t_basis.dim(), c.as_slice())
    }

    pub fn fit(&self, mean: &MeanSurface, theta: f64) -> Result<TpsFit> {
        check_mean(mean, theta)?;
        if theta == 0.0 && self.design_eigenvalues.iter().any(|&l| l <= 1e-12) {
            return Err(FsvdError::Singular(
                "design is rank deficient; use a smoothing parameter > 0".into(),
            ));
        }
        let y = self.project(mean)?;
        Ok(TpsFit {
            s_basis: self.s_basis.clone(),
            t_basis: self.t_basis.clone(),
            coefficients: self.coefficients(&y, theta / self.normalizer),
            theta,
        })
    }
}

#[derive(Debug, Clone)]
pub struct OracleSmoothing {
    pub theta: f64,
    pub fit: TpsFit,
    /// Root integrated squared error at `theta`.
    pub error: f64,
    /// `(θ, error)` at each log-spaced probe.
    pub probes: Vec<(f64, f64)>,
    /// Best error over the probe grid alone, before refinement.
    pub grid_error: f64,
}

/// Smoothing parameter minimizing the integrated squared error against a
/// known truth on the evaluation grids: log-spaced probes followed by
/// golden-section refinement around the best probe.
pub fn oracle_smoothing<F>(
    mean: &MeanSurface,
    truth: F,
    eval_s: &Grid,
    eval_t: &Grid,
) -> Result<OracleSmoothing>
where
    F: Fn(f64, f64) -> f64,
{
    let solver = TpsSolver::new(&mean.s_grid, &mean.t_grid)?;
    oracle_with_solver(&solver, mean, &truth, eval_s, eval_t)
}

/// [`oracle_smoothing`] reusing a precomputed solver.
pub fn oracle_with_solver<F>(
    solver: &TpsSolver,
    mean: &MeanSurface,
    truth: &F,
    eval_s: &Grid,
    eval_t: &Grid,
) -> Result<OracleSmoothing>
where
    F: Fn(f64, f64) -> f64,
{
    let y = solver.project(mean)?;
    let es = solver.s_basis.evaluate_points(eval_s.points())?.transpose();
    let et = solver.t_basis.evaluate_points(eval_t.points())?;
    let target = DMatrix::from_fn(eval_s.len(), eval_t.len(), |j, k| {
        truth(eval_s.points()[j], eval_t.points()[k])
    });
    let (ws, wt) = (eval_s.weights(), eval_t.weights());
    let error_at = |log_tau: f64| {
        let c = solver.coefficients(&y, 10f64.powf(log_tau));
        let diff = &es * c * &et - &target;
        weighted_frobenius_sq(&diff, &ws, &wt).sqrt()
    };
    let (lo, hi) = (THETA_RANGE.0.log10(), THETA_RANGE.1.log10());
    let step = (hi - lo) / (THETA_GRID_SIZE - 1) as f64;
    let logs: Vec<f64> = (0..THETA_GRID_SIZE).map(|i| lo + step * i as f64).collect();
    let errs: Vec<f64> = logs.iter().map(|&l| error_at(l)).collect();
    let best = errs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &e)| if e < errs[b] { i } else { b });
    let mut a = logs[best.saturating_sub(1)];
    let mut b = logs[(best + 1).min(THETA_GRID_SIZE - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (error_at(x1), error_at(x2));
    while b - a > 1e-4 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = error_at(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = error_at(x2);
        }
    }
    let (mut log_tau, mut error) = if f1 < f2 { (x1, f1) } else { (x2, f2) };
    if errs[best] <= error {
        log_tau = logs[best];
        error = errs[best];
    }
    let tau = 10f64.powf(log_tau);
    let theta = tau * solver.normalizer;
    let fit = TpsFit {
        s_basis: solver.s_basis.clone(),
        t_basis: solver.t_basis.clone(),
        coefficients: solver.coefficients(&y, tau),
        theta,
    };
    Ok(OracleSmoothing {
        theta,
        fit,
        error,
        probes: logs
            .iter()
            .zip(&errs)
            .map(|(l, e)| (10f64.powf(*l) * solver.normalizer, *e))
            .collect(),
        grid_error: errs[best],
    })
}
