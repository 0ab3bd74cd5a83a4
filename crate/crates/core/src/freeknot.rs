//! Greedy free-knot placement for spline eigenfunctions.
//!
//! Starting from a knotless basis, one candidate knot is added at a time,
//! always the one giving the largest leading eigenvalue of the constrained
//! spline eigenproblem. The search stops when the relative gain falls below a
//! tolerance or the knot budget is spent.

use nalgebra::{DMatrix, DVector};

use crate::bspline::{evaluate_basis, SplineBasis, SplineFunction};
use crate::error::{FsvdError, Result};
use crate::grid::{Grid, QuadWeights};
use crate::linalg::{canonical_sign, generalized_leading_eigen, orthogonal_complement, DEFAULT_REL_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct KnotSearchConfig {
    /// Candidate knot locations; `None` uses the interior points of the data grid.
    pub candidates: Option<Vec<f64>>,
    pub max_knots: usize,
    pub rel_improvement_tol: f64,
    pub allow_repeats: bool,
}

impl Default for KnotSearchConfig {
    fn default() -> Self {
        Self {
            candidates: None,
            max_knots: 10,
            rel_improvement_tol: 1e-3,
            allow_repeats: true,
        }
    }
}

impl KnotSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_improvement_tol > 0.0 && self.rel_improvement_tol.is_finite()) {
            return Err(FsvdError::InvalidConfig(format!(
                "rel_improvement_tol must be positive, got {}",
                self.rel_improvement_tol
            )));
        }
        if let Some(c) = &self.candidates {
            if c.iter().any(|x| !x.is_finite()) {
                return Err(FsvdError::InvalidConfig("non-finite candidate knot".into()));
            }
        }
        Ok(())
    }

    pub fn with_max_knots(&self, max_knots: usize) -> Self {
        Self {
            max_knots,
            ..self.clone()
        }
    }

    fn candidate_points(&self, grid: &Grid) -> Vec<f64> {
        match &self.candidates {
            Some(c) => c.clone(),
            None => grid.interior().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnotStep {
    pub knot: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct KnotSearchResult {
    pub basis: SplineBasis,
    pub objective: f64,
    /// Objective of the starting (knotless) basis.
    pub initial_objective: f64,
    /// Accepted knots in the order they were added.
    pub path: Vec<KnotStep>,
}

impl KnotSearchResult {
    /// Basis built from the starting basis plus the first `budget` accepted knots.
    pub fn basis_with_budget(&self, start: &SplineBasis, budget: usize) -> Result<SplineBasis> {
        let mut basis = start.clone();
        for step in self.path.iter().take(budget) {
            basis = basis.with_knot(step.knot)?;
        }
        Ok(basis)
    }
}

/// Greedy aggregation of knots maximizing `objective`.
///
/// Candidates outside the open interval of `start`, or already at full
/// multiplicity, are skipped. Non-finite objective values disqualify a
/// candidate; a round in which every candidate is disqualified is an error.
pub fn greedy_knot_aggregation<F>(
    mut objective: F,
    start: &SplineBasis,
    candidates: &[f64],
    config: &KnotSearchConfig,
) -> Result<KnotSearchResult>
where
    F: FnMut(&SplineBasis) -> f64,
{
    config.validate()?;
    let initial = objective(start);
    if !initial.is_finite() {
        return Err(FsvdError::SearchFailed {
            knots: 0,
            reason: format!("objective is {initial} for the starting basis"),
        });
    }
    let max_mult = if config.allow_repeats { start.order() } else { 1 };
    let mut current = start.clone();
    let mut value = initial;
    let mut path = Vec::new();
    while path.len() < config.max_knots {
        let mut best: Option<(f64, SplineBasis, f64)> = None;
        let mut tried = 0usize;
        for &c in candidates {
            if !(c > current.lower() && c < current.upper()) || current.multiplicity(c) >= max_mult {
                continue;
            }
            let trial = current.with_knot(c)?;
            tried += 1;
            let v = objective(&trial);
            if !v.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, trial, c));
            }
        }
        if tried == 0 {
            break;
        }
        let Some((best_value, best_basis, knot)) = best else {
            return Err(FsvdError::SearchFailed {
                knots: path.len(),
                reason: format!("objective non-finite for all {tried} candidates"),
            });
        };
        let improvement = (best_value - value) / value.abs().max(f64::MIN_POSITIVE);
        if improvement < config.rel_improvement_tol {
            break;
        }
        current = best_basis;
        value = best_value;
        path.push(KnotStep {
            knot,
            objective: best_value,
        });
    }
    Ok(KnotSearchResult {
        basis: current,
        objective: value,
        initial_objective: initial,
        path,
    })
}

/// The constrained spline eigenproblem for one component on one axis:
/// maximize `bᵀΩb` subject to `bᵀΓb = 1` and quadrature orthogonality to
/// previously fitted components on the data grid.
#[derive(Debug, Clone)]
pub struct ComponentProblem {
    grid: Grid,
    weights: QuadWeights,
    /// `W K W` with `W = diag(weights)`.
    weighted_kernel: DMatrix<f64>,
    /// Previous components evaluated on the grid, one per column.
    prior_values: DMatrix<f64>,
}

impl ComponentProblem {
    pub fn new(kernel: &DMatrix<f64>, grid: &Grid, prior: &[SplineFunction]) -> Result<Self> {
        let m = grid.len();
        if kernel.nrows() != m || kernel.ncols() != m {
            return Err(FsvdError::DimensionMismatch {
                context: "kernel matrix vs grid",
                expected: m,
                found: kernel.nrows(),
            });
        }
        let weights = grid.weights();
        let w = weights.as_slice();
        let weighted_kernel = DMatrix::from_fn(m, m, |i, j| w[i] * kernel[(i, j)] * w[j]);
        let mut prior_values = DMatrix::zeros(m, prior.len());
        for (k, f) in prior.iter().enumerate() {
            let vals = f.eval_points(grid.points())?;
            prior_values.set_column(k, &DVector::from_vec(vals));
        }
        Ok(Self {
            grid: grid.clone(),
            weights,
            weighted_kernel,
            prior_values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &QuadWeights {
        &self.weights
    }

    /// Γ-normalized coefficients and eigenvalue of the leading constrained
    /// eigenfunction in `basis`.
    pub fn solve(&self, basis: &SplineBasis) -> Result<(DVector<f64>, f64)> {
        let b = evaluate_basis(basis, &self.grid)?;
        let mut bw = b.clone();
        for (mut col, &wj) in bw.column_iter_mut().zip(self.weights.as_slice()) {
            col *= wj;
        }
        let gamma = &bw * b.transpose();
        let omega = &b * &self.weighted_kernel * b.transpose();
        let constraints = &bw * &self.prior_values;
        let null = orthogonal_complement(&constraints);
        if null.ncols() == 0 {
            return Err(FsvdError::RankExceeded {
                requested: self.prior_values.ncols() + 1,
                available: basis.dim(),
            });
        }
        let gamma_n = null.transpose() * &gamma * &null;
        let omega_n = null.transpose() * &omega * &null;
        let eig = generalized_leading_eigen(&omega_n, &gamma_n, 1, DEFAULT_REL_TOL)?;
        let mut coef = &null * eig.coefficients.column(0);
        canonical_sign(&mut coef);
        Ok((coef, eig.eigenvalues[0]))
    }

    pub fn objective(&self, basis: &SplineBasis) -> f64 {
        self.solve(basis).map(|(_, v)| v).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct FreeKnotComponent {
    pub function: SplineFunction,
    pub eigenvalue: f64,
    pub search: KnotSearchResult,
}

/// Fit the next component on one axis with greedily placed knots.
pub fn fit_component_freeknot(
    kernel: &DMatrix<f64>,
    grid: &Grid,
    prior: &[SplineFunction],
    config: &KnotSearchConfig,
    order: usize,
) -> Result<FreeKnotComponent> {
    let problem = ComponentProblem::new(kernel, grid, prior)?;
    fit_problem(&problem, config, order)
}

pub fn fit_problem(
    problem: &ComponentProblem,
    config: &KnotSearchConfig,
    order: usize,
) -> Result<FreeKnotComponent> {
    let grid = problem.grid();
    let start = SplineBasis::new(order, grid.first(), grid.last(), Vec::new())?;
    if start.dim() <= problem.prior_values.ncols() {
        return Err(FsvdError::RankExceeded {
            requested: problem.prior_values.ncols() + 1,
            available: start.dim(),
        });
    }
    let candidates = config.candidate_points(grid);
    let search = greedy_knot_aggregation(|b| problem.objective(b), &start, &candidates, config)?;
    let (coef, eigenvalue) = problem.solve(&search.basis)?;
    Ok(FreeKnotComponent {
        function: SplineFunction::new(search.basis.clone(), coef)?,
        eigenvalue,
        search,
    })
}

/// Discrete `L²` distance between `f` and `±truth`, whichever sign is closer.
pub fn sign_invariant_error(f: &[f64], truth: &[f64], weights: &QuadWeights) -> f64 {
    let w = weights.as_slice();
    let (mut minus, mut plus) = (0.0, 0.0);
    for j in 0..w.len() {
        minus += w[j] * (f[j] - truth[j]).powi(2);
        plus += w[j] * (f[j] + truth[j]).powi(2);
    }
    minus.min(plus).sqrt()
}

#[derive(Debug, Clone)]
pub struct OracleChoice {
    pub knots: usize,
    pub component: FreeKnotComponent,
    /// Error against the truth for each knot count `0..=path length`.
    pub errors: Vec<f64>,
}

/// Oracle knot count: the budget in `0..=max_knots` whose greedy fit is
/// closest to `truth` on the data grid (ties go to fewer knots).
///
/// The greedy path for a budget `b` is the first `b` steps of the path for
/// any larger budget, so a single search covers every budget; budgets past
/// an early tolerance stop reproduce the final fit.
pub fn select_num_knots_oracle<F>(
    problem: &ComponentProblem,
    truth: F,
    config: &KnotSearchConfig,
    order: usize,
) -> Result<OracleChoice>
where
    F: Fn(f64) -> f64,
{
    let full = fit_problem(problem, config, order)?;
    let grid = problem.grid();
    let truth_vals: Vec<f64> = grid.points().iter().map(|&x| truth(x)).collect();
    let start = SplineBasis::new(order, grid.first(), grid.last(), Vec::new())?;
    let mut errors = Vec::with_capacity(full.search.path.len() + 1);
    let mut best: Option<(usize, FreeKnotComponent, f64)> = None;
    for budget in 0..=full.search.path.len() {
        let basis = full.search.basis_with_budget(&start, budget)?;
        let (coef, eigenvalue) = problem.solve(&basis)?;
        let function = SplineFunction::new(basis.clone(), coef)?;
        let vals = function.eval_points(grid.points())?;
        let err = sign_invariant_error(&vals, &truth_vals, problem.weights());
        errors.push(err);
        if best.as_ref().is_none_or(|(_, _, e)| err < *e) {
            let search = KnotSearchResult {
                basis,
                objective: eigenvalue,
                initial_objective: full.search.initial_objective,
                path: full.search.path[..budget].to_vec(),
            };
            best = Some((
                budget,
                FreeKnotComponent {
                    function,
                    eigenvalue,
                    search,
                },
                err,
            ));
        }
    }
    let (knots, component, _) = best.expect("at least the knotless fit");
    Ok(OracleChoice {
        knots,
        component,
        errors,
    })
}

/// Knot budgets of the fixed-count protocol, indexed by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedKnotSchedule {
    pub phi: [usize; 2],
    pub psi: [usize; 2],
}

pub fn fixed_knot_protocol() -> FixedKnotSchedule {
    FixedKnotSchedule {
        phi: [3, 5],
        psi: [2, 4],
    }
}
