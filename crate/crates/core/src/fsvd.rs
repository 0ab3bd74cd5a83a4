//! Spline estimation of the functional singular value decomposition
//! `μ(s,t) = Σ λₖ^{1/2} φₖ(s) ψₖ(t)` from gridded samples.
//!
//! The φ side is fitted from `k̂₁(s,s') = ∫ μ̂(s,t) μ̂(s',t) dt`, the ψ side
//! from `k̂₂(t,t') = ∫ μ̂(s,t) μ̂(s,t') ds`, each as a generalized symmetric
//! eigenproblem in a spline basis. Components are paired by index and the
//! ψ sign is chosen so that `λ̂ₖ^{1/2} = ∬ μ̂ φ̂ₖ ψ̂ₖ` is nonnegative.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bspline::{evaluate_basis, gram_matrix, BasisMatrix, SplineBasis, SplineFunction};
use crate::error::{FsvdError, Result};
use crate::freeknot::{fit_component_freeknot, KnotSearchConfig};
use crate::grid::{Grid, QuadWeights};
use crate::linalg::{generalized_leading_eigen, GeneralizedEigen, DEFAULT_REL_TOL};

/// Raw observations `x_{ijk}`: one m×r matrix per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTensor {
    s_grid: Grid,
    t_grid: Grid,
    surfaces: Vec<DMatrix<f64>>,
}

impl DataTensor {
    pub fn new(s_grid: Grid, t_grid: Grid, surfaces: Vec<DMatrix<f64>>) -> Result<Self> {
        for (i, x) in surfaces.iter().enumerate() {
            if x.nrows() != s_grid.len() || x.ncols() != t_grid.len() {
                return Err(FsvdError::Inconsistent(format!(
                    "subject {i} has a {}x{} surface, expected {}x{}",
                    x.nrows(),
                    x.ncols(),
                    s_grid.len(),
                    t_grid.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FsvdError::Inconsistent(format!(
                    "subject {i} has non-finite values"
                )));
            }
        }
        Ok(Self {
            s_grid,
            t_grid,
            surfaces,
        })
    }

    pub fn n(&self) -> usize {
        self.surfaces.len()
    }

    pub fn m(&self) -> usize {
        self.s_grid.len()
    }

    pub fn r(&self) -> usize {
        self.t_grid.len()
    }

    pub fn s_grid(&self) -> &Grid {
        &self.s_grid
    }

    pub fn t_grid(&self) -> &Grid {
        &self.t_grid
    }

    pub fn surfaces(&self) -> &[DMatrix<f64>] {
        &self.surfaces
    }

    pub fn surface(&self, i: usize) -> Result<&DMatrix<f64>> {
        self.surfaces.get(i).ok_or(FsvdError::IndexOutOfRange {
            index: i,
            len: self.n(),
            what: "subjects",
        })
    }

    /// Tensor restricted to the listed subjects, in the listed order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let surfaces = indices
            .iter()
            .map(|&i| self.surface(i).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            s_grid: self.s_grid.clone(),
            t_grid: self.t_grid.clone(),
            surfaces,
        })
    }
}

/// A surface tabulated on a product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSurface {
    pub s_grid: Grid,
    pub t_grid: Grid,
    pub values: DMatrix<f64>,
}

impl MeanSurface {
    pub fn new(s_grid: Grid, t_grid: Grid, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != s_grid.len() || values.ncols() != t_grid.len() {
            return Err(FsvdError::DimensionMismatch {
                context: "surface values vs grids",
                expected: s_grid.len() * t_grid.len(),
                found: values.nrows() * values.ncols(),
            });
        }
        Ok(Self {
            s_grid,
            t_grid,
            values,
        })
    }

    pub fn zeros(s_grid: Grid, t_grid: Grid) -> Self {
        let values = DMatrix::zeros(s_grid.len(), t_grid.len());
        Self {
            s_grid,
            t_grid,
            values,
        }
    }

    /// `∬ f²` by the product trapezoid rule.
    pub fn squared_norm(&self) -> f64 {
        weighted_frobenius_sq(&self.values, &self.s_grid.weights(), &self.t_grid.weights())
    }
}

/// `Σⱼₖ vⱼ uₖ a_{jk}²`.
pub fn weighted_frobenius_sq(a: &DMatrix<f64>, v: &QuadWeights, u: &QuadWeights) -> f64 {
    let (v, u) = (v.as_slice(), u.as_slice());
    let mut total = 0.0;
    for k in 0..a.ncols() {
        let mut col = 0.0;
        for j in 0..a.nrows() {
            col += v[j] * a[(j, k)] * a[(j, k)];
        }
        total += u[k] * col;
    }
    total
}

pub fn cross_sectional_mean(data: &DataTensor) -> Result<MeanSurface> {
    let n = data.n();
    if n == 0 {
        return Err(FsvdError::EmptyData("no subjects".into()));
    }
    let mut sum = DMatrix::zeros(data.m(), data.r());
    for x in data.surfaces() {
        sum += x;
    }
    MeanSurface::new(data.s_grid.clone(), data.t_grid.clone(), sum / n as f64)
}

fn scale_columns(a: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = a.clone();
    for (mut col, &wk) in out.column_iter_mut().zip(w) {
        col *= wk;
    }
    out
}

/// `K₁ = M U Mᵀ` (m×m), the discretized `k̂₁`.
pub fn kernel_k1(mean: &MeanSurface, u: &QuadWeights) -> Result<DMatrix<f64>> {
    if u.len() != mean.values.ncols() {
        return Err(FsvdError::DimensionMismatch {
            context: "k1 weights vs t grid",
            expected: mean.values.ncols(),
            found: u.len(),
        });
    }
    let mu = scale_columns(&mean.values, u.as_slice());
    Ok(crate::linalg::symmetrize(&(mu * mean.values.transpose())))
}

/// `K₂ = Mᵀ V M` (r×r), the discretized `k̂₂`.
pub fn kernel_k2(mean: &MeanSurface, v: &QuadWeights) -> Result<DMatrix<f64>> {
    if v.len() != mean.values.nrows() {
        return Err(FsvdError::DimensionMismatch {
            context: "k2 weights vs s grid",
            expected: mean.values.nrows(),
            found: v.len(),
        });
    }
    let mt = mean.values.transpose();
    let mtv = scale_columns(&mt, v.as_slice());
    Ok(crate::linalg::symmetrize(&(mtv * &mean.values)))
}

/// `Ω̂ = B V K V Bᵀ` for a q×m basis matrix.
pub fn omega_matrix(b: &BasisMatrix, v: &QuadWeights, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = v.len();
    if b.ncols() != m {
        return Err(FsvdError::DimensionMismatch {
            context: "omega: basis columns vs weights",
            expected: m,
            found: b.ncols(),
        });
    }
    if k.nrows() != m || k.ncols() != m {
        return Err(FsvdError::DimensionMismatch {
            context: "omega: kernel vs weights",
            expected: m,
            found: k.nrows(),
        });
    }
    let bv = scale_columns(b, v.as_slice());
    Ok(crate::linalg::symmetrize(&(&bv * k * bv.transpose())))
}

/// Leading `p` solutions of `max bᵀΩ̂b` under `bᵀΓb = 1` and Γ-orthogonality
/// to the earlier solutions.
pub fn sequential_eigenfunctions(
    omega: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    p: usize,
) -> Result<GeneralizedEigen> {
    generalized_leading_eigen(omega, gamma, p, DEFAULT_REL_TOL)
}

/// `φ(𝐬)ᵀ V X̄ U ψ(𝐭)`, the quadrature form of `∬ μ̂ φ ψ`.
pub fn root_eigenvalue(
    phi_vals: &[f64],
    psi_vals: &[f64],
    mean: &MeanSurface,
    v: &QuadWeights,
    u: &QuadWeights,
) -> Result<f64> {
    bilinear_form(phi_vals, psi_vals, &mean.values, v, u)
}

fn bilinear_form(
    phi_vals: &[f64],
    psi_vals: &[f64],
    x: &DMatrix<f64>,
    v: &QuadWeights,
    u: &QuadWeights,
) -> Result<f64> {
    let (m, r) = x.shape();
    for (len, want, context) in [
        (phi_vals.len(), m, "phi values vs s grid"),
        (v.len(), m, "s weights vs s grid"),
        (psi_vals.len(), r, "psi values vs t grid"),
        (u.len(), r, "t weights vs t grid"),
    ] {
        if len != want {
            return Err(FsvdError::DimensionMismatch {
                context,
                expected: want,
                found: len,
            });
        }
    }
    let (v, u) = (v.as_slice(), u.as_slice());
    let mut total = 0.0;
    for k in 0..r {
        let mut col = 0.0;
        for j in 0..m {
            col += v[j] * phi_vals[j] * x[(j, k)];
        }
        total += col * u[k] * psi_vals[k];
    }
    Ok(total)
}

/// One fitted `(φ̂ₖ, ψ̂ₖ, λ̂ₖ^{1/2})` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPair {
    pub phi: SplineFunction,
    pub psi: SplineFunction,
    /// `∬ μ̂ φ̂ ψ̂` after sign alignment.
    pub root_eigenvalue: f64,
    /// Eigenvalue of the φ-side problem, used for ordering.
    pub phi_eigenvalue: f64,
    pub psi_eigenvalue: f64,
    /// Whether `align_signs` negated ψ.
    pub psi_flipped: bool,
}

/// Negate ψ when the bilinear form is negative. A zero form keeps the
/// orientation and records a zero root-eigenvalue.
pub fn align_signs(
    pair: ComponentPair,
    mean: &MeanSurface,
    v: &QuadWeights,
    u: &QuadWeights,
) -> Result<ComponentPair> {
    let phi_vals = pair.phi.eval_points(mean.s_grid.points())?;
    let psi_vals = pair.psi.eval_points(mean.t_grid.points())?;
    let form = root_eigenvalue(&phi_vals, &psi_vals, mean, v, u)?;
    Ok(if form < 0.0 {
        ComponentPair {
            psi: pair.psi.negated(),
            root_eigenvalue: -form,
            psi_flipped: !pair.psi_flipped,
            ..pair
        }
    } else {
        ComponentPair {
            root_eigenvalue: form,
            ..pair
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub components: Vec<ComponentPair>,
    /// n×p matrix of `ŵᵢₖ`.
    pub scores: DMatrix<f64>,
    pub s_grid: Grid,
    pub t_grid: Grid,
}

impl Decomposition {
    pub fn p(&self) -> usize {
        self.components.len()
    }

    pub fn root_eigenvalues(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.root_eigenvalue).collect()
    }

    /// Indices `k` where `λ̂ₖ^{1/2} > λ̂ₖ₋₁^{1/2}`. Separate φ and ψ fits can
    /// produce small inversions; callers report them as warnings.
    pub fn non_monotone(&self) -> Vec<usize> {
        let r = self.root_eigenvalues();
        (1..r.len()).filter(|&k| r[k] > r[k - 1]).collect()
    }

    fn check_p(&self, p: usize) -> Result<()> {
        if p > self.p() {
            return Err(FsvdError::RankExceeded {
                requested: p,
                available: self.p(),
            });
        }
        Ok(())
    }

    /// `Σₖ<p cₖ φ̂ₖ(s) ψ̂ₖ(t)` at the given points, one coefficient per component.
    pub fn eval_expansion(
        &self,
        coefs: &[f64],
        s_points: &[f64],
        t_points: &[f64],
    ) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(s_points.len(), t_points.len());
        for (c, pair) in coefs.iter().zip(&self.components) {
            if *c == 0.0 {
                continue;
            }
            let phi = DVector::from_vec(pair.phi.eval_points(s_points)?);
            let psi = DVector::from_vec(pair.psi.eval_points(t_points)?);
            out += phi * psi.transpose() * *c;
        }
        Ok(out)
    }

    fn component_values_on_grids(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.components
            .iter()
            .map(|c| {
                Ok((
                    c.phi.eval_points(self.s_grid.points())?,
                    c.psi.eval_points(self.t_grid.points())?,
                ))
            })
            .collect()
    }
}

/// Pair φ and ψ fits by index, align signs against the cross-sectional
/// mean and compute subject scores.
pub fn assemble(
    data: &DataTensor,
    phis: Vec<(SplineFunction, f64)>,
    psis: Vec<(SplineFunction, f64)>,
) -> Result<Decomposition> {
    if phis.len() != psis.len() {
        return Err(FsvdError::DimensionMismatch {
            context: "phi vs psi component counts",
            expected: phis.len(),
            found: psis.len(),
        });
    }
    let mean = cross_sectional_mean(data)?;
    let v = data.s_grid.weights();
    let u = data.t_grid.weights();
    let components = phis
        .into_iter()
        .zip(psis)
        .map(|((phi, lp), (psi, lq))| {
            align_signs(
                ComponentPair {
                    phi,
                    psi,
                    root_eigenvalue: 0.0,
                    phi_eigenvalue: lp,
                    psi_eigenvalue: lq,
                    psi_flipped: false,
                },
                &mean,
                &v,
                &u,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut decomp = Decomposition {
        scores: DMatrix::zeros(data.n(), components.len()),
        components,
        s_grid: data.s_grid.clone(),
        t_grid: data.t_grid.clone(),
    };
    decomp.scores = scores(&decomp, data)?;
    Ok(decomp)
}

/// `ŵᵢₖ = φ̂ₖ(𝐬)ᵀ V Xᵢ U ψ̂ₖ(𝐭)`.
pub fn scores(decomp: &Decomposition, data: &DataTensor) -> Result<DMatrix<f64>> {
    if data.s_grid != decomp.s_grid || data.t_grid != decomp.t_grid {
        return Err(FsvdError::Inconsistent(
            "data grids differ from the decomposition grids".into(),
        ));
    }
    let v = data.s_grid.weights();
    let u = data.t_grid.weights();
    let vals = decomp.component_values_on_grids()?;
    let mut w = DMatrix::zeros(data.n(), decomp.p());
    for (i, x) in data.surfaces().iter().enumerate() {
        for (k, (phi, psi)) in vals.iter().enumerate() {
            w[(i, k)] = bilinear_form(phi, psi, x, &v, &u)?;
        }
    }
    Ok(w)
}

/// `μ̂⁽ᵖ⁾(s,t) = Σₖ≤p λ̂ₖ^{1/2} φ̂ₖ(s) ψ̂ₖ(t)` on a product grid.
pub fn truncated_mean(
    decomp: &Decomposition,
    p: usize,
    eval_s: &Grid,
    eval_t: &Grid,
) -> Result<MeanSurface> {
    decomp.check_p(p)?;
    let coefs: Vec<f64> = decomp.root_eigenvalues()[..p].to_vec();
    let values = decomp.eval_expansion(&coefs, eval_s.points(), eval_t.points())?;
    MeanSurface::new(eval_s.clone(), eval_t.clone(), values)
}

/// `X̂ᵢ⁽ᵖ⁾(s,t) = Σₖ≤p ŵᵢₖ φ̂ₖ(s) ψ̂ₖ(t)`.
pub fn individual_predictor(
    decomp: &Decomposition,
    scores: &DMatrix<f64>,
    i: usize,
    p: usize,
    eval_s: &Grid,
    eval_t: &Grid,
) -> Result<MeanSurface> {
    decomp.check_p(p)?;
    if i >= scores.nrows() {
        return Err(FsvdError::IndexOutOfRange {
            index: i,
            len: scores.nrows(),
            what: "subjects",
        });
    }
    if scores.ncols() < p {
        return Err(FsvdError::RankExceeded {
            requested: p,
            available: scores.ncols(),
        });
    }
    let coefs: Vec<f64> = (0..p).map(|k| scores[(i, k)]).collect();
    let values = decomp.eval_expansion(&coefs, eval_s.points(), eval_t.points())?;
    MeanSurface::new(eval_s.clone(), eval_t.clone(), values)
}

/// How the φ and ψ spline spaces are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisSpec {
    /// One shared basis per axis; all components come from one eigenproblem.
    Fixed { s: SplineBasis, t: SplineBasis },
    /// Order-1 indicator bases at the grid points: the fit reduces to a
    /// weighted matrix SVD.
    Saturated,
    /// Greedy free-knot search per component. Budgets, when given, cap the
    /// knot count of component k at `budgets[k]`.
    FreeKnot {
        order: usize,
        search: KnotSearchConfig,
        phi_budgets: Option<Vec<usize>>,
        psi_budgets: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub p: usize,
    pub bases: BasisSpec,
}

impl FitOptions {
    pub fn free_knot(p: usize, order: usize, search: KnotSearchConfig) -> Self {
        Self {
            p,
            bases: BasisSpec::FreeKnot {
                order,
                search,
                phi_budgets: None,
                psi_budgets: None,
            },
        }
    }

    pub fn saturated(p: usize) -> Self {
        Self {
            p,
            bases: BasisSpec::Saturated,
        }
    }
}

fn fit_shared_axis(
    basis: &SplineBasis,
    grid: &Grid,
    kernel: &DMatrix<f64>,
    p: usize,
) -> Result<Vec<(SplineFunction, f64)>> {
    let w = grid.weights();
    let b = evaluate_basis(basis, grid)?;
    let gamma = gram_matrix(&b, &w)?;
    let omega = omega_matrix(&b, &w, kernel)?;
    let eig = sequential_eigenfunctions(&omega, &gamma, p)?;
    (0..p)
        .map(|k| {
            Ok((
                SplineFunction::new(basis.clone(), eig.coefficients.column(k).into_owned())?,
                eig.eigenvalues[k],
            ))
        })
        .collect()
}

fn fit_freeknot_axis(
    kernel: &DMatrix<f64>,
    grid: &Grid,
    p: usize,
    order: usize,
    search: &KnotSearchConfig,
    budgets: Option<&[usize]>,
) -> Result<Vec<(SplineFunction, f64)>> {
    let mut fitted: Vec<SplineFunction> = Vec::with_capacity(p);
    let mut out = Vec::with_capacity(p);
    for k in 0..p {
        let config = match budgets {
            Some(b) => search.with_max_knots(*b.get(k).ok_or_else(|| {
                FsvdError::InvalidConfig(format!("no knot budget for component {}", k + 1))
            })?),
            None => search.clone(),
        };
        let comp = fit_component_freeknot(kernel, grid, &fitted, &config, order)?;
        fitted.push(comp.function.clone());
        out.push((comp.function, comp.eigenvalue));
    }
    Ok(out)
}

/// Fit a `p`-component decomposition.
pub fn fit(data: &DataTensor, opts: &FitOptions) -> Result<Decomposition> {
    let mean = cross_sectional_mean(data)?;
    let v = data.s_grid.weights();
    let u = data.t_grid.weights();
    let k1 = kernel_k1(&mean, &u)?;
    let k2 = kernel_k2(&mean, &v)?;
    let p = opts.p;
    let (phis, psis) = match &opts.bases {
        BasisSpec::Fixed { s, t } => (
            fit_shared_axis(s, &data.s_grid, &k1, p)?,
            fit_shared_axis(t, &data.t_grid, &k2, p)?,
        ),
        BasisSpec::Saturated => (
            fit_shared_axis(&SplineBasis::saturated(&data.s_grid), &data.s_grid, &k1, p)?,
            fit_shared_axis(&SplineBasis::saturated(&data.t_grid), &data.t_grid, &k2, p)?,
        ),
        BasisSpec::FreeKnot {
            order,
            search,
            phi_budgets,
            psi_budgets,
        } => (
            fit_freeknot_axis(&k1, &data.s_grid, p, *order, search, phi_budgets.as_deref())?,
            fit_freeknot_axis(&k2, &data.t_grid, p, *order, search, psi_budgets.as_deref())?,
        ),
    };
    assemble(data, phis, psis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub best_p: usize,
    /// Held-out squared error summed over subjects, for `p = 1..=max_p`.
    pub errors: Vec<f64>,
}

/// Choose the order `p ≤ max_p` minimizing the held-out reconstruction error
/// `Σᵢ ‖Xᵢ − X̂ᵢ⁽ᵖ⁾‖²` over a seeded `folds`-fold split of the subjects.
/// The `p` in `opts` is ignored; each training fit uses `max_p` components
/// and every smaller order is read off as a prefix.
pub fn cross_validate_order(
    data: &DataTensor,
    max_p: usize,
    folds: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<CrossValidation> {
    if max_p == 0 {
        return Err(FsvdError::InvalidConfig("max_p must be at least 1".into()));
    }
    if folds < 2 {
        return Err(FsvdError::InvalidConfig("need at least 2 folds".into()));
    }
    if data.n() < folds {
        return Err(FsvdError::InvalidConfig(format!(
            "{} subjects cannot be split into {folds} folds",
            data.n()
        )));
    }
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let v = data.s_grid.weights();
    let u = data.t_grid.weights();
    let fit_opts = FitOptions {
        p: max_p,
        ..opts.clone()
    };
    let mut errors = vec![0.0; max_p];
    for fold in 0..folds {
        let held: Vec<usize> = order.iter().skip(fold).step_by(folds).copied().collect();
        let train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % folds != fold)
            .map(|(_, &i)| i)
            .collect();
        let decomp = fit(&data.subset(&train)?, &fit_opts)?;
        let held_data = data.subset(&held)?;
        let w = scores(&decomp, &held_data)?;
        let vals = decomp.component_values_on_grids()?;
        for (i, x) in held_data.surfaces().iter().enumerate() {
            let mut resid = x.clone();
            for (k, (phi, psi)) in vals.iter().enumerate() {
                let phi = DVector::from_column_slice(phi);
                let psi = DVector::from_column_slice(psi);
                resid -= phi * psi.transpose() * w[(i, k)];
                errors[k] += weighted_frobenius_sq(&resid, &v, &u);
            }
        }
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let best = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let tie = 1e-9 * worst;
    let best_p = errors.iter().position(|&e| e <= best + tie).expect("nonempty") + 1;
    Ok(CrossValidation { best_p, errors })
}
