//! Clamped B-spline bases on a closed interval.
//!
//! Evaluation follows the Cox–de Boor triangular scheme with
//! right-continuous spans, closed at the right boundary. Gram matrices for
//! the estimator are built from grid values and quadrature weights; exact
//! (Gauss–Legendre per knot span) integrals are available for penalties.

use nalgebra::{DMatrix, DVector};

use crate::error::{FsvdError, Result};
use crate::grid::{Grid, QuadWeights};

pub use crate::linalg::{symmetric_inverse_sqrt, InverseSqrt};

/// Basis values stored as a q×m matrix with `B[(i, j)] = βᵢ(xⱼ)`.
pub type BasisMatrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    order: usize,
    lower: f64,
    upper: f64,
    interior: Vec<f64>,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Clamped basis of the given order (4 = cubic). Interior knots may repeat
    /// up to `order` times and must lie strictly inside `(lower, upper)`.
    pub fn new(order: usize, lower: f64, upper: f64, interior: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(FsvdError::InvalidBasis("order must be at least 1".into()));
        }
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(FsvdError::InvalidBasis(format!(
                "invalid interval [{lower}, {upper}]"
            )));
        }
        let mut interior = interior;
        if let Some(bad) = interior.iter().find(|&&x| !(x > lower && x < upper)) {
            return Err(FsvdError::InvalidBasis(format!(
                "interior knot {bad} not strictly inside ({lower}, {upper})"
            )));
        }
        interior.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
        let mut run = 1;
        for w in interior.windows(2) {
            run = if w[0] == w[1] { run + 1 } else { 1 };
            if run > order {
                return Err(FsvdError::InvalidBasis(format!(
                    "knot {} repeated more than {order} times",
                    w[0]
                )));
            }
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * order);
        knots.extend(std::iter::repeat_n(lower, order));
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(upper, order));
        Ok(Self {
            order,
            lower,
            upper,
            interior,
            knots,
        })
    }

    /// Order-1 basis with one indicator per grid point, so that the basis
    /// matrix on `grid` is the identity.
    pub fn saturated(grid: &Grid) -> Self {
        let x = grid.points();
        let mids = x.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self::new(1, grid.first(), grid.last(), mids).expect("midpoints are interior")
    }

    /// Basis with a simple knot at every interior grid point.
    pub fn knots_at_grid(order: usize, grid: &Grid) -> Result<Self> {
        Self::new(order, grid.first(), grid.last(), grid.interior().to_vec())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    /// Full clamped knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.order + self.interior.len()
    }

    pub fn multiplicity(&self, x: f64) -> usize {
        self.interior.iter().filter(|&&k| k == x).count()
    }

    /// A copy with one more interior knot at `x`.
    pub fn with_knot(&self, x: f64) -> Result<Self> {
        let mut interior = self.interior.clone();
        interior.push(x);
        Self::new(self.order, self.lower, self.upper, interior)
    }

    fn check_range(&self, x: f64) -> Result<()> {
        if x >= self.lower && x <= self.upper {
            Ok(())
        } else {
            Err(FsvdError::OutOfRange {
                value: x,
                lower: self.lower,
                upper: self.upper,
            })
        }
    }

    /// Index `μ` of the knot span `[t_μ, t_{μ+1})` holding `x`.
    fn span(&self, x: f64) -> usize {
        let n = self.dim();
        let after = self.knots.partition_point(|&t| t <= x);
        after.saturating_sub(1).clamp(self.order - 1, n - 1)
    }

    /// Values and the first `nderiv` derivatives of the `order` basis
    /// functions that are nonzero at `x`. Returns the index of the first
    /// such function and a table `ders[d][j]`.
    fn nonzero_derivatives(&self, x: f64, nderiv: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.order - 1;
        let i = self.span(x);
        let u = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[i + 1 - j];
            right[j] = u[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nderiv + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let top = nderiv.min(p);
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=top {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().take(top + 1).skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        (i + 1 - self.order, ders)
    }

    /// All `q` basis values at `x`.
    pub fn eval_point(&self, x: f64) -> Result<DVector<f64>> {
        self.eval_derivative_point(x, 0)
    }

    /// All `q` values of the `deriv`-th derivative at `x` (zero beyond the
    /// polynomial degree).
    pub fn eval_derivative_point(&self, x: f64, deriv: usize) -> Result<DVector<f64>> {
        self.check_range(x)?;
        let mut out = DVector::zeros(self.dim());
        if deriv < self.order {
            let (first, ders) = self.nonzero_derivatives(x, deriv);
            for (j, v) in ders[deriv].iter().enumerate() {
                out[first + j] = *v;
            }
        }
        Ok(out)
    }

    /// Basis matrix over arbitrary points in range.
    pub fn evaluate_points(&self, points: &[f64]) -> Result<BasisMatrix> {
        let mut b = DMatrix::zeros(self.dim(), points.len());
        for (col, &x) in points.iter().enumerate() {
            self.check_range(x)?;
            let (first, ders) = self.nonzero_derivatives(x, 0);
            for (j, v) in ders[0].iter().enumerate() {
                b[(first + j, col)] = *v;
            }
        }
        Ok(b)
    }

    /// Distinct knot values delimiting the nonempty spans.
    fn breakpoints(&self) -> Vec<f64> {
        let mut bp = vec![self.lower];
        for &k in &self.interior {
            if k > *bp.last().expect("nonempty") {
                bp.push(k);
            }
        }
        bp.push(self.upper);
        bp
    }

    /// `∫ βᵢ⁽ᵈ⁾ βⱼ⁽ᵈ⁾` over the whole interval, integrated exactly with
    /// Gauss–Legendre rules on each knot span.
    pub fn derivative_gram(&self, deriv: usize) -> DMatrix<f64> {
        let q = self.dim();
        let mut gram = DMatrix::zeros(q, q);
        if deriv >= self.order {
            return gram;
        }
        let (nodes, weights) = gauss_legendre(self.order);
        let k = self.order;
        for span in self.breakpoints().windows(2) {
            let (a, b) = (span[0], span[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (z, w) in nodes.iter().zip(&weights) {
                let x = mid + half * z;
                let (first, ders) = self.nonzero_derivatives(x, deriv);
                let vals = &ders[deriv];
                for r in 0..k {
                    for c in 0..k {
                        gram[(first + r, first + c)] += half * w * vals[r] * vals[c];
                    }
                }
            }
        }
        gram
    }

    /// Exact `L²` Gram matrix `∫ βᵢ βⱼ`.
    pub fn exact_gram(&self) -> DMatrix<f64> {
        self.derivative_gram(0)
    }
}

/// Basis evaluation on a grid: `B[(i, j)] = βᵢ(sⱼ)`.
pub fn evaluate_basis(basis: &SplineBasis, grid: &Grid) -> Result<BasisMatrix> {
    basis.evaluate_points(grid.points())
}

/// `Γ = B W Bᵀ`, the quadrature Gram matrix.
pub fn gram_matrix(b: &BasisMatrix, w: &QuadWeights) -> Result<DMatrix<f64>> {
    if b.ncols() != w.len() {
        return Err(FsvdError::DimensionMismatch {
            context: "gram matrix (grid points)",
            expected: w.len(),
            found: b.ncols(),
        });
    }
    let mut scaled = b.clone();
    for (mut col, &wj) in scaled.column_iter_mut().zip(w.as_slice()) {
        col *= wj;
    }
    Ok(scaled * b.transpose())
}

/// `P_ij = ∫ βᵢ'' βⱼ''` for bases of order at least 3.
pub fn second_derivative_penalty(basis: &SplineBasis) -> Result<DMatrix<f64>> {
    if basis.order() < 3 {
        return Err(FsvdError::InvalidBasis(format!(
            "second-derivative penalty needs order >= 3, got {}",
            basis.order()
        )));
    }
    Ok(basis.derivative_gram(2))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// A spline `Σ cᵢ βᵢ` on a fixed basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineFunction {
    pub basis: SplineBasis,
    pub coefficients: DVector<f64>,
}

impl SplineFunction {
    pub fn new(basis: SplineBasis, coefficients: DVector<f64>) -> Result<Self> {
        if coefficients.len() != basis.dim() {
            return Err(FsvdError::DimensionMismatch {
                context: "spline coefficients",
                expected: basis.dim(),
                found: coefficients.len(),
            });
        }
        Ok(Self {
            basis,
            coefficients,
        })
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        Ok(self.basis.eval_point(x)?.dot(&self.coefficients))
    }

    pub fn eval_points(&self, points: &[f64]) -> Result<Vec<f64>> {
        let b = self.basis.evaluate_points(points)?;
        Ok((b.transpose() * &self.coefficients).as_slice().to_vec())
    }

    pub fn negated(&self) -> Self {
        Self {
            basis: self.basis.clone(),
            coefficients: -&self.coefficients,
        }
    }
}
