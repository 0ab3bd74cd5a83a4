//! Observation grids and trapezoid-rule quadrature.
//!
//! Every integral in the estimator is realized as a weighted sum over grid
//! values, with the weights produced by [`trapezoid_weights`].

use crate::error::{FsvdError, Result};

/// A strictly increasing set of finite points; the implied interval is
/// `[first, last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(FsvdError::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(bad) = points.iter().find(|p| !p.is_finite()) {
            return Err(FsvdError::InvalidGrid(format!("non-finite point {bad}")));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(FsvdError::InvalidGrid(format!(
                "points must be strictly increasing ({} followed by {})",
                w[0], w[1]
            )));
        }
        Ok(Self { points })
    }

    /// `m` equispaced points covering `[a, b]`, endpoints included.
    pub fn equispaced(a: f64, b: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(FsvdError::InvalidGrid(format!(
                "need at least 2 points, got {m}"
            )));
        }
        if !(b > a) {
            return Err(FsvdError::InvalidGrid(format!("empty interval [{a}, {b}]")));
        }
        let step = (b - a) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|j| a + step * j as f64).collect();
        points[m - 1] = b;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.first() && x <= self.last()
    }

    /// Points strictly inside the interval.
    pub fn interior(&self) -> &[f64] {
        &self.points[1..self.points.len() - 1]
    }

    pub fn weights(&self) -> QuadWeights {
        trapezoid_weights(self)
    }
}

/// Trapezoid weights attached to a grid; they sum to the interval length.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadWeights {
    weights: Vec<f64>,
}

impl QuadWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn to_dvector(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_column_slice(&self.weights)
    }
}

/// Trapezoid-rule weights: half-intervals at the endpoints and
/// `(x[k+1] - x[k-1]) / 2` in the interior.
pub fn trapezoid_weights(grid: &Grid) -> QuadWeights {
    let x = grid.points();
    let r = x.len();
    let mut weights = Vec::with_capacity(r);
    weights.push((x[1] - x[0]) / 2.0);
    for k in 1..r - 1 {
        weights.push((x[k + 1] - x[k - 1]) / 2.0);
    }
    weights.push((x[r - 1] - x[r - 2]) / 2.0);
    QuadWeights { weights }
}

/// `Σ f_j g_j w_j`.
pub fn discrete_inner_product(f: &[f64], g: &[f64], w: &QuadWeights) -> Result<f64> {
    if f.len() != w.len() {
        return Err(FsvdError::DimensionMismatch {
            context: "inner product (first operand)",
            expected: w.len(),
            found: f.len(),
        });
    }
    if g.len() != w.len() {
        return Err(FsvdError::DimensionMismatch {
            context: "inner product (second operand)",
            expected: w.len(),
            found: g.len(),
        });
    }
    Ok(f.iter()
        .zip(g)
        .zip(w.as_slice())
        .map(|((a, b), c)| a * b * c)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn unit_interval_three_points() {
        let w = trapezoid_weights(&Grid::new(vec![0.0, 0.5, 1.0]).unwrap());
        assert_eq!(w.as_slice(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn two_point_rule() {
        let w = trapezoid_weights(&Grid::new(vec![2.0, 5.0]).unwrap());
        assert_eq!(w.as_slice(), &[1.5, 1.5]);
    }

    #[test]
    fn nonuniform_grid() {
        // (0.1-0)/2, (0.4-0)/2, (1-0.1)/2, (1-0.4)/2
        let w = trapezoid_weights(&Grid::new(vec![0.0, 0.1, 0.4, 1.0]).unwrap());
        for (got, want) in w.as_slice().iter().zip([0.05, 0.2, 0.45, 0.3]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(Grid::new(vec![1.0]), Err(FsvdError::InvalidGrid(_))));
        assert!(Grid::new(vec![]).is_err());
        assert!(Grid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(Grid::new(vec![0.0, f64::NAN]).is_err());
        assert!(Grid::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn inner_products() {
        let g = Grid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let w = g.weights();
        assert_eq!(discrete_inner_product(&[1.0; 3], &[1.0; 3], &w).unwrap(), 1.0);
        assert_eq!(discrete_inner_product(&[1.0; 3], &[0.0; 3], &w).unwrap(), 0.0);
        assert!(matches!(
            discrete_inner_product(&[1.0; 2], &[1.0; 3], &w),
            Err(FsvdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn squared_identity_on_five_points() {
        // weights 1/8,1/4,1/4,1/4,1/8; s^2 = 0,1/16,1/4,9/16,1 -> 11/32
        let g = Grid::equispaced(0.0, 1.0, 5).unwrap();
        let s = g.points().to_vec();
        let v = discrete_inner_product(&s, &s, &g.weights()).unwrap();
        assert_relative_eq!(v, 11.0 / 32.0, epsilon = 1e-15);
        // trapezoid error h^2/12 * (f'(1) - f'(0)) = (1/16)/12 * 2
        assert_relative_eq!(v - 1.0 / 3.0, 1.0 / 96.0, epsilon = 1e-15);
    }

    #[test]
    fn equispaced_weights_shape() {
        let g = Grid::equispaced(-1.0, 3.0, 9).unwrap();
        let w = g.weights();
        let h = 0.5;
        assert_relative_eq!(w.as_slice()[0], h / 2.0, epsilon = 1e-15);
        assert_relative_eq!(w.as_slice()[8], h / 2.0, epsilon = 1e-15);
        for &x in &w.as_slice()[1..8] {
            assert_relative_eq!(x, h, epsilon = 1e-14);
        }
    }

    fn sorted_grid() -> impl Strategy<Value = Vec<f64>> {
        (-50.0f64..50.0, prop::collection::vec(1e-3f64..5.0, 1..40)).prop_map(|(a, gaps)| {
            let mut pts = vec![a];
            for g in gaps {
                let last = *pts.last().unwrap();
                pts.push(last + g);
            }
            pts
        })
    }

    proptest! {
        #[test]
        fn weights_sum_to_length(pts in sorted_grid()) {
            let g = Grid::new(pts).unwrap();
            let w = g.weights();
            let len = g.last() - g.first();
            prop_assert!((w.total() - len).abs() <= 1e-12 * len);
            prop_assert!(w.as_slice().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn linear_functions_integrate_exactly(pts in sorted_grid(), c0 in -3.0f64..3.0, c1 in -3.0f64..3.0) {
            let g = Grid::new(pts).unwrap();
            let f: Vec<f64> = g.points().iter().map(|x| c0 + c1 * x).collect();
            let ones = vec![1.0; g.len()];
            let got = discrete_inner_product(&f, &ones, &g.weights()).unwrap();
            let (a, b) = (g.first(), g.last());
            let exact = c0 * (b - a) + c1 * (b * b - a * a) / 2.0;
            let scale = exact.abs().max(c0.abs() * (b - a)).max(c1.abs() * (b * b + a * a) / 2.0).max(1e-300);
            prop_assert!((got - exact).abs() <= 1e-12 * scale);
        }

        #[test]
        fn inner_product_symmetric_bilinear(
            f in prop::collection::vec(-5.0f64..5.0, 6),
            g in prop::collection::vec(-5.0f64..5.0, 6),
            h in prop::collection::vec(-5.0f64..5.0, 6),
            a in -2.0f64..2.0,
        ) {
            let grid = Grid::new(vec![0.0, 0.2, 0.3, 0.7, 0.8, 1.1]).unwrap();
            let w = grid.weights();
            let fg = discrete_inner_product(&f, &g, &w).unwrap();
            let gf = discrete_inner_product(&g, &f, &w).unwrap();
            prop_assert!((fg - gf).abs() < 1e-12);
            let mix: Vec<f64> = f.iter().zip(&h).map(|(x, y)| a * x + y).collect();
            let lhs = discrete_inner_product(&mix, &g, &w).unwrap();
            let rhs = a * fg + discrete_inner_product(&h, &g, &w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
