//! Monte Carlo study: mean-plus-noise surfaces from two known means, three
//! estimators of the mean, and root integrated squared errors.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bspline::SplineFunction;
use crate::error::{FsvdError, Result};
use crate::freeknot::{fixed_knot_protocol, select_num_knots_oracle, ComponentProblem, KnotSearchConfig};
use crate::fsvd::{
    assemble, cross_sectional_mean, fit, kernel_k1, kernel_k2, truncated_mean, weighted_frobenius_sq,
    BasisSpec, DataTensor, Decomposition, FitOptions, MeanSurface,
};
use crate::grid::Grid;
use crate::tps::{oracle_with_solver, TpsSolver};

/// Eigenvalues `λₖ` of the simulated means.
pub const LAMBDAS: [f64; 3] = [1.0, 0.5, 1.0 / 32.0];

/// Points per axis of the evaluation grid used for integrated errors.
pub const EVAL_POINTS: usize = 101;

/// Knot-search stopping tolerance used by the study protocols. Tighter than
/// the library default: at 1e-3 the greedy path often stops before the
/// second eigenfunction has enough knots, starving the oracle protocol.
pub const SIM_IMPROVEMENT_TOL: f64 = 1e-4;

/// Share of failed replicates above which a study is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeanId {
    /// Two separable layers.
    Mu1,
    /// Three separable layers; the third is small.
    Mu2,
}

impl MeanId {
    pub fn components(self) -> usize {
        match self {
            MeanId::Mu1 => 2,
            MeanId::Mu2 => 3,
        }
    }
}

impl fmt::Display for MeanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanId::Mu1 => "mu1",
            MeanId::Mu2 => "mu2",
        })
    }
}

impl FromStr for MeanId {
    type Err = FsvdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mu1" | "1" | "μ1" | "μ₁" => Ok(MeanId::Mu1),
            "mu2" | "2" | "μ2" | "μ₂" => Ok(MeanId::Mu2),
            other => Err(FsvdError::InvalidConfig(format!("unknown mean '{other}' (expected mu1 or mu2)"))),
        }
    }
}

/// `φₖ(s) = √2 sin(2kπs)`, `k ≥ 1`.
pub fn true_phi(k: usize, s: f64) -> f64 {
    SQRT_2 * (2.0 * k as f64 * PI * s).sin()
}

/// `ψₖ(t) = √2 cos(2kπt)`, `k ≥ 1`.
pub fn true_psi(k: usize, t: f64) -> f64 {
    SQRT_2 * (2.0 * k as f64 * PI * t).cos()
}

fn mean_value(id: MeanId, s: f64, t: f64) -> f64 {
    (1..=id.components())
        .map(|k| LAMBDAS[k - 1].sqrt() * true_phi(k, s) * true_psi(k, t))
        .sum()
}

/// The simulated mean at `(s, t) ∈ [0,1]²`.
pub fn true_mean(id: MeanId, s: f64, t: f64) -> Result<f64> {
    for x in [s, t] {
        if !(0.0..=1.0).contains(&x) {
            return Err(FsvdError::OutOfRange {
                value: x,
                lower: 0.0,
                upper: 1.0,
            });
        }
    }
    Ok(mean_value(id, s, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    /// Tensor-product penalized spline with the error-minimizing smoothing value.
    Tps,
    /// Two-component FSVD, greedy knots under fixed budgets.
    SvFixed,
    /// Two-component FSVD, knot counts chosen against the true eigenfunctions.
    SvOracle,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Tps, Protocol::SvFixed, Protocol::SvOracle];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Tps => "TPS",
            Protocol::SvFixed => "SVf",
            Protocol::SvOracle => "SVo",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Protocol {
    type Err = FsvdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tps" => Ok(Protocol::Tps),
            "svf" => Ok(Protocol::SvFixed),
            "svo" => Ok(Protocol::SvOracle),
            other => Err(FsvdError::InvalidConfig(format!(
                "unknown protocol '{other}' (expected TPS, SVf or SVo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub mean: MeanId,
    pub sigma: f64,
    /// Grid size on both axes.
    pub m: usize,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub protocols: Vec<Protocol>,
    /// Components fitted by the FSVD protocols.
    pub p: usize,
    pub order: usize,
    pub search: KnotSearchConfig,
}

impl SimulationConfig {
    pub fn new(mean: MeanId, sigma: f64, m: usize, n: usize) -> Self {
        Self {
            mean,
            sigma,
            m,
            n,
            replicates: 200,
            seed: 20_240_601,
            protocols: Protocol::ALL.to_vec(),
            p: 2,
            order: 4,
            search: KnotSearchConfig {
                rel_improvement_tol: SIM_IMPROVEMENT_TOL,
                ..KnotSearchConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(FsvdError::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.m < 4 {
            return Err(FsvdError::InvalidConfig(format!("m must be at least 4, got {}", self.m)));
        }
        if self.n < 2 {
            return Err(FsvdError::InvalidConfig(format!("n must be at least 2, got {}", self.n)));
        }
        if self.replicates == 0 {
            return Err(FsvdError::InvalidConfig("replicates must be at least 1".into()));
        }
        if self.protocols.is_empty() {
            return Err(FsvdError::InvalidConfig("no protocols selected".into()));
        }
        if self.p == 0 || self.p > fixed_knot_protocol().phi.len() {
            return Err(FsvdError::InvalidConfig(format!(
                "p must be 1 or 2 for the simulation protocols, got {}",
                self.p
            )));
        }
        self.search.validate()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::equispaced(0.0, 1.0, self.m)
    }
}

/// Seed of replicate `rep`, derived from the study seed with a splitmix64
/// step so that every protocol sees the same data within a replicate.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    let mut z = seed ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `xᵢⱼₖ = μ(sⱼ, tₖ) + εᵢⱼₖ` with independent `N(0, σ²)` errors.
pub fn generate_dataset(config: &SimulationConfig, seed: u64) -> Result<DataTensor> {
    config.validate()?;
    let grid = config.grid()?;
    let pts = grid.points();
    let truth = DMatrix::from_fn(config.m, config.m, |j, k| mean_value(config.mean, pts[j], pts[k]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surfaces = (0..config.n)
        .map(|_| {
            let mut x = truth.clone();
            for j in 0..config.m {
                for k in 0..config.m {
                    let e: f64 = rng.sample(StandardNormal);
                    x[(j, k)] += config.sigma * e;
                }
            }
            x
        })
        .collect();
    DataTensor::new(grid.clone(), grid, surfaces)
}

/// `sqrt(∬(μ̂ − μ)²)` by the trapezoid rule on the grid of `estimate`.
pub fn root_ise<F>(estimate: &MeanSurface, truth: F) -> f64
where
    F: Fn(f64, f64) -> f64,
{
    let (s, t) = (estimate.s_grid.points(), estimate.t_grid.points());
    let diff = DMatrix::from_fn(s.len(), t.len(), |j, k| estimate.values[(j, k)] - truth(s[j], t[k]));
    weighted_frobenius_sq(&diff, &estimate.s_grid.weights(), &estimate.t_grid.weights()).sqrt()
}

pub fn eval_grid() -> Grid {
    Grid::equispaced(0.0, 1.0, EVAL_POINTS).expect("fixed evaluation grid")
}

/// Fixed-budget FSVD fit.
pub fn fit_svf(data: &DataTensor, config: &SimulationConfig) -> Result<Decomposition> {
    let schedule = fixed_knot_protocol();
    let opts = FitOptions {
        p: config.p,
        bases: BasisSpec::FreeKnot {
            order: config.order,
            search: config.search.clone(),
            phi_budgets: Some(schedule.phi.to_vec()),
            psi_budgets: Some(schedule.psi.to_vec()),
        },
    };
    fit(data, &opts)
}

fn oracle_axis<F>(
    kernel: &DMatrix<f64>,
    grid: &Grid,
    config: &SimulationConfig,
    truth: F,
) -> Result<Vec<(SplineFunction, f64)>>
where
    F: Fn(usize, f64) -> f64,
{
    let mut fitted: Vec<SplineFunction> = Vec::with_capacity(config.p);
    let mut out = Vec::with_capacity(config.p);
    for k in 1..=config.p {
        let problem = ComponentProblem::new(kernel, grid, &fitted)?;
        let choice = select_num_knots_oracle(&problem, |x| truth(k, x), &config.search, config.order)?;
        fitted.push(choice.component.function.clone());
        out.push((choice.component.function, choice.component.eigenvalue));
    }
    Ok(out)
}

/// FSVD fit whose per-component knot counts minimize the eigenfunction error
/// against the true `φₖ`, `ψₖ`.
pub fn fit_svo(data: &DataTensor, config: &SimulationConfig) -> Result<Decomposition> {
    let mean = cross_sectional_mean(data)?;
    let k1 = kernel_k1(&mean, &data.t_grid().weights())?;
    let k2 = kernel_k2(&mean, &data.s_grid().weights())?;
    let phis = oracle_axis(&k1, data.s_grid(), config, true_phi)?;
    let psis = oracle_axis(&k2, data.t_grid(), config, true_psi)?;
    assemble(data, phis, psis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    /// Root-ISE per replicate, `None` where the fit failed.
    pub errors: Vec<Option<f64>>,
}

impl ProtocolResult {
    pub fn successes(&self) -> Vec<f64> {
        self.errors.iter().flatten().copied().collect()
    }

    pub fn failures(&self) -> usize {
        self.errors.iter().filter(|e| e.is_none()).count()
    }

    /// `sqrt(mean of squared errors)` over successful replicates.
    pub fn root_mise(&self) -> f64 {
        let ok = self.successes();
        if ok.is_empty() {
            return f64::NAN;
        }
        (ok.iter().map(|e| e * e).sum::<f64>() / ok.len() as f64).sqrt()
    }

    pub fn median(&self) -> f64 {
        let mut ok = self.successes();
        if ok.is_empty() {
            return f64::NAN;
        }
        ok.sort_by(f64::total_cmp);
        let h = ok.len() / 2;
        if ok.len() % 2 == 1 {
            ok[h]
        } else {
            0.5 * (ok[h - 1] + ok[h])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub config: SimulationConfig,
    pub protocols: Vec<ProtocolResult>,
}

impl SimulationResult {
    pub fn protocol(&self, p: Protocol) -> Option<&ProtocolResult> {
        self.protocols.iter().find(|r| r.protocol == p)
    }
}

/// Errors of every requested protocol on one replicate.
pub fn run_replicate(
    config: &SimulationConfig,
    rep: usize,
    solver: Option<&TpsSolver>,
) -> Result<Vec<Result<f64>>> {
    let data = generate_dataset(config, replicate_seed(config.seed, rep))?;
    let eval = eval_grid();
    let truth = |s: f64, t: f64| mean_value(config.mean, s, t);
    let out = config
        .protocols
        .iter()
        .map(|p| match p {
            Protocol::Tps => {
                let mean = cross_sectional_mean(&data)?;
                let owned;
                let solver = match solver {
                    Some(s) => s,
                    None => {
                        owned = TpsSolver::new(&mean.s_grid, &mean.t_grid)?;
                        &owned
                    }
                };
                Ok(oracle_with_solver(solver, &mean, &truth, &eval, &eval)?.error)
            }
            Protocol::SvFixed => {
                let d = fit_svf(&data, config)?;
                Ok(root_ise(&truncated_mean(&d, config.p, &eval, &eval)?, truth))
            }
            Protocol::SvOracle => {
                let d = fit_svo(&data, config)?;
                Ok(root_ise(&truncated_mean(&d, config.p, &eval, &eval)?, truth))
            }
        })
        .collect();
    Ok(out)
}

/// Run all replicates (in parallel) and collect per-protocol errors.
/// Individual failures are recorded; more than 5% failures for any protocol
/// is an error.
pub fn run_study(config: &SimulationConfig) -> Result<SimulationResult> {
    config.validate()?;
    let solver = if config.protocols.contains(&Protocol::Tps) {
        let g = config.grid()?;
        Some(TpsSolver::new(&g, &g)?)
    } else {
        None
    };
    let per_rep: Vec<Vec<Result<f64>>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(config, rep, solver.as_ref()))
        .collect::<Result<_>>()?;
    let protocols: Vec<ProtocolResult> = config
        .protocols
        .iter()
        .enumerate()
        .map(|(i, &protocol)| ProtocolResult {
            protocol,
            errors: per_rep.iter().map(|r| r[i].as_ref().ok().copied()).collect(),
        })
        .collect();
    for r in &protocols {
        let rate = r.failures() as f64 / config.replicates as f64;
        if rate > MAX_FAILURE_RATE {
            let first = per_rep
                .iter()
                .find_map(|row| {
                    let i = config.protocols.iter().position(|&p| p == r.protocol)?;
                    row[i].as_ref().err().map(|e| e.to_string())
                })
                .unwrap_or_default();
            return Err(FsvdError::Simulation(format!(
                "{} failed on {} of {} replicates (first error: {first})",
                r.protocol,
                r.failures(),
                config.replicates
            )));
        }
    }
    Ok(SimulationResult {
        config: config.clone(),
        protocols,
    })
}
