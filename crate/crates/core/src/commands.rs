//! The `fit`, `predict`, `simulate` and `scores` subcommands. Each takes a
//! [`RunConfig`] (file settings overlaid with flags), writes its artifacts
//! and returns a short human-readable report.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bspline::{SplineBasis, SplineFunction};
use crate::error::{FsvdError, Result};
use crate::freeknot::KnotSearchConfig;
use crate::fsvd::{
    cross_validate_order, fit, individual_predictor, scores, truncated_mean, ComponentPair, Decomposition,
    FitOptions, MeanSurface,
};
use crate::grid::Grid;
use crate::io::{create_dir, fmt_num, load_dataset, write_csv, write_text, Dataset, RunConfig, Transform};
use crate::sim::{run_study, MeanId, Protocol, SimulationConfig, SimulationResult};

pub const MODEL_FILE: &str = "model.json";

/// Points per panel in `plot_data/`.
pub const PLOT_POINTS: usize = 201;

/// Robust z-score above which a subject is flagged.
pub const OUTLIER_Z: f64 = 3.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineRecord {
    pub order: usize,
    pub lower: f64,
    pub upper: f64,
    pub knots: Vec<f64>,
    pub coefficients: Vec<f64>,
}

impl SplineRecord {
    fn from_function(f: &SplineFunction) -> Self {
        Self {
            order: f.basis.order(),
            lower: f.basis.lower(),
            upper: f.basis.upper(),
            knots: f.basis.interior_knots().to_vec(),
            coefficients: f.coefficients.iter().copied().collect(),
        }
    }

    fn to_function(&self) -> Result<SplineFunction> {
        let basis = SplineBasis::new(self.order, self.lower, self.upper, self.knots.clone())?;
        SplineFunction::new(basis, DVector::from_vec(self.coefficients.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub k: usize,
    pub root_eigenvalue: f64,
    pub phi_eigenvalue: f64,
    pub psi_eigenvalue: f64,
    pub psi_flipped: bool,
    pub phi: SplineRecord,
    pub psi: SplineRecord,
}

/// Everything `predict` and `scores` need from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub s_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub subjects: Vec<String>,
    pub components: Vec<ComponentRecord>,
    /// Row per subject.
    pub scores: Vec<Vec<f64>>,
    /// Held-out errors for `p = 1..`, when `p` was chosen by cross-validation.
    pub cv_errors: Option<Vec<f64>>,
}

impl ModelFile {
    pub fn from_decomposition(d: &Decomposition, subjects: &[String], cv_errors: Option<Vec<f64>>) -> Self {
        Self {
            s_grid: d.s_grid.points().to_vec(),
            t_grid: d.t_grid.points().to_vec(),
            subjects: subjects.to_vec(),
            components: d
                .components
                .iter()
                .enumerate()
                .map(|(i, c)| ComponentRecord {
                    k: i + 1,
                    root_eigenvalue: c.root_eigenvalue,
                    phi_eigenvalue: c.phi_eigenvalue,
                    psi_eigenvalue: c.psi_eigenvalue,
                    psi_flipped: c.psi_flipped,
                    phi: SplineRecord::from_function(&c.phi),
                    psi: SplineRecord::from_function(&c.psi),
                })
                .collect(),
            scores: d.scores.row_iter().map(|r| r.iter().copied().collect()).collect(),
            cv_errors,
        }
    }

    pub fn decomposition(&self) -> Result<Decomposition> {
        let components = self
            .components
            .iter()
            .map(|c| {
                Ok(ComponentPair {
                    phi: c.phi.to_function()?,
                    psi: c.psi.to_function()?,
                    root_eigenvalue: c.root_eigenvalue,
                    phi_eigenvalue: c.phi_eigenvalue,
                    psi_eigenvalue: c.psi_eigenvalue,
                    psi_flipped: c.psi_flipped,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = components.len();
        let n = self.scores.len();
        if self.scores.iter().any(|r| r.len() != p) || n != self.subjects.len() {
            return Err(FsvdError::Inconsistent("model scores do not match its components/subjects".into()));
        }
        Ok(Decomposition {
            components,
            scores: DMatrix::from_fn(n, p, |i, k| self.scores[i][k]),
            s_grid: Grid::new(self.s_grid.clone())?,
            t_grid: Grid::new(self.t_grid.clone())?,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                FsvdError::InvalidConfig(format!("no fit artifacts: {} is missing", path.display()))
            } else {
                FsvdError::io(&path, e)
            }
        })?;
        serde_json::from_str(&text).map_err(|e| FsvdError::Parse {
            path: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_input(config: &RunConfig) -> Result<Dataset> {
    let transform: Transform = config.parsed_or("transform", Transform::None)?;
    load_dataset(&config.path("input")?)?.apply(transform)
}

fn search_config(config: &RunConfig) -> Result<KnotSearchConfig> {
    let d = KnotSearchConfig::default();
    let search = KnotSearchConfig {
        candidates: None,
        max_knots: config.parsed_or("max_knots", d.max_knots)?,
        rel_improvement_tol: config.parsed_or("rel_improvement_tol", d.rel_improvement_tol)?,
        allow_repeats: config.parsed_or("allow_repeats", d.allow_repeats)?,
    };
    search.validate()?;
    Ok(search)
}

fn surface_rows(mean: &MeanSurface) -> Vec<[String; 3]> {
    let (s, t) = (mean.s_grid.points(), mean.t_grid.points());
    let mut rows = Vec::with_capacity(s.len() * t.len());
    for (j, sj) in s.iter().enumerate() {
        for (k, tk) in t.iter().enumerate() {
            rows.push([fmt_num(*sj), fmt_num(*tk), fmt_num(mean.values[(j, k)])]);
        }
    }
    rows
}

#[derive(Serialize)]
struct KnotListing {
    order: usize,
    phi: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
}

/// Fit a decomposition and write all artifacts into `out`.
pub fn cmd_fit(config: &RunConfig) -> Result<String> {
    let dataset = load_input(config)?;
    let out = config.path("out")?;
    let order: usize = config.parsed_or("order", 4)?;
    let search = search_config(config)?;
    let data = &dataset.data;
    let (p, cv_errors) = match config.get("p").unwrap_or("2") {
        "cv" => {
            let max_p: usize = config.parsed_or("max_p", 3)?;
            let folds: usize = config.parsed_or("folds", 5.min(data.n()))?;
            let seed: u64 = config.parsed_or("seed", 0)?;
            let cv = cross_validate_order(data, max_p, folds, seed, &FitOptions::free_knot(max_p, order, search.clone()))?;
            (cv.best_p, Some(cv.errors))
        }
        _ => (config.parsed_or("p", 2)?, None),
    };
    let decomp = fit(data, &FitOptions::free_knot(p, order, search))?;
    create_dir(&out)?;
    create_dir(&out.join("plot_data"))?;
    let grids = [("phi", &decomp.s_grid), ("psi", &decomp.t_grid)];
    let mut rows = Vec::new();
    for (k, c) in decomp.components.iter().enumerate() {
        for ((axis, grid), f) in grids.iter().zip([&c.phi, &c.psi]) {
            for (x, v) in grid.points().iter().zip(f.eval_points(grid.points())?) {
                rows.push([(k + 1).to_string(), axis.to_string(), fmt_num(*x), fmt_num(v)]);
            }
            let dense = Grid::equispaced(grid.first(), grid.last(), PLOT_POINTS)?;
            let panel: Vec<[String; 2]> = dense
                .points()
                .iter()
                .zip(f.eval_points(dense.points())?)
                .map(|(x, v)| [fmt_num(*x), fmt_num(v)])
                .collect();
            write_csv(&out.join("plot_data").join(format!("{axis}_{}.csv", k + 1)), &["x", "value"], panel)?;
        }
    }
    write_csv(&out.join("components.csv"), &["k", "axis", "x", "value"], rows)?;
    write_csv(
        &out.join("eigenvalues.csv"),
        &["k", "root_eigenvalue"],
        decomp
            .root_eigenvalues()
            .iter()
            .enumerate()
            .map(|(k, l)| [(k + 1).to_string(), fmt_num(*l)]),
    )?;
    let mut score_rows = Vec::new();
    for (i, id) in dataset.subjects.iter().enumerate() {
        for k in 0..p {
            score_rows.push([id.clone(), (k + 1).to_string(), fmt_num(decomp.scores[(i, k)])]);
        }
    }
    write_csv(&out.join("scores.csv"), &["subject", "k", "w"], score_rows)?;
    let mu = truncated_mean(&decomp, p, data.s_grid(), data.t_grid())?;
    write_csv(&out.join("mu_hat_p.csv"), &["s", "t", "value"], surface_rows(&mu))?;
    let knots = KnotListing {
        order,
        phi: decomp.components.iter().map(|c| c.phi.basis.interior_knots().to_vec()).collect(),
        psi: decomp.components.iter().map(|c| c.psi.basis.interior_knots().to_vec()).collect(),
    };
    write_text(&out.join("knots.json"), &to_json(&knots))?;
    let model = ModelFile::from_decomposition(&decomp, &dataset.subjects, cv_errors);
    write_text(&out.join(MODEL_FILE), &to_json(&model))?;
    let mut report = format!("fitted p={p} components to {} subjects on a {}x{} grid\n", data.n(), data.m(), data.r());
    for (k, l) in decomp.root_eigenvalues().iter().enumerate() {
        writeln!(report, "  root eigenvalue {}: {}", k + 1, fmt_num(*l)).unwrap();
    }
    if !decomp.non_monotone().is_empty() {
        writeln!(report, "  warning: root eigenvalues not monotone at {:?}", decomp.non_monotone()).unwrap();
    }
    Ok(report)
}

fn file_stem(i: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{:03}_{clean}", i + 1)
}

/// Per-subject reconstructions `X̂ᵢ⁽ᵖ⁾` from a fitted model. With `input`
/// set, scores are recomputed for that dataset (which must share the
/// model's grids); otherwise the fitted subjects' scores are used.
pub fn cmd_predict(config: &RunConfig) -> Result<String> {
    let model = ModelFile::load(&config.path("model")?)?;
    let mut decomp = model.decomposition()?;
    let out = config.path("out")?;
    let p: usize = config.parsed_or("p", decomp.p())?;
    if p > decomp.p() {
        return Err(FsvdError::InvalidConfig(format!("model has {} components, asked for p={p}", decomp.p())));
    }
    let subjects = match config.get("input") {
        Some(_) => {
            let dataset = load_input(config)?;
            decomp.scores = scores(&decomp, &dataset.data)?;
            dataset.subjects
        }
        None => model.subjects.clone(),
    };
    create_dir(&out)?;
    let (s, t) = (decomp.s_grid.clone(), decomp.t_grid.clone());
    let mut index = Vec::with_capacity(subjects.len());
    for (i, id) in subjects.iter().enumerate() {
        let surface = individual_predictor(&decomp, &decomp.scores, i, p, &s, &t)?;
        let name = format!("{}.csv", file_stem(i, id));
        write_csv(&out.join(&name), &["s", "t", "value"], surface_rows(&surface))?;
        index.push([id.clone(), name]);
    }
    write_csv(&out.join("subjects.csv"), &["subject", "file"], index)?;
    Ok(format!("wrote {} subject surfaces (p={p}) to {}\n", subjects.len(), out.display()))
}

/// Median and median absolute deviation.
fn median_mad(values: &[f64]) -> (f64, f64) {
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let h = v.len() / 2;
        if v.len() % 2 == 1 {
            v[h]
        } else {
            0.5 * (v[h - 1] + v[h])
        }
    }
    let med = median(&mut values.to_vec());
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    (med, median(&mut dev))
}

/// `0.6745 (x − median) / MAD`; zero spread gives 0 for values at the
/// median and ±∞ otherwise.
pub fn robust_z(values: &[f64]) -> Vec<f64> {
    let (med, mad) = median_mad(values);
    values
        .iter()
        .map(|x| {
            let d = x - med;
            if d == 0.0 {
                0.0
            } else if mad == 0.0 {
                d.signum() * f64::INFINITY
            } else {
                0.6745 * d / mad
            }
        })
        .collect()
}

/// Subject score tuples for scatter plots, with robust-z outlier flags.
/// The 3.5 cut-off is a heuristic default, not a test.
pub fn cmd_scores(config: &RunConfig) -> Result<String> {
    let model = ModelFile::load(&config.path("model")?)?;
    let out = config.path("out")?;
    let p = model.components.len();
    if p < 2 {
        return Err(FsvdError::InvalidConfig(format!("score plots need p >= 2, model has p={p}")));
    }
    let n = model.scores.len();
    let z: Vec<Vec<f64>> = (0..p)
        .map(|k| robust_z(&model.scores.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    let mut header: Vec<String> = vec!["subject".into()];
    header.extend((1..=p).map(|k| format!("w{k}")));
    header.extend((1..=p).map(|k| format!("z{k}")));
    header.push("outlier".into());
    let mut flagged = Vec::new();
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let mut row = vec![model.subjects[i].clone()];
            row.extend(model.scores[i].iter().map(|w| fmt_num(*w)));
            row.extend(z.iter().map(|zk| fmt_num(zk[i])));
            let out = z.iter().any(|zk| zk[i].abs() > OUTLIER_Z);
            if out {
                flagged.push(model.subjects[i].clone());
            }
            row.push(out.to_string());
            row
        })
        .collect();
    create_dir(&out)?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("scores_scatter.csv"), &header, rows)?;
    Ok(format!(
        "wrote scores for {n} subjects; flagged: {}\n",
        if flagged.is_empty() { "none".to_string() } else { flagged.join(", ") }
    ))
}

/// The twelve designs of the standard simulation study.
pub fn full_design() -> Vec<(MeanId, f64, usize, usize)> {
    let mut cells = Vec::new();
    for (mean, sigma) in [(MeanId::Mu1, 1.0), (MeanId::Mu1, 2.0), (MeanId::Mu2, 2.0)] {
        for m in [20, 30] {
            for n in [10, 50] {
                cells.push((mean, sigma, m, n));
            }
        }
    }
    cells
}

fn simulation_configs(config: &RunConfig) -> Result<Vec<SimulationConfig>> {
    let design_keys = ["mean", "sigma", "m", "n"];
    let given = design_keys.iter().filter(|k| config.get(k).is_some()).count();
    let cells = match given {
        0 => full_design(),
        4 => vec![(
            config.parsed::<MeanId>("mean")?.expect("present"),
            config.parsed::<f64>("sigma")?.expect("present"),
            config.parsed::<usize>("m")?.expect("present"),
            config.parsed::<usize>("n")?.expect("present"),
        )],
        _ => {
            return Err(FsvdError::InvalidConfig(
                "give all of mean, sigma, m, n for one design, or none for the full table".into(),
            ))
        }
    };
    let protocols = match config.get("protocols") {
        Some(list) => list.split(',').map(str::parse).collect::<Result<Vec<Protocol>>>()?,
        None => Protocol::ALL.to_vec(),
    };
    cells
        .into_iter()
        .map(|(mean, sigma, m, n)| {
            let mut c = SimulationConfig::new(mean, sigma, m, n);
            c.replicates = config.parsed_or("replicates", c.replicates)?;
            c.seed = config.parsed_or("seed", c.seed)?;
            c.order = config.parsed_or("order", c.order)?;
            c.search.max_knots = config.parsed_or("max_knots", c.search.max_knots)?;
            c.search.rel_improvement_tol = config.parsed_or("rel_improvement_tol", c.search.rel_improvement_tol)?;
            c.protocols = protocols.clone();
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Run one design (or the full table) and write `table1.csv` and
/// `raw_errors.csv`.
pub fn cmd_simulate(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let configs = simulation_configs(config)?;
    let results: Vec<SimulationResult> = configs.iter().map(run_study).collect::<Result<_>>()?;
    create_dir(&out)?;
    let mut table = Vec::new();
    let mut raw = Vec::new();
    let mut report = String::new();
    for r in &results {
        let c = &r.config;
        let design = [c.mean.to_string(), c.sigma.to_string(), c.m.to_string(), c.n.to_string()];
        write!(report, "{} sigma={} m={} n={}:", c.mean, c.sigma, c.m, c.n).unwrap();
        for pr in &r.protocols {
            let mut row = design.to_vec();
            row.extend([pr.protocol.to_string(), fmt_num(pr.root_mise()), c.replicates.to_string()]);
            table.push(row);
            for (rep, e) in pr.errors.iter().enumerate() {
                let mut row = design.to_vec();
                row.extend([
                    pr.protocol.to_string(),
                    rep.to_string(),
                    e.map(fmt_num).unwrap_or_else(|| "NA".into()),
                ]);
                raw.push(row);
            }
            write!(report, " {} {:.3}", pr.protocol, pr.root_mise()).unwrap();
            if pr.failures() > 0 {
                write!(report, " ({} failed)", pr.failures()).unwrap();
            }
        }
        report.push('\n');
    }
    write_csv(
        &out.join("table1.csv"),
        &["mean", "sigma", "m", "n", "protocol", "root_mise", "replicates"],
        table,
    )?;
    write_csv(
        &out.join("raw_errors.csv"),
        &["mean", "sigma", "m", "n", "protocol", "replicate", "root_ise"],
        raw,
    )?;
    Ok(report)
}
