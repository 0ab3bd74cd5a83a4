//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsvd::bspline::SplineBasis;
use fsvd::commands::{cmd_fit, cmd_predict, cmd_scores, cmd_simulate};
use fsvd::freeknot::KnotSearchConfig;
use fsvd::fsvd::{
    cross_sectional_mean, fit, kernel_k1, omega_matrix, truncated_mean, weighted_frobenius_sq, DataTensor,
    FitOptions, MeanSurface,
};
use fsvd::grid::{trapezoid_weights, Grid};
use fsvd::io::RunConfig;
use fsvd::sim::{generate_dataset, replicate_seed, run_study, true_mean, MeanId, Protocol, SimulationConfig};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id}] {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

struct Cell {
    mean: MeanId,
    sigma: f64,
    m: usize,
    n: usize,
    target: [f64; 3],
}

fn run_cell(c: &Cell) -> [f64; 3] {
    let config = SimulationConfig::new(c.mean, c.sigma, c.m, c.n);
    let res = run_study(&config).expect("study runs");
    let get = |p| res.protocol(p).unwrap().root_mise();
    [get(Protocol::Tps), get(Protocol::SvFixed), get(Protocol::SvOracle)]
}

fn fmt_cell(c: &Cell, got: &[f64; 3]) -> String {
    format!(
        "{} sigma={} m={} n={}: TPS {:.3} (target {:.3}) SVf {:.3} ({:.3}) SVo {:.3} ({:.3})",
        c.mean, c.sigma, c.m, c.n, got[0], c.target[0], got[1], c.target[1], got[2], c.target[2]
    )
}

fn table_rows(r: &mut Report) {
    let mu1 = [
        Cell { mean: MeanId::Mu1, sigma: 1.0, m: 20, n: 10, target: [0.159, 0.111, 0.097] },
        Cell { mean: MeanId::Mu1, sigma: 1.0, m: 30, n: 50, target: [0.063, 0.070, 0.034] },
        Cell { mean: MeanId::Mu1, sigma: 2.0, m: 20, n: 50, target: [0.147, 0.103, 0.089] },
    ];
    for (i, c) in mu1.iter().enumerate() {
        let t0 = Instant::now();
        let got = run_cell(c);
        let cells_ok = (0..3).all(|j| within(got[j], c.target[j], 0.20));
        let order_ok = if c.m == 30 && c.n == 50 {
            got[2] < got[0] && got[1] > got[2]
        } else {
            got[2] < got[1] && got[1] < got[0]
        };
        r.line(
            &format!("1{}", ['a', 'b', 'c'][i]),
            cells_ok && order_ok,
            format!(
                "{} | ±20% {} | ordering {} [{:.0}s]",
                fmt_cell(c, &got),
                if cells_ok { "ok" } else { "violated" },
                if order_ok { "ok" } else { "violated" },
                t0.elapsed().as_secs_f64()
            ),
        );
    }
    let c = Cell { mean: MeanId::Mu2, sigma: 2.0, m: 30, n: 50, target: [0.110, 0.196, 0.187] };
    let got = run_cell(&c);
    let cells_ok = (0..3).all(|j| within(got[j], c.target[j], 0.25));
    let order_ok = got[0] < got[1] && got[0] < got[2];
    r.line(
        "2",
        cells_ok && order_ok,
        format!(
            "{} | ±25% {} | TPS below both FSVD protocols {}",
            fmt_cell(&c, &got),
            if cells_ok { "ok" } else { "violated" },
            if order_ok { "ok" } else { "violated" }
        ),
    );
}

fn random_grid(rng: &mut ChaCha8Rng, len: usize) -> Grid {
    let mut pts: Vec<f64> = Vec::with_capacity(len);
    let mut x = rng.random_range(-1.0..1.0);
    for _ in 0..len {
        pts.push(x);
        x += rng.random_range(0.05..0.5);
    }
    Grid::new(pts).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng) -> DataTensor {
    let n = rng.random_range(1..=5);
    let m = rng.random_range(2..=12);
    let r = rng.random_range(2..=12);
    let (s, t) = (random_grid(rng, m), random_grid(rng, r));
    let surfaces = (0..n).map(|_| DMatrix::from_fn(m, r, |_, _| rng.random_range(-2.0..2.0))).collect();
    DataTensor::new(s, t, surfaces).unwrap()
}

fn sqrt_weights(g: &Grid) -> DVector<f64> {
    trapezoid_weights(g).to_dvector().map(f64::sqrt)
}

fn matrix_svd_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst_sv, mut worst_recon) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let data = random_tensor(&mut rng);
        let mean = cross_sectional_mean(&data).unwrap();
        let (vh, uh) = (sqrt_weights(data.s_grid()), sqrt_weights(data.t_grid()));
        let weighted = DMatrix::from_fn(data.m(), data.r(), |j, k| vh[j] * mean.values[(j, k)] * uh[k]);
        let svd = weighted.clone().svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let p_max = data.m().min(data.r());
        let d = fit(&data, &FitOptions::saturated(p_max)).unwrap();
        let roots = d.root_eigenvalues();
        let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
        let mut approx = DMatrix::zeros(data.m(), data.r());
        for p in 1..=p_max {
            let k = order[p - 1];
            let sigma = svd.singular_values[k];
            worst_sv = worst_sv.max((roots[p - 1] - sigma).abs());
            approx += sigma * u.column(k) * vt.row(k);
            let want = DMatrix::from_fn(data.m(), data.r(), |j, l| approx[(j, l)] / (vh[j] * uh[l]));
            let got = truncated_mean(&d, p, data.s_grid(), data.t_grid()).unwrap();
            worst_recon = worst_recon.max((got.values - want).amax());
        }
    }
    r.line(
        "3",
        worst_sv <= 1e-8 && worst_recon <= 1e-8,
        format!(
            "50 random tensors: max |root eigenvalue - weighted singular value| {worst_sv:.2e}, \
             max reconstruction deviation {worst_recon:.2e} (limit 1e-8)"
        ),
    );
}

/// Factors orthonormal under the trapezoid inner product of `g`.
fn random_orthonormal(rng: &mut ChaCha8Rng, g: &Grid, p: usize) -> DMatrix<f64> {
    let w = trapezoid_weights(g).to_dvector();
    let mut f = DMatrix::from_fn(g.len(), p, |_, _| rng.random_range(-1.0..1.0));
    for k in 0..p {
        for j in 0..k {
            let proj = f.column(k).component_mul(&w).dot(&f.column(j));
            let fj = f.column(j).into_owned();
            f.column_mut(k).axpy(-proj, &fj, 1.0);
        }
        let norm = f.column(k).component_mul(&w).dot(&f.column(k)).sqrt();
        f.column_mut(k).scale_mut(1.0 / norm);
    }
    f
}

fn optimality(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut exceptions = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..10 {
        let data = loop {
            let d = random_tensor(&mut rng);
            if d.m().min(d.r()) >= 3 {
                break d;
            }
        };
        let p = rng.random_range(1..data.m().min(data.r()));
        let mean = cross_sectional_mean(&data).unwrap();
        let (v, u) = (data.s_grid().weights(), data.t_grid().weights());
        let d = fit(&data, &FitOptions::saturated(p)).unwrap();
        let best = truncated_mean(&d, p, data.s_grid(), data.t_grid()).unwrap();
        let best_err = weighted_frobenius_sq(&(&mean.values - &best.values), &v, &u);
        for trial in 0..100 {
            let a = random_orthonormal(&mut rng, data.s_grid(), p);
            let b = random_orthonormal(&mut rng, data.t_grid(), p);
            let h = if trial % 2 == 0 {
                let coefs = DVector::from_fn(p, |_, _| rng.random_range(0.0..3.0));
                &a * DMatrix::from_diagonal(&coefs) * b.transpose()
            } else {
                // small perturbation of the optimum, still of rank ≤ p
                let (phi, psi): (Vec<_>, Vec<_>) = (0..p)
                    .map(|k| {
                        let c = &d.components[k];
                        let ps = DVector::from_vec(c.phi.eval_points(data.s_grid().points()).unwrap());
                        let qs = DVector::from_vec(c.psi.eval_points(data.t_grid().points()).unwrap());
                        (ps * c.root_eigenvalue + a.column(k) * 1e-3, qs + b.column(k) * 1e-3)
                    })
                    .unzip();
                let f = DMatrix::from_columns(&phi);
                let g = DMatrix::from_columns(&psi);
                f * g.transpose()
            };
            let err = weighted_frobenius_sq(&(&mean.values - h), &v, &u);
            tightest = tightest.min(err - best_err);
            if best_err > err {
                exceptions += 1;
            }
        }
    }
    r.line(
        "4",
        exceptions == 0,
        format!("10 instances × 100 rank-p competitors: {exceptions} exceptions (smallest margin {tightest:.2e})"),
    );
}

fn omega_trend(r: &mut Report) {
    let m = 20;
    let grid = Grid::equispaced(0.0, 1.0, m).unwrap();
    let basis = SplineBasis::new(4, 0.0, 1.0, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let v = grid.weights();
    let b = basis.evaluate_points(grid.points()).unwrap();
    // Ω from the true mean by a dense trapezoid rule (2001 points)
    let dense = Grid::equispaced(0.0, 1.0, 2001).unwrap();
    let truth = DMatrix::from_fn(dense.len(), dense.len(), |j, k| {
        true_mean(MeanId::Mu1, dense.points()[j], dense.points()[k]).unwrap()
    });
    let truth_mean = MeanSurface::new(dense.clone(), dense.clone(), truth).unwrap();
    let dk = kernel_k1(&truth_mean, &dense.weights()).unwrap();
    let db = basis.evaluate_points(dense.points()).unwrap();
    let omega = omega_matrix(&db, &dense.weights(), &dk).unwrap();
    let mut medians = Vec::new();
    for (step, n) in [10usize, 40, 160].into_iter().enumerate() {
        let config = SimulationConfig::new(MeanId::Mu1, 1.0, m, n);
        let mut errs: Vec<f64> = (0..50)
            .map(|rep| {
                let data = generate_dataset(&config, replicate_seed(1000 + step as u64, rep)).unwrap();
                let mean = cross_sectional_mean(&data).unwrap();
                let k1 = kernel_k1(&mean, &data.t_grid().weights()).unwrap();
                let est = omega_matrix(&b, &v, &k1).unwrap();
                (est - &omega).norm()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(0.5 * (errs[24] + errs[25]));
    }
    let ok = medians.windows(2).all(|w| w[1] < w[0]);
    r.line(
        "5",
        ok,
        format!(
            "median ||Omega_hat - Omega||_F for n=10,40,160: {:.4e}, {:.4e}, {:.4e}",
            medians[0], medians[1], medians[2]
        ),
    );
}

fn projection_identities(r: &mut Report) {
    let m = 20;
    let grid = Grid::equispaced(0.0, 1.0, m).unwrap();
    let pts = grid.points();
    let values = DMatrix::from_fn(m, m, |j, k| true_mean(MeanId::Mu1, pts[j], pts[k]).unwrap());
    let data = DataTensor::new(grid.clone(), grid.clone(), vec![values.clone()]).unwrap();
    // rich enough that spline approximation error does not mask the identity
    let search = KnotSearchConfig { rel_improvement_tol: 1e-9, max_knots: 20, ..Default::default() };
    let d = fit(&data, &FitOptions::free_knot(2, 4, search)).unwrap();
    let (u, v) = (grid.weights(), grid.weights());
    let mut worst = [0.0f64; 2];
    for (k, c) in d.components.iter().enumerate() {
        let phi = DVector::from_vec(c.phi.eval_points(pts).unwrap());
        let psi = DVector::from_vec(c.psi.eval_points(pts).unwrap());
        let root = c.root_eigenvalue;
        let from_psi = &values * psi.component_mul(&u.to_dvector()) / root;
        let from_phi = values.transpose() * phi.component_mul(&v.to_dvector()) / root;
        worst[k] = (&phi - from_psi).amax().max((&psi - from_phi).amax());
    }
    r.line(
        "6",
        worst.iter().all(|w| *w <= 1e-3),
        format!(
            "noiseless rank-2 mean (m=r={m}, free knots, tol 1e-9, <=20 knots): max |phi_k - lambda^-1/2 int mu psi_k| \
             (and the psi counterpart) k=1: {:.2e}, k=2: {:.2e} (limit 1e-3)",
            worst[0], worst[1]
        ),
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn config(pairs: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in pairs {
        c.set(k, *v).unwrap();
    }
    c
}

fn invariants(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sim = SimulationConfig::new(MeanId::Mu1, 1.0, 20, 10);
    let data = generate_dataset(&sim, 11).unwrap();
    let d = fit(&data, &FitOptions::free_knot(2, 4, Default::default())).unwrap();
    let (v, u) = (data.s_grid().weights(), data.t_grid().weights());
    let mut ortho = 0.0f64;
    for (grid, w, axis) in [(data.s_grid(), &v, 0), (data.t_grid(), &u, 1)] {
        let vals: Vec<DVector<f64>> = d
            .components
            .iter()
            .map(|c| {
                let f = if axis == 0 { &c.phi } else { &c.psi };
                DVector::from_vec(f.eval_points(grid.points()).unwrap())
            })
            .collect();
        for j in 0..vals.len() {
            for k in 0..vals.len() {
                let ip = vals[j].component_mul(&w.to_dvector()).dot(&vals[k]);
                ortho = ortho.max((ip - if j == k { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    let mut pou = 0.0f64;
    for _ in 0..200 {
        let order = rng.random_range(1..=5);
        let knots: Vec<f64> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0.01..0.99)).collect();
        let basis = SplineBasis::new(order, 0.0, 1.0, knots).unwrap();
        let x = rng.random_range(0.0..=1.0);
        pou = pou.max((basis.eval_point(x).unwrap().sum() - 1.0).abs());
    }
    let mut quad = 0.0f64;
    for _ in 0..200 {
        let len = rng.random_range(2..50);
        let g = random_grid(&mut rng, len);
        let span = g.last() - g.first();
        quad = quad.max((trapezoid_weights(&g).total() - span).abs() / span);
    }
    let n = data.n() as f64;
    let roots = d.root_eigenvalues();
    let col_mean = (0..d.p())
        .map(|k| (d.scores.column(k).sum() / n - roots[k]).abs())
        .fold(0.0, f64::max);

    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("data.csv");
    let subjects: Vec<String> = (0..data.n()).map(|i| format!("s{i}")).collect();
    fsvd::io::write_long_csv(&input, &fsvd::io::Dataset { subjects, data: data.clone() }).unwrap();
    let run_fit = |out: &str| {
        let out = tmp.path().join(out);
        cmd_fit(&config(&[("input", input.to_str().unwrap()), ("out", out.to_str().unwrap()), ("p", "2")])).unwrap();
        tree(&out)
    };
    let run_sim = |out: &str| {
        let out = tmp.path().join(out);
        cmd_simulate(&config(&[
            ("mean", "mu2"),
            ("sigma", "2"),
            ("m", "12"),
            ("n", "6"),
            ("replicates", "4"),
            ("out", out.to_str().unwrap()),
        ]))
        .unwrap();
        tree(&out)
    };
    let deterministic = run_fit("a") == run_fit("b") && run_sim("c") == run_sim("d");

    let ok = ortho <= 1e-8 && pou <= 1e-10 && quad <= 1e-12 && col_mean <= 1e-10 && deterministic;
    r.line(
        "7",
        ok,
        format!(
            "orthonormality {ortho:.1e} (1e-8), partition of unity {pou:.1e} (1e-10), \
             weight sums {quad:.1e} rel (1e-12), score means {col_mean:.1e} (1e-10), \
             byte-identical reruns {deterministic}"
        ),
    );
}

/// Ten synthetic "countries": log-rates linear in age with a period trend,
/// a country-specific slope and one country with a displaced level.
fn workflow(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let ages: Vec<f64> = (0..=18).map(|a| 5.0 * a as f64).collect();
    let years: Vec<f64> = (0..26).map(|y| 1950.0 + 2.0 * y as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut entries = Vec::new();
    for c in 0..10 {
        let level = if c == 7 { 1.2 } else { rng.random_range(-0.1..0.1) };
        let slope = rng.random_range(0.9..1.1);
        let mut text = String::from(&years.iter().map(|y| format!("y{y}")).collect::<Vec<_>>().join(","));
        text.push('\n');
        for a in &ages {
            let row: Vec<String> = years
                .iter()
                .map(|y| {
                    let log_rate = -9.0 + level + 0.085 * slope * a - 0.01 * (y - 1950.0) * (1.0 - a / 120.0)
                        + 0.02 * rng.random_range(-1.0..1.0);
                    log_rate.exp().to_string()
                })
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(tmp.path().join(format!("country{c}.csv")), text).unwrap();
        entries.push(format!(r#"{{"id":"country{c}","path":"country{c}.csv"}}"#));
    }
    let manifest = tmp.path().join("manifest.json");
    fs::write(&manifest, format!(r#"{{"s":{ages:?},"t":{years:?},"subjects":[{}]}}"#, entries.join(","))).unwrap();
    let fit_dir = tmp.path().join("fit");
    let scores_dir = tmp.path().join("scores");
    let pred_dir = tmp.path().join("pred");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let fit_res = cmd_fit(&config(&[
        ("input", &p(&manifest)),
        ("transform", "log"),
        ("p", "3"),
        ("out", &p(&fit_dir)),
    ]));
    let scores_res = cmd_scores(&config(&[("model", &p(&fit_dir)), ("out", &p(&scores_dir))]));
    let pred_res = cmd_predict(&config(&[("model", &p(&fit_dir)), ("out", &p(&pred_dir))]));
    let mut expected: Vec<std::path::PathBuf> = [
        "components.csv",
        "eigenvalues.csv",
        "scores.csv",
        "mu_hat_p.csv",
        "knots.json",
        "model.json",
    ]
    .iter()
    .map(|f| fit_dir.join(f))
    .collect();
    for axis in ["phi", "psi"] {
        for k in 1..=3 {
            expected.push(fit_dir.join("plot_data").join(format!("{axis}_{k}.csv")));
        }
    }
    expected.push(scores_dir.join("scores_scatter.csv"));
    expected.push(pred_dir.join("subjects.csv"));
    let missing: Vec<String> = expected.iter().filter(|f| !f.is_file()).map(|f| f.display().to_string()).collect();
    let rows = fs::read_to_string(scores_dir.join("scores_scatter.csv"))
        .map(|t| t.lines().count() - 1)
        .unwrap_or(0);
    let ok = fit_res.is_ok() && scores_res.is_ok() && pred_res.is_ok() && missing.is_empty() && rows == 10;
    let flagged = scores_res
        .as_ref()
        .map(|s| s.trim().rsplit("flagged: ").next().unwrap_or("").to_string())
        .unwrap_or_else(|e| e.to_string());
    r.line(
        "8",
        ok,
        format!(
            "synthetic 10-country ages×years manifest through fit (log, p=3) + scores + predict: \
             missing artifacts {missing:?}, scatter rows {rows}, flagged [{flagged}]; \
             mortality figures not reproduced (data not redistributable)"
        ),
    );
}

fn main() {
    let mut r = Report { failures: 0 };
    let t0 = Instant::now();
    table_rows(&mut r);
    matrix_svd_oracle(&mut r);
    optimality(&mut r);
    omega_trend(&mut r);
    projection_identities(&mut r);
    invariants(&mut r);
    workflow(&mut r);
    println!(
        "acceptance: {} failure(s) [{:.0}s]",
        r.failures,
        t0.elapsed().as_secs_f64()
    );
    if r.failures > 0 {
        std::process::exit(1);
    }
}
