//! The four experiment modes.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::benchmark::make_benchmark_gaussians;
use super::config::{GaussProblem, Mode, ResolvedConfig};
use super::output::{fmt_f64, gauss_trace_csv, write_atomic, write_json, GRID_CSV_HEADER};
use crate::bridge::{reciprocal_sample, TimeGrid};
use crate::dimf_gauss::{dimf_run, markovian_projection, reciprocal_projection, DimfOptions, GaussianCoupling, GaussianMarkovChain};
use crate::error::{Error, Result};
use crate::gauss::{bw2_metrics, Gaussian};
use crate::grid::{
    build_bridge_kernels, grid_dimf_run_with_kernels, grid_kl, grid_markovian_projection, grid_reciprocal_projection,
    ChainDirection, GridCoupling, GridDimfOptions, GridProcess, GridSpace,
};
use crate::linalg;
use crate::oracle::{gaussian_ipf, gaussian_sb_plan, grid_reference_sinkhorn, grid_sinkhorn};
use crate::trace::LogLinearFit;

/// Files written and whether every tolerance check passed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-run seed derived from the base seed and the sweep position.
pub fn derive_seed(base: u64, eps_index: usize, n_index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ eps_index as u64) ^ n_index as u64)
}

/// Runs `mode` with at most `jobs` worker threads (all cores when `None`).
pub fn run(cfg: &ResolvedConfig, jobs: Option<usize>) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.mode {
        Mode::GaussConvergence => run_gauss_convergence(cfg),
        Mode::GridConvergence => run_grid_convergence(cfg),
        Mode::OracleCheck => run_oracle_check(cfg),
        Mode::BridgeCheck => run_bridge_check(cfg),
    })
}

fn sweep(cfg: &ResolvedConfig) -> Vec<(usize, f64, usize, usize)> {
    let mut out = Vec::new();
    for (ei, &eps) in cfg.eps.iter().enumerate() {
        for (ni, &n) in cfg.n_inner.iter().enumerate() {
            out.push((ei, eps, ni, n));
        }
    }
    out
}

fn run_name(prefix: &str, eps: f64, n: usize) -> String {
    format!("{prefix}_eps{}_N{n}.csv", fmt_f64(eps))
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a, R: Serialize> {
    mode: &'static str,
    passed: bool,
    config: &'a ResolvedConfig,
    runs: Vec<R>,
}

fn finish<R: Serialize>(cfg: &ResolvedConfig, passed: bool, runs: Vec<R>, mut files: Vec<PathBuf>) -> Result<Outcome> {
    let path = cfg.output_dir.join("summary.json");
    write_json(&path, &Summary { mode: cfg.mode.as_str(), passed, config: cfg, runs })?;
    files.push(path);
    Ok(Outcome { passed, files })
}

fn elapsed_ms(start: Instant, timing: bool) -> f64 {
    if timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GaussRunSummary {
    pub eps: f64,
    pub n_inner: usize,
    pub run_seed: u64,
    pub csv: String,
    pub iterations: usize,
    /// `None` when the threshold was not reached within `max_iters`.
    pub iterations_to_threshold: Option<usize>,
    pub initial_kl: f64,
    pub final_kl: f64,
    pub monotone: bool,
    pub fit: Option<LogLinearFit>,
    /// Correlation of the final coupling (one-dimensional problems only).
    pub final_correlation: Option<f64>,
    pub wall_ms: f64,
}

fn gauss_pair(cfg: &ResolvedConfig) -> Result<(Gaussian, Gaussian)> {
    match cfg.problem {
        GaussProblem::Benchmark => make_benchmark_gaussians(cfg.dim, cfg.seed),
        GaussProblem::Standard => Ok((Gaussian::standard(cfg.dim), Gaussian::standard(cfg.dim))),
    }
}

pub fn run_gauss_convergence(cfg: &ResolvedConfig) -> Result<Outcome> {
    let (p0, p1) = gauss_pair(cfg)?;
    let results: Vec<(GaussRunSummary, PathBuf)> = sweep(cfg)
        .into_par_iter()
        .map(|(ei, eps, ni, n)| {
            let start = Instant::now();
            let oracle = gaussian_sb_plan(&p0, &p1, eps)?;
            let init = GaussianCoupling::independent(&p0, &p1)?;
            let grid = cfg.time_grid(n)?;
            let mut opts = DimfOptions::new(oracle);
            opts.max_iters = cfg.max_iters;
            opts.threshold = cfg.threshold;
            opts.record_timing = cfg.timing;
            let res = dimf_run(&p0, &p1, &init, &grid, eps, &opts)?;
            let name = run_name("gauss", eps, n);
            let path = cfg.output_dir.join(&name);
            write_atomic(&path, gauss_trace_csv(&res.trace, cfg.threshold).as_bytes())?;
            let its = res.trace.iterations_to_threshold(cfg.threshold);
            info!("gauss eps={eps} N={n}: {} iterations, threshold at {its:?}", res.trace.len());
            let summary = GaussRunSummary {
                eps,
                n_inner: n,
                run_seed: derive_seed(cfg.seed, ei, ni),
                csv: name,
                iterations: res.trace.len(),
                iterations_to_threshold: its,
                initial_kl: res.initial_kl,
                final_kl: res.trace.last().map_or(res.initial_kl, |r| r.kl_to_oracle),
                monotone: res.trace.is_monotone(res.initial_kl, 1e-12),
                fit: res.trace.log_linear_fit(cfg.threshold),
                final_correlation: res.coupling.correlation_1d(),
                wall_ms: elapsed_ms(start, cfg.timing),
            };
            Ok((summary, path))
        })
        .collect::<Result<_>>()?;
    let passed = results.iter().all(|(s, _)| s.iterations_to_threshold.is_some() && s.monotone);
    let (runs, files): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    finish(cfg, passed, runs, files)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRunSummary {
    pub eps: f64,
    pub n_inner: usize,
    pub csv: String,
    pub outer_iterations: usize,
    pub converged: bool,
    pub initial_tv: f64,
    pub final_tv: f64,
    pub final_kl: f64,
    pub kl_monotone: bool,
    pub marginal_deviation: f64,
    pub asymmetry: f64,
    /// `|KL(r‖m) − KL(r‖proj_M r) − KL(proj_M r‖m)|` at the final iterate.
    pub pythagorean_markovian_residual: f64,
    /// `|KL(m‖r) − KL(m‖proj_R m) − KL(proj_R m‖r)|` at the final iterate.
    pub pythagorean_reciprocal_residual: f64,
    pub wall_ms: f64,
}

/// Tolerance for the Pythagorean residuals reported by `grid-convergence`.
pub const PYTHAGOREAN_TOL: f64 = 1e-10;

pub fn grid_space(cfg: &ResolvedConfig) -> Result<GridSpace> {
    let g = &cfg.grid_problem;
    match g.space_dim {
        1 => GridSpace::uniform_1d(g.states, g.lo, g.hi),
        _ => GridSpace::uniform_2d(g.states, g.lo, g.hi),
    }
}

pub fn run_grid_convergence(cfg: &ResolvedConfig) -> Result<Outcome> {
    let space = grid_space(cfg)?;
    let g = &cfg.grid_problem;
    let p0 = space.discretized_gaussian(&g.mean0, g.var0)?;
    let p1 = space.discretized_gaussian(&g.mean1, g.var1)?;
    let results: Vec<(GridRunSummary, PathBuf)> = sweep(cfg)
        .into_par_iter()
        .map(|(_, eps, _, n)| {
            let start = Instant::now();
            let kernels = Arc::new(build_bridge_kernels(&space, &cfg.time_grid(n)?, eps)?);
            let oracle = grid_reference_sinkhorn(&p0, &p1, &kernels, g.sinkhorn_tol)?;
            let init = GridCoupling::independent(&p0, &p1)?;
            let mut opts = GridDimfOptions::new(oracle);
            opts.max_outer_iters = cfg.max_iters;
            opts.tv_threshold = cfg.threshold;
            let res = grid_dimf_run_with_kernels(&p0, &p1, &init, &kernels, &opts)?;

            let mut csv = format!("{GRID_CSV_HEADER}\n");
            for r in &res.records {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    r.iter + 1,
                    fmt_f64(r.tv_to_oracle),
                    fmt_f64(r.kl_to_oracle),
                    fmt_f64(r.kl_step)
                ));
            }
            let name = run_name("grid", eps, n);
            let path = cfg.output_dir.join(&name);
            write_atomic(&path, csv.as_bytes())?;

            let r: GridProcess = grid_reciprocal_projection(&res.coupling, &kernels)?.into();
            let reference_r: GridProcess = grid_reciprocal_projection(&init, &kernels)?.into();
            let reference_m: GridProcess = grid_markovian_projection(&reference_r, ChainDirection::Forward)?.into();
            let proj_m: GridProcess = grid_markovian_projection(&r, ChainDirection::Forward)?.into();
            let markov_res =
                (grid_kl(&r, &reference_m)? - grid_kl(&r, &proj_m)? - grid_kl(&proj_m, &reference_m)?).abs();
            let m: GridProcess = res.last_chain.clone().into();
            let proj_r: GridProcess = grid_reciprocal_projection(&m.coupling()?, &kernels)?.into();
            let recip_res =
                (grid_kl(&m, &reference_r)? - grid_kl(&m, &proj_r)? - grid_kl(&proj_r, &reference_r)?).abs();

            let mut prev = res.initial_kl;
            let kl_monotone = res.records.iter().all(|r| {
                let ok = r.kl_to_oracle <= prev + 1e-12;
                prev = r.kl_to_oracle;
                ok
            });
            let last = res.records.last();
            info!("grid eps={eps} N={n}: {} outer iterations, converged={}", res.records.len(), res.converged);
            let summary = GridRunSummary {
                eps,
                n_inner: n,
                csv: name,
                outer_iterations: res.records.len(),
                converged: res.converged,
                initial_tv: res.initial_tv,
                final_tv: last.map_or(res.initial_tv, |r| r.tv_to_oracle),
                final_kl: last.map_or(res.initial_kl, |r| r.kl_to_oracle),
                kl_monotone,
                marginal_deviation: res.coupling.marginal_deviation(&p0, &p1),
                asymmetry: res.coupling.max_asymmetry(),
                pythagorean_markovian_residual: markov_res,
                pythagorean_reciprocal_residual: recip_res,
                wall_ms: elapsed_ms(start, cfg.timing),
            };
            Ok((summary, path))
        })
        .collect::<Result<_>>()?;
    let passed = results.iter().all(|(s, _)| {
        s.converged
            && s.kl_monotone
            && s.pythagorean_markovian_residual < PYTHAGOREAN_TOL
            && s.pythagorean_reciprocal_residual < PYTHAGOREAN_TOL
    });
    let (runs, files): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    finish(cfg, passed, runs, files)
}

#[derive(Debug, Clone, Serialize)]
pub struct IpfAgreement {
    pub instance: usize,
    pub seed: u64,
    pub eps: f64,
    /// BW₂²-UVP of the IPF coupling against the closed form, percent.
    pub uvp_percent: f64,
    pub max_cov_diff: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridAgreement {
    pub eps: f64,
    pub rho_closed_form: f64,
    pub rho_ipf: f64,
    pub rho_grid: f64,
    /// Largest pairwise correlation difference.
    pub correlation_residual: f64,
    /// `|ρ² + ερ − 1|` for the closed form.
    pub stationarity_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum OracleRecord {
    Ipf(IpfAgreement),
    Grid(GridAgreement),
}

pub fn run_oracle_check(cfg: &ResolvedConfig) -> Result<Outcome> {
    let oc = &cfg.oracle_check;
    let mut jobs = Vec::new();
    for i in 0..oc.instances {
        for &eps in &cfg.eps {
            jobs.push((i, eps));
        }
    }
    let ipf: Vec<IpfAgreement> = jobs
        .into_par_iter()
        .map(|(i, eps)| {
            let seed = derive_seed(cfg.seed, i, 0);
            let (p0, p1) = make_benchmark_gaussians(cfg.dim, seed)?;
            let plan = gaussian_sb_plan(&p0, &p1, eps)?;
            let fit = gaussian_ipf(&p0, &p1, eps, oc.ipf_tol, cfg.max_iters)?;
            let uvp = bw2_metrics(&plan.as_gaussian(), &fit.as_gaussian())?.uvp_percent;
            let diff = linalg::max_abs_diff(plan.cov(), fit.cov());
            Ok(IpfAgreement {
                instance: i,
                seed,
                eps,
                uvp_percent: uvp,
                max_cov_diff: diff,
                passed: uvp < oc.uvp_tol_percent && diff < oc.cov_tol,
            })
        })
        .collect::<Result<_>>()?;

    let space = GridSpace::uniform_1d(oc.grid_states, -oc.grid_half_width, oc.grid_half_width)?;
    let p = space.discretized_gaussian(&[0.0], 1.0)?;
    let unit = Gaussian::standard(1);
    let grid: Vec<GridAgreement> = cfg
        .eps
        .par_iter()
        .map(|&eps| {
            let rho_cf = gaussian_sb_plan(&unit, &unit, eps)?.cross()[(0, 0)];
            let rho_ipf = gaussian_ipf(&unit, &unit, eps, oc.ipf_tol, cfg.max_iters)?.cross()[(0, 0)];
            let rho_grid = grid_sinkhorn(&p, &p, &space, eps, 1e-13)?.correlation_1d(&space);
            let residual = (rho_cf - rho_ipf).abs().max((rho_cf - rho_grid).abs()).max((rho_ipf - rho_grid).abs());
            Ok(GridAgreement {
                eps,
                rho_closed_form: rho_cf,
                rho_ipf,
                rho_grid,
                correlation_residual: residual,
                stationarity_residual: (rho_cf * rho_cf + eps * rho_cf - 1.0).abs(),
                passed: residual < oc.correlation_tol,
            })
        })
        .collect::<Result<_>>()?;

    let passed = ipf.iter().all(|r| r.passed) && grid.iter().all(|r| r.passed);
    if !passed {
        warn!("oracle check failed");
    }
    let runs: Vec<OracleRecord> = ipf.into_iter().map(OracleRecord::Ipf).chain(grid.into_iter().map(OracleRecord::Grid)).collect();
    finish(cfg, passed, runs, Vec::new())
}

#[derive(Debug, Clone, Serialize)]
pub struct BridgeRunSummary {
    pub eps: f64,
    pub n_inner: usize,
    pub run_seed: u64,
    pub samples: usize,
    /// Largest `|empirical − closed form| / standard error` over covariance entries.
    pub max_z: f64,
    pub entries: usize,
    pub entries_outside: usize,
    /// Max-norm gap between `Σ₀Gᵀ` and the cross block recovered from the chain precision matrix.
    pub composition_residual: f64,
    pub passed: bool,
}

/// Cross block `cov(x₀, x₁)` of a Gaussian chain, from its block-tridiagonal
/// precision matrix inverted densely.
pub fn chain_cross_via_precision(chain: &GaussianMarkovChain) -> Result<DMatrix<f64>> {
    let d = chain.dim();
    let n = chain.transitions().len() + 1;
    let mut lambda = DMatrix::zeros(n * d, n * d);
    let p0 = linalg::cholesky_pd(chain.initial().cov(), "chain initial covariance")?.inverse();
    add_block(&mut lambda, 0, 0, &p0);
    for (k, t) in chain.transitions().iter().enumerate() {
        let q = linalg::cholesky_pd(&t.noise, "chain transition noise")?.inverse();
        let qa = &q * &t.slope;
        let (i, j) = (k * d, (k + 1) * d);
        add_block(&mut lambda, j, j, &q);
        add_block(&mut lambda, i, i, &(t.slope.transpose() * &qa));
        add_block(&mut lambda, j, i, &(-&qa));
        add_block(&mut lambda, i, j, &(-qa.transpose()));
    }
    let cov = linalg::cholesky_pd(&linalg::symmetrize(&lambda), "chain precision")?.inverse();
    Ok(cov.view((0, (n - 1) * d), (d, d)).into_owned())
}

fn add_block(m: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    let mut v = m.view_mut((row, col), block.shape());
    v += block;
}

fn monte_carlo_check(
    joint_cov: &DMatrix<f64>,
    coupling: &GaussianCoupling,
    grid: &TimeGrid,
    eps: f64,
    samples: usize,
    seed: u64,
    se_multiple: f64,
) -> Result<(f64, usize, usize)> {
    let d = coupling.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chol = linalg::cholesky(coupling.cov(), "coupling covariance")?;
    let mean = coupling.mean().clone();
    let dim_total = joint_cov.nrows();
    let mut data = DMatrix::zeros(samples, dim_total);
    for s in 0..samples {
        let path = reciprocal_sample(
            |r: &mut ChaCha8Rng| {
                let z = DVector::from_fn(2 * d, |_, _| rand::Rng::sample::<f64, _>(r, rand_distr::StandardNormal));
                let x = &mean + chol.l() * z;
                (x.rows(0, d).into_owned(), x.rows(d, d).into_owned())
            },
            d,
            grid,
            eps,
            &mut rng,
        )?;
        for (k, x) in path.iter().enumerate() {
            for (c, v) in x.iter().enumerate() {
                data[(s, k * d + c)] = *v;
            }
        }
    }
    let nf = samples as f64;
    let means: Vec<f64> = (0..dim_total).map(|c| data.column(c).sum() / nf).collect();
    let mut max_z = 0.0f64;
    let mut outside = 0;
    let mut entries = 0;
    for a in 0..dim_total {
        for b in a..dim_total {
            let prods: Vec<f64> = (0..samples).map(|s| (data[(s, a)] - means[a]) * (data[(s, b)] - means[b])).collect();
            let emp = prods.iter().sum::<f64>() / (nf - 1.0);
            let var = prods.iter().map(|p| (p - emp).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            let z = (emp - joint_cov[(a, b)]).abs() / se;
            max_z = max_z.max(z);
            entries += 1;
            if z > se_multiple {
                outside += 1;
            }
        }
    }
    Ok((max_z, entries, outside))
}

pub fn run_bridge_check(cfg: &ResolvedConfig) -> Result<Outcome> {
    let (p0, p1) = make_benchmark_gaussians(cfg.dim, cfg.seed)?;
    let bc = &cfg.bridge_check;
    let runs: Vec<BridgeRunSummary> = sweep(cfg)
        .into_par_iter()
        .map(|(ei, eps, ni, n)| {
            let grid = cfg.time_grid(n)?;
            let coupling = gaussian_sb_plan(&p0, &p1, eps)?;
            let joint = reciprocal_projection(&coupling, &grid, eps)?;
            let run_seed = derive_seed(cfg.seed, ei, ni);
            let (max_z, entries, outside) =
                monte_carlo_check(joint.cov(), &coupling, &grid, eps, bc.samples, run_seed, bc.se_multiple)?;
            let (chain, projected) = markovian_projection(&joint)?;
            let composition_residual = linalg::max_abs_diff(&projected.cross(), &chain_cross_via_precision(&chain)?);
            Ok(BridgeRunSummary {
                eps,
                n_inner: n,
                run_seed,
                samples: bc.samples,
                max_z,
                entries,
                entries_outside: outside,
                composition_residual,
                passed: outside == 0 && composition_residual < bc.composition_tol,
            })
        })
        .collect::<Result<_>>()?;
    let passed = runs.iter().all(|r| r.passed);
    finish(cfg, passed, runs, Vec::new())
}
