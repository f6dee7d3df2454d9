//! Independent ground truths: the closed-form Gaussian static bridge, Gaussian
//! IPF, and Sinkhorn on finite grids.

use nalgebra::{DMatrix, DVector};

use crate::dimf_gauss::GaussianCoupling;
use crate::error::{Error, Result};
use crate::gauss::Gaussian;
use crate::grid::{check_pmf, log_sum_exp, GridBridgeKernels, GridCoupling, GridSpace};
use crate::linalg;

/// Closed forms for entropic OT between Gaussians are usually written for
/// the cost `‖x₀ − x₁‖²` with entropy weight `2σ²`. Our problem uses cost
/// `‖x₀ − x₁‖²/2` with weight `ε`; doubling both sides gives `σ² = ε`.
pub const SIGMA_SQ_PER_EPSILON: f64 = 1.0;

pub const SINKHORN_MAX_ITERS: usize = 100_000;

fn check_pair(p0: &Gaussian, p1: &Gaussian, epsilon: f64) -> Result<()> {
    if p0.dim() != p1.dim() {
        return Err(Error::DimensionMismatch { expected: p0.dim(), actual: p1.dim() });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    linalg::cholesky_pd(p0.cov(), "p0 covariance")?;
    linalg::cholesky_pd(p1.cov(), "p1 covariance")?;
    Ok(())
}

/// Optimal coupling of the static problem between two Gaussians.
///
/// `Σ_cov = ½(Σ₀^{1/2} D Σ₀^{−1/2} − σ²I)` with `D = (4Σ₀^{1/2}Σ₁Σ₀^{1/2} + σ⁴I)^{1/2}`.
/// Marginal blocks and means are copied from the inputs unchanged.
pub fn gaussian_sb_plan(p0: &Gaussian, p1: &Gaussian, epsilon: f64) -> Result<GaussianCoupling> {
    check_pair(p0, p1, epsilon)?;
    let d = p0.dim();
    let sigma_sq = SIGMA_SQ_PER_EPSILON * epsilon;
    let s0_half = linalg::sqrtm_psd(p0.cov());
    let s0_inv_half = linalg::inv_sqrtm_pd(p0.cov());
    let inner = linalg::symmetrize(&(&s0_half * p1.cov() * &s0_half * 4.0))
        + DMatrix::identity(d, d) * (sigma_sq * sigma_sq);
    let dmat = linalg::sqrtm_psd(&inner);
    let cross = (&s0_half * dmat * &s0_inv_half - DMatrix::identity(d, d) * sigma_sq) * 0.5;
    GaussianCoupling::from_blocks(p0.mean(), p1.mean(), p0.cov(), p1.cov(), &cross)
}

/// Gaussian IPF: starting from `x₀ ~ p₀`, `x₁ | x₀ ~ N(x₀, εI)`, alternately
/// refits the `x₁` marginal (keeping `x₀ | x₁`) and the `x₀` marginal
/// (keeping `x₁ | x₀`) until one sweep moves no parameter by more than `tol`.
pub fn gaussian_ipf(p0: &Gaussian, p1: &Gaussian, epsilon: f64, tol: f64, max_iters: usize) -> Result<GaussianCoupling> {
    check_pair(p0, p1, epsilon)?;
    let d = p0.dim();
    let mut st = IpfState {
        mu0: p0.mean().clone(),
        mu1: p0.mean().clone(),
        s00: p0.cov().clone(),
        s11: p0.cov() + DMatrix::identity(d, d) * epsilon,
        s01: p0.cov().clone(),
    };
    let mut drift = f64::INFINITY;
    for _ in 0..max_iters {
        let prev = st.clone();
        st.fit_x1(p1)?;
        st.fit_x0(p0)?;
        drift = st.max_change(&prev);
        if drift < tol {
            return GaussianCoupling::from_blocks(&st.mu0, &st.mu1, &st.s00, &st.s11, &st.s01);
        }
    }
    Err(Error::NonConvergence { iterations: max_iters, residual: drift })
}

#[derive(Clone)]
struct IpfState {
    mu0: DVector<f64>,
    mu1: DVector<f64>,
    s00: DMatrix<f64>,
    s11: DMatrix<f64>,
    s01: DMatrix<f64>,
}

impl IpfState {
    fn fit_x1(&mut self, p1: &Gaussian) -> Result<()> {
        // x₀ | x₁ = μ₀ + B(x₁ − μ₁) + noise(S)
        let chol = linalg::cholesky_pd(&self.s11, "IPF x1 block")?;
        let b = chol.solve(&self.s01.transpose()).transpose();
        let s = &self.s00 - &b * self.s01.transpose();
        self.mu0 += &b * (p1.mean() - &self.mu1);
        self.mu1 = p1.mean().clone();
        self.s01 = &b * p1.cov();
        self.s00 = linalg::symmetrize(&(&b * p1.cov() * b.transpose() + s));
        self.s11 = p1.cov().clone();
        Ok(())
    }

    fn fit_x0(&mut self, p0: &Gaussian) -> Result<()> {
        let chol = linalg::cholesky_pd(&self.s00, "IPF x0 block")?;
        let a = chol.solve(&self.s01).transpose();
        let s = &self.s11 - &a * &self.s01;
        self.mu1 += &a * (p0.mean() - &self.mu0);
        self.mu0 = p0.mean().clone();
        self.s01 = p0.cov() * a.transpose();
        self.s11 = linalg::symmetrize(&(&a * p0.cov() * a.transpose() + s));
        self.s00 = p0.cov().clone();
        Ok(())
    }

    fn max_change(&self, o: &IpfState) -> f64 {
        let v = (&self.mu0 - &o.mu0).amax().max((&self.mu1 - &o.mu1).amax());
        v.max(linalg::max_abs_diff(&self.s00, &o.s00))
            .max(linalg::max_abs_diff(&self.s11, &o.s11))
            .max(linalg::max_abs_diff(&self.s01, &o.s01))
    }
}

/// Dual scalings of a converged Sinkhorn run, over the states with positive mass.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub log_u: DVector<f64>,
    pub log_v: DVector<f64>,
    pub iterations: usize,
    /// Max-norm deviation of the row sums from `p₀` (columns are exact).
    pub residual: f64,
}

impl SinkhornState {
    pub fn u(&self) -> DVector<f64> {
        self.log_u.map(f64::exp)
    }

    pub fn v(&self) -> DVector<f64> {
        self.log_v.map(f64::exp)
    }
}

/// Entropic OT on a grid with Gibbs kernel `exp(−‖x₀ − x₁‖²/(2ε))`, log domain.
pub fn grid_sinkhorn(p0: &[f64], p1: &[f64], space: &GridSpace, epsilon: f64, tol: f64) -> Result<GridCoupling> {
    let log_k = gibbs_log_kernel(space, epsilon)?;
    Ok(sinkhorn_log(p0, p1, &log_k, tol, SINKHORN_MAX_ITERS)?.0)
}

/// Static problem solved by grid D-IMF: Sinkhorn with the reference chain's
/// endpoint kernel. Coincides with [`grid_sinkhorn`] when the chain has no
/// inner slices.
pub fn grid_reference_sinkhorn(p0: &[f64], p1: &[f64], kernels: &GridBridgeKernels, tol: f64) -> Result<GridCoupling> {
    Ok(sinkhorn_log(p0, p1, kernels.log_endpoint_kernel(), tol, SINKHORN_MAX_ITERS)?.0)
}

/// `ln K(i, j) = −‖xᵢ − xⱼ‖²/(2ε)`.
pub fn gibbs_log_kernel(space: &GridSpace, epsilon: f64) -> Result<DMatrix<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let s = space.len();
    Ok(DMatrix::from_fn(s, s, |i, j| -space.sq_dist(i, j) / (2.0 * epsilon)))
}

fn support(p: &[f64]) -> Vec<usize> {
    (0..p.len()).filter(|&i| p[i] > 0.0).collect()
}

fn check_marginals(p0: &[f64], p1: &[f64], k: &DMatrix<f64>) -> Result<()> {
    if k.nrows() != p0.len() || k.ncols() != p1.len() {
        return Err(Error::DimensionMismatch { expected: k.nrows(), actual: p0.len() });
    }
    check_pmf(p0, "p0")?;
    check_pmf(p1, "p1")
}

fn embed(sub: &DMatrix<f64>, rows: &[usize], cols: &[usize], n: usize, m: usize) -> Result<GridCoupling> {
    let mut pi = DMatrix::zeros(n, m);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            pi[(i, j)] = sub[(a, b)];
        }
    }
    let total = pi.sum();
    GridCoupling::new(pi / total)
}

/// Log-domain Sinkhorn for an arbitrary log-kernel. Zero-mass states are
/// dropped before iterating and receive zero rows/columns in the result.
pub fn sinkhorn_log(
    p0: &[f64],
    p1: &[f64],
    log_k: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(GridCoupling, SinkhornState)> {
    check_marginals(p0, p1, log_k)?;
    let (rows, cols) = (support(p0), support(p1));
    let lk = log_k.select_rows(&rows).select_columns(&cols);
    let (n, m) = (rows.len(), cols.len());
    let log_a: Vec<f64> = rows.iter().map(|&i| p0[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| p1[j].ln()).collect();
    let mut f = DVector::zeros(n);
    let mut g = DVector::zeros(m);
    let mut buf_n = vec![0.0; n];
    let mut buf_m = vec![0.0; m];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        for i in 0..n {
            for (j, b) in buf_m.iter_mut().enumerate() {
                *b = lk[(i, j)] + g[j];
            }
            f[i] = log_a[i] - log_sum_exp(&buf_m);
        }
        for j in 0..m {
            for (i, b) in buf_n.iter_mut().enumerate() {
                *b = lk[(i, j)] + f[i];
            }
            g[j] = log_b[j] - log_sum_exp(&buf_n);
        }
        if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Underflow("non-finite log scaling; kernel has an empty row or column".into()));
        }
        let pi = DMatrix::from_fn(n, m, |i, j| (f[i] + lk[(i, j)] + g[j]).exp());
        residual = pi.row_iter().zip(&rows).map(|(r, &i)| (r.sum() - p0[i]).abs()).fold(0.0, f64::max);
        if residual < tol {
            let state = SinkhornState { log_u: f, log_v: g, iterations: it, residual };
            return Ok((embed(&pi, &rows, &cols, p0.len(), p1.len())?, state));
        }
    }
    Err(Error::NonConvergence { iterations: max_iters, residual })
}

/// Plain matrix-scaling Sinkhorn, `u = p₀ / Kv`, `v = p₁ / Kᵀu`.
pub fn sinkhorn_plain(
    p0: &[f64],
    p1: &[f64],
    log_k: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(GridCoupling, SinkhornState)> {
    check_marginals(p0, p1, log_k)?;
    let (rows, cols) = (support(p0), support(p1));
    let k = log_k.select_rows(&rows).select_columns(&cols).map(f64::exp);
    let a = DVector::from_iterator(rows.len(), rows.iter().map(|&i| p0[i]));
    let b = DVector::from_iterator(cols.len(), cols.iter().map(|&j| p1[j]));
    let mut v = DVector::from_element(cols.len(), 1.0);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        let u = a.component_div(&(&k * &v));
        v = b.component_div(&(k.tr_mul(&u)));
        if u.iter().chain(v.iter()).any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Underflow("kernel underflow; use the log-domain solver".into()));
        }
        let pi = DMatrix::from_fn(rows.len(), cols.len(), |i, j| u[i] * k[(i, j)] * v[j]);
        residual = pi.row_iter().zip(a.iter()).map(|(r, ai)| (r.sum() - ai).abs()).fold(0.0, f64::max);
        if residual < tol {
            let state = SinkhornState { log_u: u.map(f64::ln), log_v: v.map(f64::ln), iterations: it, residual };
            return Ok((embed(&pi, &rows, &cols, p0.len(), p1.len())?, state));
        }
    }
    Err(Error::NonConvergence { iterations: max_iters, residual })
}
