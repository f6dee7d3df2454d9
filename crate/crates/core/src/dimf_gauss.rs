//! Closed-form D-IMF for Gaussian couplings.
//!
//! A coupling `q(x₀, x₁) = N(μ₀₁, Σ)` is lifted to a full discrete process by
//! the reciprocal projection, whose slice covariances have the closed form
//!
//! ```text
//! cov(x_{t_i}, x_{t_j}) = ε·t_min(1 − t_max)·I + U_i Σ U_jᵀ,   U_i = [(1 − t_i)I, t_i I]
//! ```
//!
//! and is turned back into a Markov chain by the Markovian projection, which
//! keeps each consecutive-pair law. The coupling of that chain has cross
//! covariance `Σ₀₁ = Σ₀ Gᵀ` with `G = A_{N+1}⋯A₁` the composed slopes.
//!
//! Internally every process is laid out chronologically
//! `(x₀, x_{t₁}, …, x_{t_N}, x₁)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::bridge::{build_operators, TimeGrid};
use crate::error::{Error, Result};
use crate::gauss::{gather_matrix, gather_vector, gaussian_kl, Gaussian};
use crate::linalg;
use crate::trace::ConvergenceTrace;

/// Joint Gaussian law of `(x₀, x₁)`, stored as one `2D`-dimensional Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCoupling {
    dim: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianCoupling {
    /// `mean = (μ₀, μ₁)`, `cov` with blocks `[[Σ₀, Σ_cov], [Σ_covᵀ, Σ₁]]`. Must be PD.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !mean.len().is_multiple_of(2) || mean.is_empty() {
            return Err(Error::InvalidArgument(format!("coupling mean has odd length {}", mean.len())));
        }
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), actual: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coupling parameter".into()));
        }
        let cov = linalg::symmetrize(&cov);
        linalg::cholesky_pd(&cov, "coupling covariance")?;
        Ok(Self { dim: mean.len() / 2, mean, cov })
    }

    pub fn from_blocks(
        mu0: &DVector<f64>,
        mu1: &DVector<f64>,
        sigma0: &DMatrix<f64>,
        sigma1: &DMatrix<f64>,
        cross: &DMatrix<f64>,
    ) -> Result<Self> {
        let d = mu0.len();
        for (name, rows, cols) in [
            ("mu1", mu1.len(), 1),
            ("sigma0", sigma0.nrows(), sigma0.ncols()),
            ("sigma1", sigma1.nrows(), sigma1.ncols()),
            ("cross", cross.nrows(), cross.ncols()),
        ] {
            let expected_cols = if name == "mu1" { 1 } else { d };
            if rows != d || cols != expected_cols {
                return Err(Error::DimensionMismatch { expected: d, actual: rows });
            }
        }
        let mut mean = DVector::zeros(2 * d);
        mean.rows_mut(0, d).copy_from(mu0);
        mean.rows_mut(d, d).copy_from(mu1);
        let mut cov = DMatrix::zeros(2 * d, 2 * d);
        cov.view_mut((0, 0), (d, d)).copy_from(&linalg::symmetrize(sigma0));
        cov.view_mut((d, d), (d, d)).copy_from(&linalg::symmetrize(sigma1));
        cov.view_mut((0, d), (d, d)).copy_from(cross);
        cov.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
        Self::new(mean, cov)
    }

    /// Product coupling `p₀ ⊗ p₁`.
    pub fn independent(p0: &Gaussian, p1: &Gaussian) -> Result<Self> {
        if p0.dim() != p1.dim() {
            return Err(Error::DimensionMismatch { expected: p0.dim(), actual: p1.dim() });
        }
        let d = p0.dim();
        Self::from_blocks(p0.mean(), p1.mean(), p0.cov(), p1.cov(), &DMatrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mu0(&self) -> DVector<f64> {
        self.mean.rows(0, self.dim).into_owned()
    }

    pub fn mu1(&self) -> DVector<f64> {
        self.mean.rows(self.dim, self.dim).into_owned()
    }

    pub fn sigma0(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.dim, self.dim)).into_owned()
    }

    pub fn sigma1(&self) -> DMatrix<f64> {
        self.cov.view((self.dim, self.dim), (self.dim, self.dim)).into_owned()
    }

    /// `Σ_cov = E[(x₀ − μ₀)(x₁ − μ₁)ᵀ]`.
    pub fn cross(&self) -> DMatrix<f64> {
        self.cov.view((0, self.dim), (self.dim, self.dim)).into_owned()
    }

    pub fn marginal0(&self) -> Gaussian {
        Gaussian::new_unchecked(self.mu0(), self.sigma0()).expect("blocks of a valid coupling")
    }

    pub fn marginal1(&self) -> Gaussian {
        Gaussian::new_unchecked(self.mu1(), self.sigma1()).expect("blocks of a valid coupling")
    }

    pub fn as_gaussian(&self) -> Gaussian {
        Gaussian::new_unchecked(self.mean.clone(), self.cov.clone()).expect("valid coupling")
    }

    pub fn kl(&self, other: &GaussianCoupling) -> Result<f64> {
        gaussian_kl(&self.as_gaussian(), &other.as_gaussian())
    }

    /// Correlation of `x₀` and `x₁` when `D = 1`.
    pub fn correlation_1d(&self) -> Option<f64> {
        (self.dim == 1).then(|| self.cov[(0, 1)] / (self.cov[(0, 0)] * self.cov[(1, 1)]).sqrt())
    }

    /// Largest deviation of the marginals from `(p0, p1)` in means and covariances.
    pub fn marginal_deviation(&self, p0: &Gaussian, p1: &Gaussian) -> Result<f64> {
        if p0.dim() != self.dim || p1.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: p0.dim() });
        }
        Ok([
            (&self.mu0() - p0.mean()).amax(),
            (&self.mu1() - p1.mean()).amax(),
            linalg::max_abs_diff(&self.sigma0(), p0.cov()),
            linalg::max_abs_diff(&self.sigma1(), p1.cov()),
        ]
        .into_iter()
        .fold(0.0, f64::max))
    }
}

/// Access to the per-slice means and pairwise slice covariances of a discrete
/// Gaussian process. Slices are indexed chronologically, `0..N+2`.
pub trait SliceCovariance {
    fn grid(&self) -> &TimeGrid;
    fn dim(&self) -> usize;
    fn slice_mean(&self, i: usize) -> DVector<f64>;
    /// `cov(x_{t_i}, x_{t_j})`, a `D × D` block.
    fn block(&self, i: usize, j: usize) -> DMatrix<f64>;
}

/// Joint Gaussian law of all `N + 2` slices in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProcessJoint {
    grid: TimeGrid,
    dim: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianProcessJoint {
    pub fn new(grid: TimeGrid, dim: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let joint = Self::new_unchecked(grid, dim, mean, cov)?;
        linalg::check_psd(&joint.cov)?;
        Ok(joint)
    }

    fn new_unchecked(grid: TimeGrid, dim: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = grid.n_slices() * dim;
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: mean.len() });
        }
        Ok(Self { grid, dim, mean, cov: linalg::symmetrize(&cov) })
    }

    /// Builds a joint from the inner-first `(x_in, x₀, x₁)` layout.
    pub fn from_inner_first(grid: TimeGrid, dim: usize, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let perm = chronological_from_inner_first(grid.n_inner(), dim);
        let n = perm.len();
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: mean.len() });
        }
        Self::new_unchecked(grid, dim, gather_vector(&mean, &perm), gather_matrix(&cov, &perm, &perm))
    }

    /// Mean and covariance in the inner-first `(x_in, x₀, x₁)` layout.
    pub fn to_inner_first(&self) -> (DVector<f64>, DMatrix<f64>) {
        let perm = inner_first_from_chronological(self.grid.n_inner(), self.dim);
        (gather_vector(&self.mean, &perm), gather_matrix(&self.cov, &perm, &perm))
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn as_gaussian(&self) -> Gaussian {
        Gaussian::new_unchecked(self.mean.clone(), self.cov.clone()).expect("valid joint")
    }

    pub fn slice_marginal(&self, i: usize) -> Gaussian {
        Gaussian::new_unchecked(self.slice_mean(i), self.block(i, i)).expect("valid joint")
    }

    /// The `(x₀, x₁)` marginal, gathered entry by entry.
    pub fn coupling(&self) -> Result<GaussianCoupling> {
        let d = self.dim;
        let last = self.grid.n_slices() - 1;
        let idx: Vec<usize> = (0..d).chain(last * d..last * d + d).collect();
        GaussianCoupling::new(gather_vector(&self.mean, &idx), gather_matrix(&self.cov, &idx, &idx))
    }

    /// Full path-space `KL(self ‖ other)`.
    pub fn kl(&self, other: &GaussianProcessJoint) -> Result<f64> {
        gaussian_kl(&self.as_gaussian(), &other.as_gaussian())
    }
}

impl SliceCovariance for GaussianProcessJoint {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn slice_mean(&self, i: usize) -> DVector<f64> {
        self.mean.rows(i * self.dim, self.dim).into_owned()
    }

    fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.cov.view((i * self.dim, j * self.dim), (self.dim, self.dim)).into_owned()
    }
}

/// Position `k` of the chronological layout holds inner-first coordinate `perm[k]`.
fn chronological_from_inner_first(n_inner: usize, dim: usize) -> Vec<usize> {
    let slice = |s: usize| -> usize {
        match s {
            0 => n_inner,
            s if s == n_inner + 1 => n_inner + 1,
            s => s - 1,
        }
    };
    (0..n_inner + 2).flat_map(|s| (0..dim).map(move |c| slice(s) * dim + c)).collect()
}

fn inner_first_from_chronological(n_inner: usize, dim: usize) -> Vec<usize> {
    let fwd = chronological_from_inner_first(n_inner, dim);
    let mut inv = vec![0; fwd.len()];
    for (k, &p) in fwd.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// The reciprocal projection of a coupling, evaluated block by block from the
/// closed form without assembling the full covariance.
#[derive(Debug, Clone)]
pub struct ReciprocalGaussianProcess<'a> {
    coupling: &'a GaussianCoupling,
    grid: &'a TimeGrid,
    epsilon: f64,
}

impl<'a> ReciprocalGaussianProcess<'a> {
    pub fn new(coupling: &'a GaussianCoupling, grid: &'a TimeGrid, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { coupling, grid, epsilon })
    }

    fn weights(&self, i: usize) -> (f64, f64) {
        let t = self.grid.times()[i];
        (1.0 - t, t)
    }
}

impl SliceCovariance for ReciprocalGaussianProcess<'_> {
    fn grid(&self) -> &TimeGrid {
        self.grid
    }

    fn dim(&self) -> usize {
        self.coupling.dim
    }

    fn slice_mean(&self, i: usize) -> DVector<f64> {
        let (a, b) = self.weights(i);
        let d = self.coupling.dim;
        let mut m = DVector::zeros(d);
        if a != 0.0 {
            m += self.coupling.mean.rows(0, d) * a;
        }
        if b != 0.0 {
            m += self.coupling.mean.rows(d, d) * b;
        }
        m
    }

    fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.coupling.dim;
        let wi = self.weights(i);
        let wj = self.weights(j);
        let mut out = DMatrix::zeros(d, d);
        for (bi, ci) in [(0usize, wi.0), (1, wi.1)] {
            for (bj, cj) in [(0usize, wj.0), (1, wj.1)] {
                let w = ci * cj;
                if w != 0.0 {
                    out += self.coupling.cov.view((bi * d, bj * d), (d, d)) * w;
                }
            }
        }
        let times = self.grid.times();
        let (lo, hi) = (times[i.min(j)], times[i.max(j)]);
        let bridge = self.epsilon * lo * (1.0 - hi);
        if bridge != 0.0 {
            for c in 0..d {
                out[(c, c)] += bridge;
            }
        }
        out
    }
}

/// Reciprocal projection: mean `(Uμ₀₁, μ₀₁)`, covariance
/// `[[εK + UΣUᵀ, UΣ], [(UΣ)ᵀ, Σ]]`, permuted into chronological order.
pub fn reciprocal_projection(coupling: &GaussianCoupling, grid: &TimeGrid, epsilon: f64) -> Result<GaussianProcessJoint> {
    let d = coupling.dim;
    let ops = build_operators(grid, d, epsilon)?;
    let n_in = grid.n_inner() * d;
    let u_sigma = &ops.u * &coupling.cov;
    let inner = &ops.k * epsilon + &u_sigma * ops.u.transpose();

    let total = n_in + 2 * d;
    let mut mean = DVector::zeros(total);
    mean.rows_mut(0, n_in).copy_from(&(&ops.u * &coupling.mean));
    mean.rows_mut(n_in, 2 * d).copy_from(&coupling.mean);
    let mut cov = DMatrix::zeros(total, total);
    cov.view_mut((0, 0), (n_in, n_in)).copy_from(&inner);
    cov.view_mut((0, n_in), (n_in, 2 * d)).copy_from(&u_sigma);
    cov.view_mut((n_in, 0), (2 * d, n_in)).copy_from(&u_sigma.transpose());
    cov.view_mut((n_in, n_in), (2 * d, 2 * d)).copy_from(&coupling.cov);
    GaussianProcessJoint::from_inner_first(grid.clone(), d, mean, cov)
}

/// Affine-Gaussian transition `x ↦ N(slope·x + offset, noise)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianKernel {
    pub slope: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
}

/// Gaussian Markov chain on the slices of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMarkovChain {
    grid: TimeGrid,
    initial: Gaussian,
    transitions: Vec<AffineGaussianKernel>,
}

impl GaussianMarkovChain {
    pub fn new(grid: TimeGrid, initial: Gaussian, transitions: Vec<AffineGaussianKernel>) -> Result<Self> {
        if transitions.len() != grid.n_inner() + 1 {
            return Err(Error::DimensionMismatch { expected: grid.n_inner() + 1, actual: transitions.len() });
        }
        let d = initial.dim();
        for k in &transitions {
            if k.slope.shape() != (d, d) || k.offset.len() != d || k.noise.shape() != (d, d) {
                return Err(Error::DimensionMismatch { expected: d, actual: k.offset.len() });
            }
            linalg::check_psd(&k.noise)?;
        }
        Ok(Self { grid, initial, transitions })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn initial(&self) -> &Gaussian {
        &self.initial
    }

    pub fn transitions(&self) -> &[AffineGaussianKernel] {
        &self.transitions
    }

    /// Single-time marginals of all `N + 2` slices.
    pub fn slice_marginals(&self) -> Vec<Gaussian> {
        let mut out = Vec::with_capacity(self.transitions.len() + 1);
        let mut mean = self.initial.mean().clone();
        let mut var = self.initial.cov().clone();
        out.push(self.initial.clone());
        for k in &self.transitions {
            mean = &k.slope * &mean + &k.offset;
            var = linalg::symmetrize(&(&k.slope * &var * k.slope.transpose() + &k.noise));
            out.push(Gaussian::new_unchecked(mean.clone(), var.clone()).expect("finite chain"));
        }
        out
    }

    /// Slope product `A_{N+1}⋯A₁`.
    pub fn composed_slope(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.transitions.iter().fold(DMatrix::identity(d, d), |g, k| &k.slope * g)
    }

    pub fn to_joint(&self) -> GaussianProcessJoint {
        chain_to_joint(self)
    }
}

/// Markovian projection of any discrete Gaussian process. Returns the chain
/// and its `(x₀, x₁)` coupling with `Σ₀₁ᵀ = GΣ₀`, `G = A_{N+1}⋯A₁`.
pub fn markovian_projection<P: SliceCovariance + ?Sized>(process: &P) -> Result<(GaussianMarkovChain, GaussianCoupling)> {
    let d = process.dim();
    let n_slices = process.grid().n_slices();
    let mut transitions = Vec::with_capacity(n_slices - 1);
    let mut prev_mean = process.slice_mean(0);
    let mut prev_var = process.block(0, 0);
    let sigma0 = prev_var.clone();
    let mu0 = prev_mean.clone();
    let mut g = DMatrix::identity(d, d);
    for n in 1..n_slices {
        let mean = process.slice_mean(n);
        let var = process.block(n, n);
        let cross = process.block(n - 1, n);
        let chol = linalg::cholesky_pd(&prev_var, "Markovian projection: consecutive block")?;
        // A = C_{n,n-1} C_{n-1,n-1}⁻¹ = (C_{n-1,n-1}⁻¹ C_{n-1,n})ᵀ
        let slope = chol.solve(&cross).transpose();
        let noise = linalg::symmetrize(&(&var - &slope * &cross));
        let offset = &mean - &slope * &prev_mean;
        g = &slope * g;
        transitions.push(AffineGaussianKernel { slope, offset, noise });
        prev_mean = mean;
        prev_var = var;
    }
    let initial = Gaussian::new_unchecked(mu0.clone(), sigma0.clone())?;
    let cross = &sigma0 * g.transpose();
    let coupling = GaussianCoupling::from_blocks(&mu0, &prev_mean, &sigma0, &prev_var, &cross)?;
    let chain = GaussianMarkovChain { grid: process.grid().clone(), initial, transitions };
    Ok((chain, coupling))
}

/// Joint law of all slices of a Gaussian Markov chain.
pub fn chain_to_joint(chain: &GaussianMarkovChain) -> GaussianProcessJoint {
    let d = chain.dim();
    let marginals = chain.slice_marginals();
    let n = marginals.len();
    let mut mean = DVector::zeros(n * d);
    let mut cov = DMatrix::zeros(n * d, n * d);
    for (i, m) in marginals.iter().enumerate() {
        mean.rows_mut(i * d, d).copy_from(m.mean());
        // cov(x_j, x_i) = A_j⋯A_{i+1} var(x_i) for j > i
        let mut block = m.cov().clone();
        cov.view_mut((i * d, i * d), (d, d)).copy_from(&block);
        for j in (i + 1)..n {
            block = &chain.transitions[j - 1].slope * block;
            cov.view_mut((j * d, i * d), (d, d)).copy_from(&block);
            cov.view_mut((i * d, j * d), (d, d)).copy_from(&block.transpose());
        }
    }
    GaussianProcessJoint::new_unchecked(chain.grid.clone(), d, mean, cov).expect("consistent chain shapes")
}

/// Entropic OT objective `E‖x₀ − x₁‖²/2 − ε·H(q)` of a Gaussian coupling.
pub fn eot_objective(coupling: &GaussianCoupling, epsilon: f64) -> Result<f64> {
    let diff = coupling.mu0() - coupling.mu1();
    let cross = coupling.cross();
    let second_moment = diff.norm_squared() + coupling.sigma0().trace() + coupling.sigma1().trace() - 2.0 * cross.trace();
    Ok(0.5 * second_moment - epsilon * coupling.as_gaussian().entropy()?)
}

/// Stopping rule and oracle for [`dimf_run`].
#[derive(Debug, Clone)]
pub struct DimfOptions {
    pub max_iters: usize,
    pub threshold: f64,
    pub oracle: GaussianCoupling,
    /// Record per-iteration wall time; zero otherwise, keeping traces reproducible.
    pub record_timing: bool,
}

impl DimfOptions {
    pub const DEFAULT_THRESHOLD: f64 = 1e-10;
    pub const DEFAULT_MAX_ITERS: usize = 100_000;

    pub fn new(oracle: GaussianCoupling) -> Self {
        Self {
            max_iters: Self::DEFAULT_MAX_ITERS,
            threshold: Self::DEFAULT_THRESHOLD,
            oracle,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DimfResult {
    pub coupling: GaussianCoupling,
    pub trace: ConvergenceTrace,
    /// KL of the initial coupling to the oracle.
    pub initial_kl: f64,
    pub converged: bool,
}

/// Maximum allowed deviation of the initial coupling's marginals from `(p0, p1)`.
pub const MARGINAL_TOLERANCE: f64 = 1e-9;

/// Alternates reciprocal and Markovian projections starting from `init`,
/// stopping once `KL(q ‖ oracle) < threshold` or after `max_iters` iterations.
pub fn dimf_run(
    p0: &Gaussian,
    p1: &Gaussian,
    init: &GaussianCoupling,
    grid: &TimeGrid,
    epsilon: f64,
    opts: &DimfOptions,
) -> Result<DimfResult> {
    if opts.oracle.dim() != init.dim() {
        return Err(Error::DimensionMismatch { expected: init.dim(), actual: opts.oracle.dim() });
    }
    let dev = init.marginal_deviation(p0, p1)?;
    if dev > MARGINAL_TOLERANCE {
        return Err(Error::MarginalMismatch(format!("initial coupling deviates from (p0, p1) by {dev:e}")));
    }
    let initial_kl = init.kl(&opts.oracle)?;
    let mut trace = ConvergenceTrace::new();
    let mut current = init.clone();
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let start = opts.record_timing.then(Instant::now);
        let reciprocal = ReciprocalGaussianProcess::new(&current, grid, epsilon)?;
        let (_, next) = markovian_projection(&reciprocal)?;
        let kl_oracle = next.kl(&opts.oracle)?;
        let kl_step = next.kl(&current)?;
        let wall_ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);
        trace.push(kl_oracle, kl_step, wall_ms);
        current = next;
        if kl_oracle < opts.threshold {
            converged = true;
            break;
        }
    }
    Ok(DimfResult { coupling: current, trace, initial_kl, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn unit_independent() -> GaussianCoupling {
        GaussianCoupling::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn coupling_validation() {
        assert!(GaussianCoupling::new(dvector![0.0, 0.0, 0.0], DMatrix::identity(3, 3)).is_err());
        assert!(GaussianCoupling::new(dvector![0.0, 0.0], dmatrix![1.0, 1.0; 1.0, 1.0 - 1e-6]).is_err());
        let c = GaussianCoupling::from_blocks(&dvector![1.0], &dvector![2.0], &dmatrix![2.0], &dmatrix![3.0], &dmatrix![0.5]).unwrap();
        assert_eq!(c.cross(), dmatrix![0.5]);
        assert_eq!(c.mu1(), dvector![2.0]);
    }

    #[test]
    fn reciprocal_projection_midpoint_epsilon_one() {
        let joint = reciprocal_projection(&unit_independent(), &TimeGrid::uniform(1).unwrap(), 1.0).unwrap();
        let (_, cov) = joint.to_inner_first();
        assert!((cov[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((cov[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((cov[(0, 2)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reciprocal_projection_midpoint_epsilon_two() {
        let joint = reciprocal_projection(&unit_independent(), &TimeGrid::uniform(1).unwrap(), 2.0).unwrap();
        let (_, cov) = joint.to_inner_first();
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((cov[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reciprocal_projection_keeps_coupling_exactly() {
        let c = GaussianCoupling::from_blocks(
            &dvector![0.3, -1.0],
            &dvector![2.0, 0.5],
            &dmatrix![1.5, 0.2; 0.2, 0.8],
            &dmatrix![0.9, -0.1; -0.1, 1.2],
            &dmatrix![0.3, 0.1; -0.2, 0.25],
        )
        .unwrap();
        let joint = reciprocal_projection(&c, &TimeGrid::uniform(3).unwrap(), 1.7).unwrap();
        assert_eq!(joint.coupling().unwrap(), c);
    }

    #[test]
    fn block_closed_form_matches_dense_assembly() {
        let c = GaussianCoupling::from_blocks(
            &dvector![0.3, -1.0],
            &dvector![2.0, 0.5],
            &dmatrix![1.5, 0.2; 0.2, 0.8],
            &dmatrix![0.9, -0.1; -0.1, 1.2],
            &dmatrix![0.3, 0.1; -0.2, 0.25],
        )
        .unwrap();
        let grid = TimeGrid::from_inner(&[0.1, 0.45, 0.8]).unwrap();
        let dense = reciprocal_projection(&c, &grid, 0.6).unwrap();
        let lazy = ReciprocalGaussianProcess::new(&c, &grid, 0.6).unwrap();
        for i in 0..5 {
            assert!((dense.slice_mean(i) - lazy.slice_mean(i)).amax() < 1e-14);
            for j in 0..5 {
                assert!((dense.block(i, j) - lazy.block(i, j)).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn markovian_projection_of_independent_midpoint() {
        let grid = TimeGrid::uniform(1).unwrap();
        let joint = reciprocal_projection(&unit_independent(), &grid, 1.0).unwrap();
        let (chain, coupling) = markovian_projection(&joint).unwrap();
        let t = chain.transitions();
        assert!((t[0].slope[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((t[0].noise[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((t[1].slope[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t[1].noise[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((coupling.cross()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn chain_to_joint_hand_propagation() {
        let grid = TimeGrid::uniform(1).unwrap();
        let joint = reciprocal_projection(&unit_independent(), &grid, 1.0).unwrap();
        let (chain, _) = markovian_projection(&joint).unwrap();
        let back = chain_to_joint(&chain);
        assert!((back.block(0, 2)[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((back.block(2, 2)[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_chain_gives_rank_one_joint() {
        let grid = TimeGrid::uniform(2).unwrap();
        let k = AffineGaussianKernel { slope: dmatrix![1.0], offset: dvector![0.0], noise: dmatrix![0.0] };
        let chain = GaussianMarkovChain::new(grid, Gaussian::standard(1), vec![k.clone(), k.clone(), k]).unwrap();
        let joint = chain_to_joint(&chain);
        assert_eq!(joint.cov(), &DMatrix::from_element(4, 4, 1.0));
    }

    #[test]
    fn chain_roundtrip() {
        let grid = TimeGrid::uniform(2).unwrap();
        let kernels = vec![
            AffineGaussianKernel { slope: dmatrix![0.8, 0.1; 0.0, 0.9], offset: dvector![0.1, 0.0], noise: dmatrix![0.3, 0.05; 0.05, 0.2] },
            AffineGaussianKernel { slope: dmatrix![1.1, 0.0; -0.2, 0.7], offset: dvector![0.0, -0.3], noise: dmatrix![0.25, 0.0; 0.0, 0.4] },
            AffineGaussianKernel { slope: dmatrix![0.9, 0.3; 0.1, 1.0], offset: dvector![0.2, 0.2], noise: dmatrix![0.5, -0.1; -0.1, 0.3] },
        ];
        let init = Gaussian::new(dvector![1.0, -1.0], dmatrix![1.0, 0.3; 0.3, 2.0]).unwrap();
        let chain = GaussianMarkovChain::new(grid, init, kernels).unwrap();
        let (back, _) = markovian_projection(&chain_to_joint(&chain)).unwrap();
        for (a, b) in chain.transitions().iter().zip(back.transitions()) {
            assert!((&a.slope - &b.slope).amax() < 1e-12);
            assert!((&a.offset - &b.offset).amax() < 1e-12);
            assert!((&a.noise - &b.noise).amax() < 1e-12);
        }
    }

    #[test]
    fn eot_objective_cost_and_entropy_terms() {
        for rho in [0.0, 0.3, -0.4] {
            let c = GaussianCoupling::new(dvector![0.0, 0.0], dmatrix![1.0, rho; rho, 1.0]).unwrap();
            let h = c.as_gaussian().entropy().unwrap();
            let cost = eot_objective(&c, 1.0).unwrap() + h;
            assert!((cost - (1.0 - rho)).abs() < 1e-14);
        }
        let h = unit_independent().as_gaussian().entropy().unwrap();
        assert!((h - (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-14);
    }

    #[test]
    fn eot_objective_is_minimized_near_golden_ratio_root() {
        let obj = |rho: f64| {
            eot_objective(&GaussianCoupling::new(dvector![0.0, 0.0], dmatrix![1.0, rho; rho, 1.0]).unwrap(), 1.0).unwrap()
        };
        let star = (5f64.sqrt() - 1.0) / 2.0;
        assert!(obj(star) < obj(0.0));
        assert!(obj(star) < obj(0.9));
    }

    #[test]
    fn dimf_run_rejects_bad_init() {
        let p = Gaussian::standard(1);
        let wrong = Gaussian::new(dvector![0.0], dmatrix![2.0]).unwrap();
        let init = GaussianCoupling::independent(&p, &wrong).unwrap();
        let opts = DimfOptions::new(unit_independent());
        let grid = TimeGrid::uniform(1).unwrap();
        assert!(matches!(dimf_run(&p, &p, &init, &grid, 1.0, &opts), Err(Error::MarginalMismatch(_))));
        let oracle2 = GaussianCoupling::independent(&Gaussian::standard(2), &Gaussian::standard(2)).unwrap();
        let opts = DimfOptions::new(oracle2);
        assert!(matches!(dimf_run(&p, &p, &unit_independent(), &grid, 1.0, &opts), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn dimf_run_converges_to_golden_ratio_correlation() {
        let p = Gaussian::standard(1);
        let rho = (5f64.sqrt() - 1.0) / 2.0;
        let oracle = GaussianCoupling::new(dvector![0.0, 0.0], dmatrix![1.0, rho; rho, 1.0]).unwrap();
        let mut opts = DimfOptions::new(oracle);
        opts.threshold = 1e-16;
        opts.max_iters = 2000;
        let res = dimf_run(&p, &p, &unit_independent(), &TimeGrid::uniform(3).unwrap(), 1.0, &opts).unwrap();
        assert!((res.coupling.correlation_1d().unwrap() - rho).abs() < 1e-6);
        assert!(res.trace.is_monotone(res.initial_kl, 1e-12));
    }
}
