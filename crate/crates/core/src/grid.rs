//! Exact D-IMF on a finite state space.
//!
//! The reference process is the grid chain with transitions
//! `W_n(x, y) = exp(−‖x − y‖² / (2ε(tₙ − tₙ₋₁)))`, i.e. the Brownian transition
//! density evaluated at grid points. Bridge kernels are that chain's exact
//! conditionals given the endpoint,
//!
//! ```text
//! Bₙ[x, x₁, y] = W_n(x, y) · H_n(y, x₁) / H_{n−1}(x, x₁),   H_n = W_{n+1}⋯W_{N+1}
//! ```
//!
//! so reciprocal processes are `π(x₀, x₁) ∏ Bₙ` and the static problem solved
//! by D-IMF is entropic OT with kernel `H₀`.
//!
//! Every process is handled through an endpoint-augmented chain on states
//! `(xₙ, x₁)`: an initial law over `(x₀, x₁)` and kernels over the next inner
//! slice. Both reciprocal processes and Markov chains have this form, which
//! gives exact pairwise marginals and a chain-rule path-space KL without ever
//! materializing the `S^{N+2}` path tensor.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::bridge::{BridgeStep, TimeGrid};
use crate::error::{Error, Result};
use crate::trace::ConvergenceTrace;

/// Tolerance on probability normalization.
pub const PROB_TOLERANCE: f64 = 1e-12;

/// Above this many paths, path-space KL uses the chain-rule decomposition.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Finite set of `S` distinct points in `R^d`, `d ∈ {1, 2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpace {
    dim: usize,
    coords: Vec<f64>,
}

impl GridSpace {
    pub fn new(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidArgument(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if points.len() < 2 {
            return Err(Error::InvalidArgument("grid needs at least two points".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: p.len() });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite grid point".into()));
        }
        for (i, a) in points.iter().enumerate() {
            if points[i + 1..].iter().any(|b| b == a) {
                return Err(Error::InvalidArgument(format!("duplicate grid point {a:?}")));
            }
        }
        Ok(Self { dim, coords: points.iter().flatten().copied().collect() })
    }

    /// `n` equispaced points on `[lo, hi]`.
    pub fn uniform_1d(n: usize, lo: f64, hi: f64) -> Result<Self> {
        let pts: Vec<Vec<f64>> = linspace(n, lo, hi).into_iter().map(|x| vec![x]).collect();
        Self::new(1, &pts)
    }

    /// Tensor grid of `n × n` equispaced points on `[lo, hi]²`, row-major.
    pub fn uniform_2d(n: usize, lo: f64, hi: f64) -> Result<Self> {
        let axis = linspace(n, lo, hi);
        let pts: Vec<Vec<f64>> = axis.iter().flat_map(|&x| axis.iter().map(move |&y| vec![x, y])).collect();
        Self::new(2, &pts)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        self.point(i).iter().zip(self.point(j)).map(|(a, b)| (a - b).powi(2)).sum()
    }

    /// Gaussian density `N(mean, var·I)` at the grid points, normalized to a pmf.
    pub fn discretized_gaussian(&self, mean: &[f64], var: f64) -> Result<Vec<f64>> {
        if mean.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: mean.len() });
        }
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {var}")));
        }
        let logw: Vec<f64> = (0..self.len())
            .map(|i| -self.point(i).iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * var))
            .collect();
        let lse = log_sum_exp(&logw);
        Ok(logw.iter().map(|l| (l - lse).exp()).collect())
    }
}

fn linspace(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n < 2 {
        return vec![lo; n];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * h }).collect()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn check_pmf(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{name} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::InvalidArgument(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Joint pmf `π(x₀, x₁)` on an `S × S` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCoupling {
    pi: DMatrix<f64>,
}

impl GridCoupling {
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        if pi.nrows() != pi.ncols() {
            return Err(Error::DimensionMismatch { expected: pi.nrows(), actual: pi.ncols() });
        }
        check_pmf(pi.as_slice(), "coupling")?;
        Ok(Self { pi })
    }

    pub fn independent(p0: &[f64], p1: &[f64]) -> Result<Self> {
        if p0.len() != p1.len() {
            return Err(Error::DimensionMismatch { expected: p0.len(), actual: p1.len() });
        }
        check_pmf(p0, "p0")?;
        check_pmf(p1, "p1")?;
        Ok(Self { pi: DVector::from_column_slice(p0) * DVector::from_column_slice(p1).transpose() })
    }

    pub fn pi(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn n_states(&self) -> usize {
        self.pi.nrows()
    }

    /// Law of `x₀` (row sums).
    pub fn marginal0(&self) -> Vec<f64> {
        self.pi.row_iter().map(|r| r.sum()).collect()
    }

    /// Law of `x₁` (column sums).
    pub fn marginal1(&self) -> Vec<f64> {
        self.pi.column_iter().map(|c| c.sum()).collect()
    }

    /// Total variation distance, half the L1 distance.
    pub fn tv(&self, other: &GridCoupling) -> f64 {
        0.5 * self.pi.iter().zip(other.pi.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn kl(&self, other: &GridCoupling) -> Result<f64> {
        discrete_kl(self.pi.as_slice(), other.pi.as_slice())
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.pi - self.pi.transpose()).amax()
    }

    pub fn marginal_deviation(&self, p0: &[f64], p1: &[f64]) -> f64 {
        let d0 = self.marginal0().iter().zip(p0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let d1 = self.marginal1().iter().zip(p1).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        d0.max(d1)
    }

    /// Moments `(mean₀, mean₁, var₀, var₁, cov₀₁)` of the first coordinate.
    pub fn moments_1d(&self, space: &GridSpace) -> (f64, f64, f64, f64, f64) {
        let x = |i: usize| space.point(i)[0];
        let s = self.n_states();
        let (mut m0, mut m1) = (0.0, 0.0);
        for i in 0..s {
            for j in 0..s {
                m0 += self.pi[(i, j)] * x(i);
                m1 += self.pi[(i, j)] * x(j);
            }
        }
        let (mut v0, mut v1, mut c) = (0.0, 0.0, 0.0);
        for i in 0..s {
            for j in 0..s {
                let w = self.pi[(i, j)];
                v0 += w * (x(i) - m0).powi(2);
                v1 += w * (x(j) - m1).powi(2);
                c += w * (x(i) - m0) * (x(j) - m1);
            }
        }
        (m0, m1, v0, v1, c)
    }

    /// Correlation of the first coordinates of `x₀` and `x₁`.
    pub fn correlation_1d(&self, space: &GridSpace) -> f64 {
        let (_, _, v0, v1, c) = self.moments_1d(space);
        c / (v0 * v1).sqrt()
    }
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0`; fails when `p > 0` meets `q = 0`.
pub fn discrete_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), actual: q.len() });
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuity("mass where the reference has none".into()));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

/// Per-interval bridge kernels `Bₙ[x_prev, x₁, x_next]` for `n = 1..=N`.
#[derive(Debug, Clone)]
pub struct GridBridgeKernels {
    n_states: usize,
    grid: TimeGrid,
    epsilon: f64,
    kernels: Vec<Vec<f64>>,
    log_endpoint_kernel: DMatrix<f64>,
}

pub fn build_bridge_kernels(space: &GridSpace, grid: &TimeGrid, epsilon: f64) -> Result<GridBridgeKernels> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let s = space.len();
    let times = grid.times();
    let n_steps = times.len() - 1;
    let log_w: Vec<DMatrix<f64>> = times
        .windows(2)
        .map(|w| {
            let dt = w[1] - w[0];
            DMatrix::from_fn(s, s, |i, j| -space.sq_dist(i, j) / (2.0 * epsilon * dt))
        })
        .collect();

    // log H_n for n = N+1 down to 0; H_{N+1} is the identity.
    let mut log_h = vec![DMatrix::from_element(s, s, f64::NEG_INFINITY); n_steps + 1];
    for i in 0..s {
        log_h[n_steps][(i, i)] = 0.0;
    }
    log_h[n_steps - 1] = log_w[n_steps - 1].clone();
    let mut buf = vec![0.0; s];
    for n in (0..n_steps - 1).rev() {
        let (w, next) = (&log_w[n], &log_h[n + 1]);
        let mut h = DMatrix::zeros(s, s);
        for x in 0..s {
            for x1 in 0..s {
                for (y, b) in buf.iter_mut().enumerate() {
                    *b = w[(x, y)] + next[(y, x1)];
                }
                h[(x, x1)] = log_sum_exp(&buf);
            }
        }
        log_h[n] = h;
    }

    let mut kernels = Vec::with_capacity(grid.n_inner());
    for n in 1..=grid.n_inner() {
        let (w, h_next, h_prev) = (&log_w[n - 1], &log_h[n], &log_h[n - 1]);
        let step = BridgeStep::new(times[n - 1], times[n], epsilon)?;
        let mut k = vec![0.0; s * s * s];
        for x in 0..s {
            for x1 in 0..s {
                check_resolved(space, &step, x, x1).map_err(|d| {
                    Error::UnderResolvedGrid(format!(
                        "bridge density (interval {n}, state {x}, endpoint {x1}) vanishes at every grid point \
                         (nearest point {d:.1} standard deviations away); epsilon {epsilon} is too small for the grid spacing"
                    ))
                })?;
                let row = &mut k[(x * s + x1) * s..(x * s + x1 + 1) * s];
                let norm = h_prev[(x, x1)];
                for (y, r) in row.iter_mut().enumerate() {
                    *r = (w[(x, y)] + h_next[(y, x1)] - norm).exp();
                }
                let total: f64 = row.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    return Err(Error::UnderResolvedGrid(format!(
                        "bridge kernel row (interval {n}, state {x}, endpoint {x1}) has no mass; epsilon {epsilon} is too small for the grid spacing"
                    )));
                }
                row.iter_mut().for_each(|r| *r /= total);
            }
        }
        kernels.push(k);
    }
    Ok(GridBridgeKernels { n_states: s, grid: grid.clone(), epsilon, kernels, log_endpoint_kernel: log_h.swap_remove(0) })
}

/// Fails with the distance in standard deviations when the continuous bridge
/// density underflows at every grid point.
fn check_resolved(space: &GridSpace, step: &BridgeStep, x: usize, x1: usize) -> std::result::Result<(), f64> {
    let (a, b) = (space.point(x), space.point(x1));
    let nearest = (0..space.len())
        .map(|y| {
            space
                .point(y)
                .iter()
                .zip(a.iter().zip(b))
                .map(|(yk, (ak, bk))| (yk - (ak + (bk - ak) * step.mean_slope)).powi(2))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    let exponent = nearest / (2.0 * step.variance);
    if exponent > -f64::MIN_POSITIVE.ln() {
        Err((nearest / step.variance).sqrt())
    } else {
        Ok(())
    }
}

impl GridBridgeKernels {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Row `Bₙ[x_prev, x₁, ·]` for interval `n ∈ 1..=N`.
    pub fn row(&self, n: usize, x_prev: usize, x1: usize) -> &[f64] {
        let s = self.n_states;
        &self.kernels[n - 1][(x_prev * s + x1) * s..(x_prev * s + x1 + 1) * s]
    }

    /// `ln H₀(x₀, x₁)`, the reference chain's endpoint kernel (up to a constant).
    pub fn log_endpoint_kernel(&self) -> &DMatrix<f64> {
        &self.log_endpoint_kernel
    }
}

/// Reciprocal process `π(x₀, x₁) ∏ Bₙ`, kept in factorized form.
#[derive(Debug, Clone)]
pub struct GridReciprocal {
    coupling: GridCoupling,
    kernels: Arc<GridBridgeKernels>,
}

impl GridReciprocal {
    pub fn coupling(&self) -> &GridCoupling {
        &self.coupling
    }

    pub fn kernels(&self) -> &Arc<GridBridgeKernels> {
        &self.kernels
    }

    pub fn path_probability(&self, path: &[usize]) -> f64 {
        let x1 = *path.last().expect("non-empty path");
        let mut p = self.coupling.pi[(path[0], x1)];
        for n in 1..path.len() - 1 {
            p *= self.kernels.row(n, path[n - 1], x1)[path[n]];
        }
        p
    }
}

pub fn grid_reciprocal_projection(coupling: &GridCoupling, kernels: &Arc<GridBridgeKernels>) -> Result<GridReciprocal> {
    if coupling.n_states() != kernels.n_states {
        return Err(Error::DimensionMismatch { expected: kernels.n_states, actual: coupling.n_states() });
    }
    Ok(GridReciprocal { coupling: coupling.clone(), kernels: Arc::clone(kernels) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainDirection {
    /// `q(x₀) ∏ q(xₙ | xₙ₋₁)`.
    Forward,
    /// `q(x₁) ∏ q(xₙ₋₁ | xₙ)`.
    Backward,
}

/// Markov chain over the `N + 2` slices.
///
/// Forward chains store the law of `x₀` and `Tₙ[xₙ₋₁, xₙ]`; backward chains
/// store the law of `x₁` and `Rₙ[xₙ, xₙ₋₁]`. In both cases `transitions[n−1]`
/// belongs to the interval `(tₙ₋₁, tₙ]` and rows are conditional pmfs.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMarkovChain {
    direction: ChainDirection,
    initial: Vec<f64>,
    transitions: Vec<DMatrix<f64>>,
}

impl GridMarkovChain {
    pub fn new(direction: ChainDirection, initial: Vec<f64>, transitions: Vec<DMatrix<f64>>) -> Result<Self> {
        check_pmf(&initial, "initial law")?;
        let s = initial.len();
        if transitions.len() < 2 {
            return Err(Error::InvalidGrid("a chain needs at least two transitions".into()));
        }
        for t in &transitions {
            if t.shape() != (s, s) {
                return Err(Error::DimensionMismatch { expected: s, actual: t.nrows() });
            }
            for r in t.row_iter() {
                if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.sum() - 1.0).abs() > PROB_TOLERANCE {
                    return Err(Error::InvalidArgument("transition rows must be pmfs".into()));
                }
            }
        }
        Ok(Self { direction, initial, transitions })
    }

    pub fn direction(&self) -> ChainDirection {
        self.direction
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_inner(&self) -> usize {
        self.transitions.len() - 1
    }

    /// Single-time marginals for all `N + 2` slices, chronological.
    pub fn slice_marginals(&self) -> Vec<Vec<f64>> {
        let step = |p: &[f64], t: &DMatrix<f64>| -> Vec<f64> {
            (DVector::from_column_slice(p).transpose() * t).iter().copied().collect()
        };
        let mut out = vec![self.initial.clone()];
        match self.direction {
            ChainDirection::Forward => {
                for t in &self.transitions {
                    let next = step(out.last().expect("non-empty"), t);
                    out.push(next);
                }
            }
            ChainDirection::Backward => {
                for t in self.transitions.iter().rev() {
                    let next = step(out.last().expect("non-empty"), t);
                    out.push(next);
                }
                out.reverse();
            }
        }
        out
    }

    /// Same path law, factorized forward.
    pub fn to_forward(&self) -> GridMarkovChain {
        if self.direction == ChainDirection::Forward {
            return self.clone();
        }
        let marg = self.slice_marginals();
        let s = self.n_states();
        let mut zero_rows = 0;
        let transitions = self
            .transitions
            .iter()
            .enumerate()
            .map(|(k, r)| {
                // pair(x, y) = marg_{k+1}(y) R[y, x]
                let pair = DMatrix::from_fn(s, s, |x, y| marg[k + 1][y] * r[(y, x)]);
                normalize_rows(&pair, &mut zero_rows)
            })
            .collect();
        if zero_rows > 0 {
            warn!("{zero_rows} zero-mass rows set to uniform while reversing a chain");
        }
        GridMarkovChain { direction: ChainDirection::Forward, initial: marg[0].clone(), transitions }
    }

    /// Law of `(x₀, x₁)`.
    pub fn coupling(&self) -> Result<GridCoupling> {
        let s = self.n_states();
        let pi = match self.direction {
            ChainDirection::Forward => {
                let prod = self.transitions.iter().skip(1).fold(self.transitions[0].clone(), |a, t| a * t);
                DMatrix::from_fn(s, s, |i, j| self.initial[i] * prod[(i, j)])
            }
            ChainDirection::Backward => {
                let prod = self.transitions.iter().rev().skip(1).fold(self.transitions[self.transitions.len() - 1].clone(), |a, t| a * t);
                DMatrix::from_fn(s, s, |i, j| self.initial[j] * prod[(j, i)])
            }
        };
        GridCoupling::new(renormalize(pi))
    }

    pub fn path_probability(&self, path: &[usize]) -> f64 {
        match self.direction {
            ChainDirection::Forward => {
                let mut p = self.initial[path[0]];
                for (n, t) in self.transitions.iter().enumerate() {
                    p *= t[(path[n], path[n + 1])];
                }
                p
            }
            ChainDirection::Backward => {
                let mut p = self.initial[*path.last().expect("non-empty path")];
                for (n, r) in self.transitions.iter().enumerate() {
                    p *= r[(path[n + 1], path[n])];
                }
                p
            }
        }
    }
}

/// Rescales a matrix whose entries should sum to one, absorbing round-off.
fn renormalize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let total = m.sum();
    if total > 0.0 {
        m /= total;
    }
    m
}

fn normalize_rows(pair: &DMatrix<f64>, zero_rows: &mut usize) -> DMatrix<f64> {
    let s = pair.ncols();
    let mut out = pair.clone();
    for mut row in out.row_iter_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            *zero_rows += 1;
            row.fill(1.0 / s as f64);
        }
    }
    out
}

/// A discrete process in either factorized form.
#[derive(Debug, Clone)]
pub enum GridProcess {
    Reciprocal(GridReciprocal),
    Markov(GridMarkovChain),
}

impl From<GridReciprocal> for GridProcess {
    fn from(r: GridReciprocal) -> Self {
        GridProcess::Reciprocal(r)
    }
}

impl From<GridMarkovChain> for GridProcess {
    fn from(m: GridMarkovChain) -> Self {
        GridProcess::Markov(m)
    }
}

impl GridProcess {
    pub fn n_states(&self) -> usize {
        match self {
            GridProcess::Reciprocal(r) => r.coupling.n_states(),
            GridProcess::Markov(m) => m.n_states(),
        }
    }

    pub fn n_inner(&self) -> usize {
        match self {
            GridProcess::Reciprocal(r) => r.kernels.grid.n_inner(),
            GridProcess::Markov(m) => m.n_inner(),
        }
    }

    pub fn coupling(&self) -> Result<GridCoupling> {
        match self {
            GridProcess::Reciprocal(r) => Ok(r.coupling.clone()),
            GridProcess::Markov(m) => m.coupling(),
        }
    }

    pub fn path_probability(&self, path: &[usize]) -> f64 {
        match self {
            GridProcess::Reciprocal(r) => r.path_probability(path),
            GridProcess::Markov(m) => m.path_probability(path),
        }
    }

    fn augmented(&self) -> AugmentedChain {
        match self {
            GridProcess::Reciprocal(r) => AugmentedChain::from_reciprocal(r),
            GridProcess::Markov(m) => AugmentedChain::from_markov(m),
        }
    }
}

/// Chain on `(xₙ, x₁)`: initial law over `(x₀, x₁)` and `N` kernels
/// `K_n[(x_prev, x₁), x_next]`, stored flat as `[(x_prev·S + x₁)·S + x_next]`.
struct AugmentedChain {
    s: usize,
    init: DMatrix<f64>,
    steps: Vec<Vec<f64>>,
}

impl AugmentedChain {
    fn from_reciprocal(r: &GridReciprocal) -> Self {
        Self { s: r.coupling.n_states(), init: r.coupling.pi.clone(), steps: r.kernels.kernels.clone() }
    }

    fn from_markov(m: &GridMarkovChain) -> Self {
        let m = m.to_forward();
        let s = m.n_states();
        let n_trans = m.transitions.len();
        // h[n](y, x1) = P(x₁ | xₙ = y), n = 0..=N+1
        let mut h = vec![DMatrix::identity(s, s); n_trans + 1];
        for n in (0..n_trans).rev() {
            h[n] = &m.transitions[n] * &h[n + 1];
        }
        let init = DMatrix::from_fn(s, s, |x0, x1| m.initial[x0] * h[0][(x0, x1)]);
        let steps = (1..n_trans)
            .map(|n| {
                let t = &m.transitions[n - 1];
                let mut k = vec![0.0; s * s * s];
                for x in 0..s {
                    for x1 in 0..s {
                        let row = &mut k[(x * s + x1) * s..(x * s + x1 + 1) * s];
                        let denom = h[n - 1][(x, x1)];
                        if denom > 0.0 {
                            for (y, r) in row.iter_mut().enumerate() {
                                *r = t[(x, y)] * h[n][(y, x1)] / denom;
                            }
                        } else {
                            // unreachable augmented state; never weighted
                            row.fill(1.0 / s as f64);
                        }
                    }
                }
                k
            })
            .collect();
        Self { s, init, steps }
    }

    fn row(&self, n: usize, x: usize, x1: usize) -> &[f64] {
        let s = self.s;
        &self.steps[n - 1][(x * s + x1) * s..(x * s + x1 + 1) * s]
    }

    /// `γₙ(xₙ, x₁)` for `n = 0..=N`.
    fn state_marginals(&self) -> Vec<DMatrix<f64>> {
        let s = self.s;
        let mut out = vec![self.init.clone()];
        for n in 1..=self.steps.len() {
            let prev = out.last().expect("non-empty");
            let mut next = DMatrix::zeros(s, s);
            for x in 0..s {
                for x1 in 0..s {
                    let w = prev[(x, x1)];
                    if w == 0.0 {
                        continue;
                    }
                    for (y, k) in self.row(n, x, x1).iter().enumerate() {
                        next[(y, x1)] += w * k;
                    }
                }
            }
            out.push(next);
        }
        out
    }

    /// Consecutive pairwise marginals `q(xₙ₋₁, xₙ)`, `n = 1..=N+1`.
    fn pair_marginals(&self, gammas: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let s = self.s;
        let n_inner = self.steps.len();
        let mut out = Vec::with_capacity(n_inner + 1);
        for n in 1..=n_inner {
            let g = &gammas[n - 1];
            let mut pair = DMatrix::zeros(s, s);
            for x in 0..s {
                for x1 in 0..s {
                    let w = g[(x, x1)];
                    if w == 0.0 {
                        continue;
                    }
                    for (y, k) in self.row(n, x, x1).iter().enumerate() {
                        pair[(x, y)] += w * k;
                    }
                }
            }
            out.push(pair);
        }
        out.push(gammas[n_inner].clone());
        out
    }
}

/// Markovian projection: keeps every consecutive pairwise marginal and
/// factorizes forward from `x₀` or backward from `x₁`.
pub fn grid_markovian_projection(process: &GridProcess, direction: ChainDirection) -> Result<GridMarkovChain> {
    let aug = process.augmented();
    let gammas = aug.state_marginals();
    let pairs = aug.pair_marginals(&gammas);
    let s = aug.s;
    let mut zero_rows = 0;
    let chain = match direction {
        ChainDirection::Forward => {
            let initial: Vec<f64> = gammas[0].row_iter().map(|r| r.sum()).collect();
            let transitions = pairs.iter().map(|p| normalize_rows(p, &mut zero_rows)).collect();
            GridMarkovChain { direction, initial, transitions }
        }
        ChainDirection::Backward => {
            let last = pairs.last().expect("at least one interval");
            let initial: Vec<f64> = last.column_iter().map(|c| c.sum()).collect();
            let transitions = pairs.iter().map(|p| normalize_rows(&p.transpose(), &mut zero_rows)).collect();
            GridMarkovChain { direction, initial, transitions }
        }
    };
    if zero_rows > 0 {
        warn!("Markovian projection: {zero_rows} zero-mass rows set to uniform");
    }
    debug_assert_eq!(chain.initial.len(), s);
    Ok(chain)
}

fn check_compatible(p: &GridProcess, q: &GridProcess) -> Result<()> {
    if p.n_states() != q.n_states() {
        return Err(Error::DimensionMismatch { expected: p.n_states(), actual: q.n_states() });
    }
    if p.n_inner() != q.n_inner() {
        return Err(Error::DimensionMismatch { expected: p.n_inner(), actual: q.n_inner() });
    }
    Ok(())
}

/// Path-space `KL(p ‖ q)` by the chain rule over the augmented chains.
pub fn grid_kl_factored(p: &GridProcess, q: &GridProcess) -> Result<f64> {
    check_compatible(p, q)?;
    let (ap, aq) = (p.augmented(), q.augmented());
    let gammas = ap.state_marginals();
    let mut kl = discrete_kl(ap.init.as_slice(), aq.init.as_slice())?;
    for n in 1..=ap.steps.len() {
        let g = &gammas[n - 1];
        for x in 0..ap.s {
            for x1 in 0..ap.s {
                let w = g[(x, x1)];
                if w > 0.0 {
                    kl += w * discrete_kl(ap.row(n, x, x1), aq.row(n, x, x1))?;
                }
            }
        }
    }
    Ok(kl)
}

/// Path-space `KL(p ‖ q)` by summing over all `S^{N+2}` paths.
pub fn grid_kl_enumerated(p: &GridProcess, q: &GridProcess) -> Result<f64> {
    check_compatible(p, q)?;
    let s = p.n_states();
    let len = p.n_inner() + 2;
    let mut path = vec![0usize; len];
    let mut kl = 0.0;
    loop {
        let a = p.path_probability(&path);
        if a > 0.0 {
            let b = q.path_probability(&path);
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuity(format!("path {path:?} has no reference mass")));
            }
            kl += a * (a / b).ln();
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == len {
                return Ok(kl);
            }
            path[k] += 1;
            if path[k] < s {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

/// Path-space KL: exact enumeration up to [`ENUMERATION_LIMIT`] paths, chain rule beyond.
pub fn grid_kl(p: &GridProcess, q: &GridProcess) -> Result<f64> {
    check_compatible(p, q)?;
    let paths = (p.n_states() as f64).powi(p.n_inner() as i32 + 2);
    if paths <= ENUMERATION_LIMIT as f64 {
        grid_kl_enumerated(p, q)
    } else {
        grid_kl_factored(p, q)
    }
}

#[derive(Debug, Clone)]
pub struct GridDimfOptions {
    pub max_outer_iters: usize,
    /// Stop once the coupling is this close to the oracle in TV.
    pub tv_threshold: f64,
    pub oracle: GridCoupling,
}

impl GridDimfOptions {
    pub fn new(oracle: GridCoupling) -> Self {
        Self { max_outer_iters: 500, tv_threshold: 1e-10, oracle }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridTraceRecord {
    pub iter: usize,
    pub tv_to_oracle: f64,
    pub kl_to_oracle: f64,
    pub kl_step: f64,
}

#[derive(Debug, Clone)]
pub struct GridDimfResult {
    pub coupling: GridCoupling,
    pub records: Vec<GridTraceRecord>,
    pub initial_tv: f64,
    pub initial_kl: f64,
    pub converged: bool,
    /// Markov chain produced by the last (backward) projection.
    pub last_chain: GridMarkovChain,
}

impl GridDimfResult {
    /// KL-to-oracle records as a [`ConvergenceTrace`].
    pub fn kl_trace(&self) -> ConvergenceTrace {
        let mut t = ConvergenceTrace::new();
        for r in &self.records {
            t.push(r.kl_to_oracle, r.kl_step, 0.0);
        }
        t
    }
}

/// Builds the bridge kernels and runs [`grid_dimf_run_with_kernels`].
pub fn grid_dimf_run(
    p0: &[f64],
    p1: &[f64],
    init: &GridCoupling,
    space: &GridSpace,
    grid: &TimeGrid,
    epsilon: f64,
    opts: &GridDimfOptions,
) -> Result<GridDimfResult> {
    let kernels = Arc::new(build_bridge_kernels(space, grid, epsilon)?);
    grid_dimf_run_with_kernels(p0, p1, init, &kernels, opts)
}

/// One outer iteration: reciprocal projection, forward Markovian projection,
/// reciprocal projection, backward Markovian projection.
pub fn grid_dimf_run_with_kernels(
    p0: &[f64],
    p1: &[f64],
    init: &GridCoupling,
    kernels: &Arc<GridBridgeKernels>,
    opts: &GridDimfOptions,
) -> Result<GridDimfResult> {
    let s = kernels.n_states();
    for (name, n) in [("init", init.n_states()), ("oracle", opts.oracle.n_states()), ("p0", p0.len()), ("p1", p1.len())] {
        if n != s {
            warn!("{name} has {n} states, kernels have {s}");
            return Err(Error::DimensionMismatch { expected: s, actual: n });
        }
    }
    let dev = init.marginal_deviation(p0, p1);
    if dev > 1e-10 {
        return Err(Error::MarginalMismatch(format!("initial coupling deviates from (p0, p1) by {dev:e}")));
    }
    let oracle = &opts.oracle;
    let initial_tv = init.tv(oracle);
    let initial_kl = init.kl(oracle)?;
    let mut current = init.clone();
    let mut records = Vec::new();
    let mut converged = false;
    let mut last_chain = None;
    for iter in 0..opts.max_outer_iters {
        let r = grid_reciprocal_projection(&current, kernels)?;
        let fwd = grid_markovian_projection(&r.into(), ChainDirection::Forward)?;
        let r = grid_reciprocal_projection(&fwd.coupling()?, kernels)?;
        let bwd = grid_markovian_projection(&r.into(), ChainDirection::Backward)?;
        let next = bwd.coupling()?;
        let rec = GridTraceRecord {
            iter,
            tv_to_oracle: next.tv(oracle),
            kl_to_oracle: next.kl(oracle)?,
            kl_step: next.kl(&current)?,
        };
        records.push(rec);
        current = next;
        last_chain = Some(bwd);
        if rec.tv_to_oracle < opts.tv_threshold {
            converged = true;
            break;
        }
    }
    let last_chain = match last_chain {
        Some(c) => c,
        None => grid_markovian_projection(&grid_reciprocal_projection(&current, kernels)?.into(), ChainDirection::Backward)?,
    };
    Ok(GridDimfResult { coupling: current, records, initial_tv, initial_kl, converged, last_chain })
}
