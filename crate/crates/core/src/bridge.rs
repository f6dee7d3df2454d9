//! Discrete Brownian bridge: time grids, the interpolation/covariance
//! operators `U` and `K`, one-step bridge transitions and path samplers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gauss::Gaussian;

/// Time grid `0 = t₀ < t₁ < … < t_N < t_{N+1} = 1` with `N ≥ 1` inner points.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid `tₙ = n / (N + 1)`.
    pub fn uniform(n_inner: usize) -> Result<Self> {
        if n_inner == 0 {
            return Err(Error::InvalidGrid("need at least one inner time".into()));
        }
        let m = (n_inner + 1) as f64;
        let mut times: Vec<f64> = (0..=n_inner + 1).map(|n| n as f64 / m).collect();
        times[n_inner + 1] = 1.0;
        Ok(Self { times })
    }

    /// Grid with the given inner times; endpoints 0 and 1 are added.
    pub fn from_inner(inner: &[f64]) -> Result<Self> {
        if inner.is_empty() {
            return Err(Error::InvalidGrid("need at least one inner time".into()));
        }
        let mut times = Vec::with_capacity(inner.len() + 2);
        times.push(0.0);
        times.extend_from_slice(inner);
        times.push(1.0);
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid(format!("times must be strictly increasing in (0, 1): {inner:?}")));
        }
        Ok(Self { times })
    }

    /// All `N + 2` times including both endpoints.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn inner_times(&self) -> &[f64] {
        &self.times[1..self.times.len() - 1]
    }

    /// Number of inner times `N`.
    pub fn n_inner(&self) -> usize {
        self.times.len() - 2
    }

    pub fn n_slices(&self) -> usize {
        self.times.len()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")))
    }
}

/// The `U` (ND×2D) and `K` (ND×ND) matrices of the Gaussian reciprocal projection.
#[derive(Debug, Clone)]
pub struct BridgeOperators {
    pub u: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub epsilon: f64,
    pub dim: usize,
}

pub fn build_operators(grid: &TimeGrid, dim: usize, epsilon: f64) -> Result<BridgeOperators> {
    check_epsilon(epsilon)?;
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let inner = grid.inner_times();
    let n = inner.len();
    let mut u = DMatrix::zeros(n * dim, 2 * dim);
    let mut k = DMatrix::zeros(n * dim, n * dim);
    for (a, &ta) in inner.iter().enumerate() {
        for c in 0..dim {
            u[(a * dim + c, c)] = 1.0 - ta;
            u[(a * dim + c, dim + c)] = ta;
        }
        for (b, &tb) in inner.iter().enumerate() {
            let v = ta.min(tb) * (1.0 - ta.max(tb));
            for c in 0..dim {
                k[(a * dim + c, b * dim + c)] = v;
            }
        }
    }
    Ok(BridgeOperators { u, k, epsilon, dim })
}

/// Scalar parameters of one bridge transition `t_prev → t_next` towards `x₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeStep {
    pub mean_slope: f64,
    pub variance: f64,
}

impl BridgeStep {
    pub fn new(t_prev: f64, t_next: f64, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !(0.0..1.0).contains(&t_prev) || t_next <= t_prev || t_next > 1.0 {
            return Err(Error::InvalidGrid(format!("invalid bridge step {t_prev} -> {t_next}")));
        }
        let span = 1.0 - t_prev;
        let dt = t_next - t_prev;
        Ok(Self { mean_slope: dt / span, variance: epsilon * dt * (1.0 - t_next) / span })
    }

    pub fn mean(&self, x_prev: &DVector<f64>, x1: &DVector<f64>) -> DVector<f64> {
        x_prev + (x1 - x_prev) * self.mean_slope
    }
}

/// Transition law of the bridge from `x_prev` at `t_prev` to time `t_next`.
pub fn bridge_step(x_prev: &DVector<f64>, x1: &DVector<f64>, t_prev: f64, t_next: f64, epsilon: f64) -> Result<Gaussian> {
    if x_prev.len() != x1.len() {
        return Err(Error::DimensionMismatch { expected: x_prev.len(), actual: x1.len() });
    }
    let step = BridgeStep::new(t_prev, t_next, epsilon)?;
    Gaussian::isotropic(step.mean(x_prev, x1), step.variance)
}

/// Samples `x₀, x_{t₁}, …, x_{t_N}, x₁` from the bridge pinned at both ends.
pub fn sample_bridge_path<R: Rng + ?Sized>(
    x0: &DVector<f64>,
    x1: &DVector<f64>,
    grid: &TimeGrid,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    if x0.len() != x1.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), actual: x1.len() });
    }
    let times = grid.times();
    let mut path = Vec::with_capacity(times.len());
    path.push(x0.clone());
    for w in times[..times.len() - 1].windows(2) {
        let step = BridgeStep::new(w[0], w[1], epsilon)?;
        let prev = path.last().expect("path starts with x0");
        let sd = step.variance.sqrt();
        let mut next = step.mean(prev, x1);
        for v in next.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
        path.push(next);
    }
    path.push(x1.clone());
    Ok(path)
}

/// Draws an endpoint pair from `coupling_sampler`, then a bridge path between them.
pub fn reciprocal_sample<R, F>(
    mut coupling_sampler: F,
    dim: usize,
    grid: &TimeGrid,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> (DVector<f64>, DVector<f64>),
{
    let (x0, x1) = coupling_sampler(rng);
    for x in [&x0, &x1] {
        if x.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: x.len() });
        }
    }
    sample_bridge_path(&x0, &x1, grid, epsilon, rng)
}
