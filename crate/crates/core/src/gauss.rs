//! Multivariate Gaussian algebra: marginals, Schur-complement conditionals,
//! KL divergence, Bures-Wasserstein metrics and sampling.
//!
//! Covariances are symmetrized at every construction site. Anything that
//! inverts a covariance goes through [`linalg::cholesky_pd`], which retries once
//! with a `1e-12·I` jitter before reporting the matrix as degenerate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// A multivariate normal distribution `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, symmetrizing `cov` and checking it is PSD.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let g = Self::new_unchecked(mean, cov)?;
        linalg::check_psd(&g.cov)?;
        Ok(g)
    }

    /// Like [`Gaussian::new`] but skips the eigenvalue PSD check. The
    /// covariance is still symmetrized and shape-checked.
    pub(crate) fn new_unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Gaussian parameter".into()));
        }
        Ok(Self { mean, cov: linalg::symmetrize(&cov) })
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: DVector::zeros(d), cov: DMatrix::identity(d, d) }
    }

    /// Isotropic Gaussian `N(mean, variance·I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative variance {variance}")));
        }
        let d = mean.len();
        Ok(Self { mean, cov: DMatrix::identity(d, d) * variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> Result<f64> {
        let chol = linalg::cholesky_pd(&self.cov, "entropy")?;
        let d = self.dim() as f64;
        Ok(0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5 * linalg::log_det(&chol))
    }

    pub fn kl(&self, other: &Gaussian) -> Result<f64> {
        gaussian_kl(self, other)
    }

    pub fn marginal(&self, block: &BlockIndex) -> Result<Gaussian> {
        marginal(self, block)
    }

    pub fn condition(&self, observed: &BlockIndex, value: &DVector<f64>) -> Result<Gaussian> {
        condition(self, observed, value)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<DMatrix<f64>> {
        sample(self, rng, n)
    }
}

/// Selection of variable blocks `(start, length)` inside a joint Gaussian.
///
/// Blocks may be listed in any order; the gathered coordinates follow the
/// listed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    blocks: Vec<(usize, usize)>,
}

impl BlockIndex {
    pub fn new(blocks: Vec<(usize, usize)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidBlock("no blocks".into()));
        }
        if let Some(b) = blocks.iter().find(|b| b.1 == 0) {
            return Err(Error::InvalidBlock(format!("empty block at offset {}", b.0)));
        }
        let mut sorted = blocks.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(Error::InvalidBlock(format!("blocks {:?} and {:?} overlap", w[0], w[1])));
            }
        }
        Ok(Self { blocks })
    }

    /// A single contiguous block.
    pub fn range(start: usize, len: usize) -> Result<Self> {
        Self::new(vec![(start, len)])
    }

    /// Time-slice blocks `slices` of width `width` each.
    pub fn slices(slices: &[usize], width: usize) -> Result<Self> {
        Self::new(slices.iter().map(|&s| (s * width, width)).collect())
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Flattened coordinate indices.
    pub fn indices(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|&(s, l)| s..s + l).collect()
    }

    /// Checks every block lies inside `0..dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.blocks.iter().find(|&&(s, l)| s + l > dim) {
            Some(b) => Err(Error::InvalidBlock(format!("block {b:?} out of range for dimension {dim}"))),
            None => Ok(()),
        }
    }

    /// Coordinates of `0..dim` not covered by this index, ascending.
    pub fn complement(&self, dim: usize) -> Vec<usize> {
        let mut taken = vec![false; dim];
        for i in self.indices() {
            taken[i] = true;
        }
        (0..dim).filter(|&i| !taken[i]).collect()
    }
}

pub(crate) fn gather_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub(crate) fn gather_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// `KL(p ‖ q)` in nats.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), actual: q.dim() });
    }
    let chol_p = linalg::cholesky_pd(&p.cov, "KL: first argument")?;
    let chol_q = linalg::cholesky_pd(&q.cov, "KL: second argument")?;
    let d = p.dim() as f64;
    let trace = chol_q.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    let kl = 0.5 * (trace + maha - d + linalg::log_det(&chol_q) - linalg::log_det(&chol_p));
    Ok(kl.max(0.0))
}

pub fn marginal(joint: &Gaussian, block: &BlockIndex) -> Result<Gaussian> {
    block.validate(joint.dim())?;
    let idx = block.indices();
    Ok(Gaussian {
        mean: gather_vector(&joint.mean, &idx),
        cov: gather_matrix(&joint.cov, &idx, &idx),
    })
}

/// Conditional law of the unobserved coordinates given `observed = value`.
///
/// The result lives on the complement of `observed`, in ascending coordinate
/// order.
pub fn condition(joint: &Gaussian, observed: &BlockIndex, value: &DVector<f64>) -> Result<Gaussian> {
    observed.validate(joint.dim())?;
    let b = observed.indices();
    if value.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: b.len(), actual: value.len() });
    }
    let a = observed.complement(joint.dim());
    let s_bb = gather_matrix(&joint.cov, &b, &b);
    let s_ab = gather_matrix(&joint.cov, &a, &b);
    let s_aa = gather_matrix(&joint.cov, &a, &a);
    let chol = linalg::cholesky_pd(&s_bb, "condition: observed block")?;
    // gain = Σab Σbb⁻¹, computed as (Σbb⁻¹ Σba)ᵀ
    let gain = chol.solve(&s_ab.transpose()).transpose();
    let resid = value - gather_vector(&joint.mean, &b);
    let mean = gather_vector(&joint.mean, &a) + &gain * resid;
    let cov = s_aa - &gain * s_ab.transpose();
    Gaussian::new_unchecked(mean, cov)
}

/// Draws `n` samples as the rows of an `n × d` matrix.
pub fn sample<R: Rng + ?Sized>(g: &Gaussian, rng: &mut R, n: usize) -> Result<DMatrix<f64>> {
    let chol = linalg::cholesky(&g.cov, "sample")?;
    let l = chol.l();
    let d = g.dim();
    let mut out = DMatrix::zeros(n, d);
    let mut z = DVector::zeros(d);
    for r in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let x = &g.mean + &l * &z;
        out.row_mut(r).copy_from(&x.transpose());
    }
    Ok(out)
}

/// Bures-Wasserstein comparison of two Gaussians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bw2Metrics {
    /// Squared 2-Wasserstein distance.
    pub bw2_squared: f64,
    /// `bw2_squared` relative to half the total variance of the reference, in percent.
    pub uvp_percent: f64,
}

/// BW₂² and BW₂²-UVP of `q` relative to the reference `p`.
pub fn bw2_metrics(p: &Gaussian, q: &Gaussian) -> Result<Bw2Metrics> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), actual: q.dim() });
    }
    linalg::check_psd(&p.cov)?;
    linalg::check_psd(&q.cov)?;
    let root_p = linalg::sqrtm_psd(&p.cov);
    let cross = linalg::sqrtm_psd(&(&root_p * &q.cov * &root_p));
    let mean_term = (&p.mean - &q.mean).norm_squared();
    let bw2 = (mean_term + p.cov.trace() + q.cov.trace() - 2.0 * cross.trace()).max(0.0);
    let half_var = 0.5 * p.cov.trace();
    let uvp = if half_var > 0.0 { 100.0 * bw2 / half_var } else { f64::INFINITY };
    Ok(Bw2Metrics { bw2_squared: bw2, uvp_percent: uvp })
}
