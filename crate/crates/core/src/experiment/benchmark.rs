//! Seeded benchmark problems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gauss::Gaussian;

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix with
/// the signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Centered Gaussian with a random eigenbasis and eigenvalues `exp(U[−ln 2, ln 2])`.
pub fn random_benchmark_gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> (Gaussian, DMatrix<f64>, Vec<f64>) {
    let q = random_orthogonal(rng, dim);
    let ln2 = std::f64::consts::LN_2;
    let eig: Vec<f64> = (0..dim).map(|_| rng.random_range(-ln2..=ln2).exp()).collect();
    let cov = &q * DMatrix::from_diagonal(&DVector::from_column_slice(&eig)) * q.transpose();
    let g = Gaussian::new(DVector::zeros(dim), cov).expect("eigenvalues in [0.5, 2] give a PD covariance");
    (g, q, eig)
}

/// The benchmark pair for `seed`: `p₀` is drawn first, then `p₁`, from one ChaCha8 stream.
pub fn make_benchmark_gaussians(dim: usize, seed: u64) -> Result<(Gaussian, Gaussian)> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p0, _, _) = random_benchmark_gaussian(&mut rng, dim);
    let (p1, _, _) = random_benchmark_gaussian(&mut rng, dim);
    Ok((p0, p1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_in_range_and_orthonormal_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (g, q, eig) = random_benchmark_gaussian(&mut rng, 16);
        assert!(eig.iter().all(|&l| (0.5..=2.0).contains(&l)));
        assert!((q.transpose() * &q - DMatrix::identity(16, 16)).amax() < 1e-12);
        let spectrum = g.cov().clone().symmetric_eigenvalues();
        assert!(spectrum.iter().all(|&l| (0.5 - 1e-12..=2.0 + 1e-12).contains(&l)));
    }

    #[test]
    fn centered_and_deterministic() {
        let (a0, a1) = make_benchmark_gaussians(8, 3).unwrap();
        let (b0, b1) = make_benchmark_gaussians(8, 3).unwrap();
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
        assert!(a0.mean().iter().all(|&m| m == 0.0));
        assert_ne!(a0, a1);
        assert!(make_benchmark_gaussians(0, 0).is_err());
    }
}
