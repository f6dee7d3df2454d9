use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbridge_core::bridge::TimeGrid;
use sbridge_core::dimf_gauss::*;
use sbridge_core::experiment::benchmark::random_benchmark_gaussian;
use sbridge_core::gauss::{BlockIndex, Gaussian};
use sbridge_core::grid::*;
use sbridge_core::linalg::max_abs_diff;
use sbridge_core::oracle::{gaussian_sb_plan, grid_sinkhorn};

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Gaussian {
    random_benchmark_gaussian(rng, d).0
}

/// A coupling of two benchmark Gaussians with a random contractive cross-covariance.
fn random_coupling(rng: &mut ChaCha8Rng, d: usize) -> GaussianCoupling {
    let (p0, p1) = (gaussian(rng, d), gaussian(rng, d));
    let l0 = p0.cov().clone().cholesky().unwrap().l();
    let l1 = p1.cov().clone().cholesky().unwrap().l();
    let k = DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let k = &k * (0.9 / k.norm().max(1e-12));
    let cross = &l0 * k * l1.transpose();
    GaussianCoupling::from_blocks(p0.mean(), p1.mean(), p0.cov(), p1.cov(), &cross).unwrap()
}

fn random_inner_times(rng: &mut ChaCha8Rng, n: usize) -> TimeGrid {
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    TimeGrid::from_inner(&t).unwrap()
}

fn random_pmf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn max_vec_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_gauss_diff(a: &Gaussian, b: &Gaussian) -> f64 {
    max_abs_diff(a.cov(), b.cov()).max((a.mean() - b.mean()).amax())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gaussian_kl_is_nonnegative(seed: u64, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (gaussian(&mut rng, d), gaussian(&mut rng, d));
        prop_assert!(p.kl(&q).unwrap() >= -1e-12);
        prop_assert!(p.kl(&p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn conditioning_at_the_mean_is_the_schur_complement(seed: u64, d in 2usize..7, k in 1usize..6) {
        let k = k.min(d - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian(&mut rng, d);
        let observed = BlockIndex::range(0, k).unwrap();
        let rest = BlockIndex::range(k, d - k).unwrap();
        let x = DVector::from_iterator(k, g.mean().iter().take(k).copied());
        let cond = g.condition(&observed, &x).unwrap();
        let marg = g.marginal(&rest).unwrap();
        prop_assert!((cond.mean() - marg.mean()).amax() < 1e-10);

        let s = g.cov();
        let soo = s.view((0, 0), (k, k)).into_owned();
        let sro = s.view((k, 0), (d - k, k)).into_owned();
        let schur = marg.cov() - &sro * soo.try_inverse().unwrap() * sro.transpose();
        prop_assert!(max_abs_diff(cond.cov(), &schur) < 1e-9);
        prop_assert!(cond.cov().trace() <= marg.cov().trace() + 1e-12);
    }

    #[test]
    fn reciprocal_projection_keeps_the_coupling(seed: u64, d in 1usize..5, n in 1usize..6, eps in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_coupling(&mut rng, d);
        let grid = random_inner_times(&mut rng, n);
        let back = reciprocal_projection(&c, &grid, eps).unwrap().coupling().unwrap();
        prop_assert!(max_abs_diff(back.cov(), c.cov()) < 1e-10);
        prop_assert!((back.mean() - c.mean()).amax() < 1e-12);
    }

    #[test]
    fn gaussian_markovian_projection_keeps_slice_marginals(seed: u64, d in 1usize..5, n in 1usize..7, eps in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_coupling(&mut rng, d);
        let grid = random_inner_times(&mut rng, n);
        let joint = reciprocal_projection(&c, &grid, eps).unwrap();
        let (chain, coupling) = markovian_projection(&joint).unwrap();
        for (i, m) in chain.slice_marginals().iter().enumerate() {
            prop_assert!(max_gauss_diff(m, &joint.slice_marginal(i)) < 1e-10, "slice {}", i);
        }
        prop_assert!(max_gauss_diff(&coupling.marginal0(), &c.marginal0()) < 1e-10);
        prop_assert!(max_gauss_diff(&coupling.marginal1(), &c.marginal1()) < 1e-10);
        let again = markovian_projection(&chain_to_joint(&chain)).unwrap().1;
        prop_assert!(max_abs_diff(again.cov(), coupling.cov()) < 1e-10);
    }

    #[test]
    fn gaussian_sb_plan_is_a_fixed_point(seed: u64, d in 1usize..5, n in 1usize..5, eps in 0.3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p0, p1) = (gaussian(&mut rng, d), gaussian(&mut rng, d));
        let plan = gaussian_sb_plan(&p0, &p1, eps).unwrap();
        let grid = TimeGrid::uniform(n).unwrap();
        let (_, next) = markovian_projection(&ReciprocalGaussianProcess::new(&plan, &grid, eps).unwrap()).unwrap();
        prop_assert!(next.kl(&plan).unwrap() < 1e-10);
    }

    #[test]
    fn gaussian_dimf_iterates_keep_marginals_and_descend(seed: u64, d in 1usize..4, n in 1usize..5, eps in 0.5f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p0, p1) = (gaussian(&mut rng, d), gaussian(&mut rng, d));
        let plan = gaussian_sb_plan(&p0, &p1, eps).unwrap();
        let init = GaussianCoupling::independent(&p0, &p1).unwrap();
        let mut opts = DimfOptions::new(plan);
        opts.max_iters = 5;
        let res = dimf_run(&p0, &p1, &init, &TimeGrid::uniform(n).unwrap(), eps, &opts).unwrap();
        prop_assert!(res.coupling.marginal_deviation(&p0, &p1).unwrap() < 1e-9);
        prop_assert!(res.trace.is_monotone(res.initial_kl, 1e-12));
    }

    #[test]
    fn grid_reciprocal_projection_keeps_the_coupling(seed: u64, s in 2usize..7, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = GridSpace::uniform_1d(s, -1.0, 1.0).unwrap();
        let eps = rng.random_range(0.3..2.0);
        let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(n).unwrap(), eps).unwrap());
        let pi = GridCoupling::new(DMatrix::from_vec(s, s, random_pmf(&mut rng, s * s))).unwrap();
        let proc: GridProcess = grid_reciprocal_projection(&pi, &kernels).unwrap().into();
        prop_assert!(proc.coupling().unwrap().tv(&pi) < 1e-12);
    }

    #[test]
    fn grid_markovian_projection_is_stochastic_and_keeps_slices(seed: u64, s in 2usize..7, n in 1usize..4, backward: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = GridSpace::uniform_1d(s, -1.0, 1.0).unwrap();
        let eps = rng.random_range(0.3..2.0);
        let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(n).unwrap(), eps).unwrap());
        let pi = GridCoupling::new(DMatrix::from_vec(s, s, random_pmf(&mut rng, s * s))).unwrap();
        let proc: GridProcess = grid_reciprocal_projection(&pi, &kernels).unwrap().into();
        let dir = if backward { ChainDirection::Backward } else { ChainDirection::Forward };
        let chain = grid_markovian_projection(&proc, dir).unwrap();
        for t in chain.transitions() {
            for row in t.row_iter() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let fwd = grid_markovian_projection(&proc, ChainDirection::Forward).unwrap();
        for (a, b) in chain.slice_marginals().iter().zip(fwd.slice_marginals().iter()) {
            prop_assert!(max_vec_diff(a, b) < 1e-12);
        }
        let q = chain.coupling().unwrap();
        prop_assert!(max_vec_diff(&q.marginal0(), &pi.marginal0()) < 1e-12);
        prop_assert!(max_vec_diff(&q.marginal1(), &pi.marginal1()) < 1e-12);
        prop_assert!(grid_kl(&proc, &GridProcess::from(chain)).unwrap() >= -1e-12);
    }

    #[test]
    fn discrete_kl_is_nonnegative(seed: u64, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (random_pmf(&mut rng, n), random_pmf(&mut rng, n));
        prop_assert!(discrete_kl(&p, &q).unwrap() >= -1e-15);
        prop_assert!(discrete_kl(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_matches_marginals(seed: u64, s in 2usize..30, eps in 0.05f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = GridSpace::uniform_1d(s, -2.0, 2.0).unwrap();
        let (p0, p1) = (random_pmf(&mut rng, s), random_pmf(&mut rng, s));
        let pi = grid_sinkhorn(&p0, &p1, &space, eps, 1e-13).unwrap();
        prop_assert!(pi.marginal_deviation(&p0, &p1) < 1e-12);
    }
}
