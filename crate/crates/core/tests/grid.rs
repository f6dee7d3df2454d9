use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbridge_core::bridge::TimeGrid;
use sbridge_core::grid::*;
use sbridge_core::oracle::grid_reference_sinkhorn;

fn random_pmf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn random_coupling(rng: &mut ChaCha8Rng, s: usize) -> GridCoupling {
    GridCoupling::new(DMatrix::from_vec(s, s, random_pmf(rng, s * s))).unwrap()
}

fn random_markov(rng: &mut ChaCha8Rng, s: usize, n_inner: usize) -> GridMarkovChain {
    let transitions = (0..=n_inner)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..s).map(|_| random_pmf(rng, s)).collect();
            DMatrix::from_fn(s, s, |i, j| rows[i][j])
        })
        .collect();
    GridMarkovChain::new(ChainDirection::Forward, random_pmf(rng, s), transitions).unwrap()
}

struct Instance {
    kernels: Arc<GridBridgeKernels>,
}

fn instance(rng: &mut ChaCha8Rng, s: usize, n_inner: usize) -> Instance {
    let space = GridSpace::uniform_1d(s, -1.5, 1.5).unwrap();
    let eps = rng.random_range(0.3..2.0);
    let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(n_inner).unwrap(), eps).unwrap());
    Instance { kernels }
}

fn reciprocal(inst: &Instance, pi: &GridCoupling) -> GridProcess {
    grid_reciprocal_projection(pi, &inst.kernels).unwrap().into()
}

/// Brownian density of the path `x0 → y → x1` through `t = ½`, up to a constant.
fn reference_path_weight(space: &GridSpace, eps: f64, path: [usize; 3]) -> f64 {
    let x = |i: usize| space.point(i)[0];
    let step = |a: f64, b: f64| (-(a - b).powi(2) / (2.0 * eps * 0.5)).exp();
    step(x(path[0]), x(path[1])) * step(x(path[1]), x(path[2]))
}

#[test]
fn two_state_paths_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let space = GridSpace::new(1, &[vec![-1.0], vec![0.5]]).unwrap();
    let eps = 0.8;
    let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(1).unwrap(), eps).unwrap());
    let pi = random_coupling(&mut rng, 2);
    let proc: GridProcess = grid_reciprocal_projection(&pi, &kernels).unwrap().into();

    let mut paths = Vec::new();
    for x0 in 0..2 {
        for x1 in 0..2 {
            let z: f64 = (0..2).map(|y| reference_path_weight(&space, eps, [x0, y, x1])).sum();
            for y in 0..2 {
                let p = pi.pi()[(x0, x1)] * reference_path_weight(&space, eps, [x0, y, x1]) / z;
                paths.push(([x0, y, x1], p));
            }
        }
    }
    for (path, p) in &paths {
        assert!((proc.path_probability(path) - p).abs() < 1e-15);
    }

    let chain = grid_markovian_projection(&proc, ChainDirection::Forward).unwrap();
    let mut pair0 = DMatrix::<f64>::zeros(2, 2);
    let mut pair1 = DMatrix::<f64>::zeros(2, 2);
    for ([x0, y, x1], p) in &paths {
        pair0[(*x0, *y)] += p;
        pair1[(*y, *x1)] += p;
    }
    for (pair, t) in [pair0, pair1].iter().zip(chain.transitions()) {
        for i in 0..2 {
            let row = pair.row(i).sum();
            for j in 0..2 {
                assert!((t[(i, j)] - pair[(i, j)] / row).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn reciprocal_projection_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = instance(&mut rng, 5, 2);
    let pi = random_coupling(&mut rng, 5);
    let once = reciprocal(&inst, &pi);
    let twice = reciprocal(&inst, &once.coupling().unwrap());
    assert_eq!(once.coupling().unwrap(), pi);
    assert!(grid_kl(&once, &twice).unwrap().abs() < 1e-14);
}

#[test]
fn markovian_projection_of_markov_chain_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_markov(&mut rng, 4, 2);
    let back = grid_markovian_projection(&m.clone().into(), ChainDirection::Forward).unwrap();
    assert!((back.initial().iter().zip(m.initial()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)) < 1e-14);
    for (a, b) in back.transitions().iter().zip(m.transitions()) {
        assert!((a - b).amax() < 1e-13);
    }
}

#[test]
fn forward_and_backward_chains_share_the_path_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = instance(&mut rng, 4, 2);
    let r = reciprocal(&inst, &random_coupling(&mut rng, 4));
    let f: GridProcess = grid_markovian_projection(&r, ChainDirection::Forward).unwrap().into();
    let b: GridProcess = grid_markovian_projection(&r, ChainDirection::Backward).unwrap().into();
    let mut path = [0usize; 4];
    for code in 0..4usize.pow(4) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % 4;
            c /= 4;
        }
        assert!((f.path_probability(&path) - b.path_probability(&path)).abs() < 1e-12);
    }
}

#[test]
fn factored_kl_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = instance(&mut rng, 3, 1);
    let r = reciprocal(&inst, &random_coupling(&mut rng, 3));
    let m: GridProcess = random_markov(&mut rng, 3, 1).into();
    for (p, q) in [(&r, &m), (&m, &r)] {
        let a = grid_kl_factored(p, q).unwrap();
        let b = grid_kl_enumerated(p, q).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(grid_kl(&r, &r).unwrap(), 0.0);
}

#[test]
fn pythagorean_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..5 {
        let s = rng.random_range(2..=10);
        let n = rng.random_range(1..=3);
        let inst = instance(&mut rng, s, n);
        let r = reciprocal(&inst, &random_coupling(&mut rng, s));
        let m: GridProcess = random_markov(&mut rng, s, n).into();

        let proj_m: GridProcess = grid_markovian_projection(&r, ChainDirection::Forward).unwrap().into();
        let lhs = grid_kl_factored(&r, &m).unwrap();
        let rhs = grid_kl_factored(&r, &proj_m).unwrap() + grid_kl_factored(&proj_m, &m).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "trial {trial}: {lhs} vs {rhs}");

        let proj_r = reciprocal(&inst, &m.coupling().unwrap());
        let lhs = grid_kl_factored(&m, &r).unwrap();
        let rhs = grid_kl_factored(&m, &proj_r).unwrap() + grid_kl_factored(&proj_r, &r).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "trial {trial}: {lhs} vs {rhs}");
    }
}

#[test]
fn projections_are_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = instance(&mut rng, 4, 2);
    let r = reciprocal(&inst, &random_coupling(&mut rng, 4));
    let proj_m: GridProcess = grid_markovian_projection(&r, ChainDirection::Forward).unwrap().into();
    let best = grid_kl(&r, &proj_m).unwrap();
    for _ in 0..20 {
        let m: GridProcess = random_markov(&mut rng, 4, 2).into();
        assert!(best <= grid_kl(&r, &m).unwrap());
        let proj_r = reciprocal(&inst, &m.coupling().unwrap());
        let other = reciprocal(&inst, &random_coupling(&mut rng, 4));
        assert!(grid_kl(&m, &proj_r).unwrap() <= grid_kl(&m, &other).unwrap());
    }
}

#[test]
fn markovian_projection_keeps_slice_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let inst = instance(&mut rng, 3, 2);
        let r = reciprocal(&inst, &random_coupling(&mut rng, 3));
        let mut expected = vec![vec![0.0; 3]; 4];
        for code in 0..81usize {
            let path = [code % 3, code / 3 % 3, code / 9 % 3, code / 27];
            let p = r.path_probability(&path);
            for (k, &x) in path.iter().enumerate() {
                expected[k][x] += p;
            }
        }
        for dir in [ChainDirection::Forward, ChainDirection::Backward] {
            let chain = grid_markovian_projection(&r, dir).unwrap();
            for (got, want) in chain.slice_marginals().iter().zip(&expected) {
                for (a, b) in got.iter().zip(want) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }
}

fn fifteen_point_problem() -> (GridSpace, Vec<f64>, Vec<f64>) {
    let space = GridSpace::uniform_1d(15, -2.0, 2.0).unwrap();
    let p0 = space.discretized_gaussian(&[-0.5], 0.6).unwrap();
    let p1 = space.discretized_gaussian(&[0.7], 0.9).unwrap();
    (space, p0, p1)
}

#[test]
fn dimf_reaches_sinkhorn_optimum() {
    let (space, p0, p1) = fifteen_point_problem();
    let start = Instant::now();
    let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(3).unwrap(), 0.5).unwrap());
    let oracle = grid_reference_sinkhorn(&p0, &p1, &kernels, 1e-15).unwrap();
    let init = GridCoupling::independent(&p0, &p1).unwrap();
    let res = grid_dimf_run_with_kernels(&p0, &p1, &init, &kernels, &GridDimfOptions::new(oracle.clone())).unwrap();
    assert!(res.converged);
    assert!(res.coupling.tv(&oracle) < 1e-8);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let mut prev = res.initial_kl;
    for r in &res.records {
        assert!(r.kl_to_oracle <= prev + 1e-12);
        prev = r.kl_to_oracle;
    }
    assert!(res.coupling.marginal_deviation(&p0, &p1) < 1e-10);
}

#[test]
fn dimf_fixed_point_at_sinkhorn_coupling() {
    let (space, p0, p1) = fifteen_point_problem();
    let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(2).unwrap(), 0.5).unwrap());
    let oracle = grid_reference_sinkhorn(&p0, &p1, &kernels, 1e-15).unwrap();
    let mut opts = GridDimfOptions::new(oracle.clone());
    opts.max_outer_iters = 1;
    opts.tv_threshold = 0.0;
    let res = grid_dimf_run_with_kernels(&p0, &p1, &oracle, &kernels, &opts).unwrap();
    assert!(res.coupling.tv(&oracle) < 1e-9);
}

#[test]
fn symmetric_problem_gives_symmetric_coupling() {
    let space = GridSpace::uniform_1d(11, -2.0, 2.0).unwrap();
    let p = space.discretized_gaussian(&[0.0], 1.0).unwrap();
    let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(2).unwrap(), 0.7).unwrap());
    let oracle = grid_reference_sinkhorn(&p, &p, &kernels, 1e-15).unwrap();
    let init = GridCoupling::independent(&p, &p).unwrap();
    let res = grid_dimf_run_with_kernels(&p, &p, &init, &kernels, &GridDimfOptions::new(oracle)).unwrap();
    assert!(res.coupling.max_asymmetry() < 1e-10);
}

#[test]
fn two_dimensional_grid_runs() {
    let space = GridSpace::uniform_2d(4, -1.0, 1.0).unwrap();
    let p0 = space.discretized_gaussian(&[-0.3, 0.2], 0.5).unwrap();
    let p1 = space.discretized_gaussian(&[0.4, -0.1], 0.7).unwrap();
    let kernels = Arc::new(build_bridge_kernels(&space, &TimeGrid::uniform(1).unwrap(), 0.6).unwrap());
    let oracle = grid_reference_sinkhorn(&p0, &p1, &kernels, 1e-15).unwrap();
    let init = GridCoupling::independent(&p0, &p1).unwrap();
    let res = grid_dimf_run_with_kernels(&p0, &p1, &init, &kernels, &GridDimfOptions::new(oracle.clone())).unwrap();
    assert!(res.coupling.tv(&oracle) < 1e-8);
}
