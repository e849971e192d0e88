#![allow(dead_code)]

use nalgebra::DMatrix;
use pathint::bench_gbm::{self, ControllerBasis, GbmSpec};
use pathint::cost::{self, WeightSet};
use pathint::estimator::{self, FitOptions};
use pathint::sde::{simulate, simulate_with, ParametrizedPolicy, Policy, SimOptions, TimeGrid};

/// Euler bias on E[X(1)] for the GBM in x-coordinates with u = 0, estimated
/// against the exact solution x0·exp(W(1)) driven by the same noise.
pub fn gbm_weak_error(n_steps: usize, n_paths: usize, seed: u64) -> (f64, f64) {
    let spec = GbmSpec { n_steps, ..Default::default() };
    let p = bench_gbm::make_problem(&spec).unwrap();
    let e = simulate(&p, &Policy::Zero, n_paths, seed).unwrap();
    let diffs: Vec<f64> = (0..n_paths)
        .map(|i| {
            let w: f64 = e.path_noise(i).iter().sum();
            e.state(i, n_steps)[0] - spec.x0 * w.exp()
        })
        .collect();
    pathint::stats::mean_and_se(&diffs)
}

/// Ratio of weak errors at n and 2n steps.
pub fn weak_error_ratio() -> f64 {
    let (e4, _) = gbm_weak_error(4, 100_000, 11);
    let (e8, _) = gbm_weak_error(8, 100_000, 11);
    e4 / e8
}

/// Bitwise equality of ensembles simulated with 1, 2 and 4 worker threads.
pub fn thread_determinism() -> bool {
    let spec = GbmSpec { n_steps: 200, ..Default::default() };
    let p = bench_gbm::make_problem(&spec).unwrap();
    let pol = bench_gbm::analytic_control(&spec);
    let run = |t| simulate_with(&p, &pol, &SimOptions::new(3000, 42).threads(t)).unwrap();
    let a = run(1);
    [2, 4].into_iter().all(|t| {
        let b = run(t);
        (0..a.n_paths()).all(|i| {
            a.path_states(i).iter().zip(b.path_states(i)).all(|(x, y)| x.to_bits() == y.to_bits())
                && a.path_noise(i).iter().zip(b.path_noise(i)).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    })
}

pub struct FixedPoint {
    pub nodes: Vec<usize>,
    /// `A_fit − a*` per node.
    pub deviation: Vec<f64>,
    /// Batch standard error of the same quantity.
    pub se: Vec<f64>,
}

impl FixedPoint {
    /// `(A_fit − a*) / se` per node.
    pub fn z(&self) -> Vec<f64> {
        self.deviation.iter().zip(&self.se).map(|(d, s)| d / s).collect()
    }

    /// Fraction of nodes with `|z| <= 3`.
    pub fn fraction_within_3se(&self) -> f64 {
        self.z().iter().filter(|z| z.abs() <= 3.0).count() as f64 / self.nodes.len() as f64
    }

    /// Node-averaged `z` scaled by `√nodes` (≈ N(0, 1) at the fixed point).
    pub fn pooled_z(&self) -> f64 {
        let z = self.z();
        z.iter().sum::<f64>() / (z.len() as f64).sqrt()
    }
}

/// Samples under the exactly parametrized optimum a*(t) log x and refits the
/// log basis with the default estimator settings.
pub fn fixed_point(n_paths: usize, seed: u64) -> FixedPoint {
    let spec = GbmSpec::default();
    let p = bench_gbm::make_log_problem(&spec).unwrap();
    let grid: TimeGrid = p.grid;
    let basis = ControllerBasis::Log.log_basis();
    let exact: Vec<DMatrix<f64>> =
        (0..grid.n_steps()).map(|k| DMatrix::from_element(1, 1, spec.optimal_gain(grid.time(k)))).collect();
    let pol = Policy::Parametrized(ParametrizedPolicy::new(grid, basis.clone(), exact.clone()).unwrap());
    let e = simulate(&p, &pol, n_paths, seed).unwrap();
    let costs = cost::path_costs(&e, &p).unwrap();
    let w = cost::weights(&costs).unwrap();
    let fit = estimator::fit_feedback(&e, &w, &basis, &basis, FitOptions::default()).unwrap();
    let nodes: Vec<usize> = (0..grid.n_steps()).collect();
    let dt = grid.dt();
    let mut deviation = Vec::new();
    let mut se = Vec::new();
    for &k in &nodes {
        // A_fit − a* = ⟨ΔW y⟩ / (dt ⟨y²⟩); iid per-path standard error
        let g = estimator::weighted_average(&e, &w, &pathint::sde::BasisSet::new("y2", 1, |_, y, o| o[0] = y[0] * y[0]), k)
            .unwrap()[0];
        let z: Vec<f64> = (0..n_paths).map(|i| w.weights[i] * e.noise(i, k)[0] * e.state(i, k)[0] / dt).collect();
        let (_, s) = pathint::stats::mean_and_se(&z);
        deviation.push(fit.coefficients[k][(0, 0)] - exact[k][(0, 0)]);
        se.push(s / g);
    }
    FixedPoint { nodes, deviation, se }
}

pub fn weights_of(costs: &[f64]) -> WeightSet {
    WeightSet::from_costs(costs).unwrap()
}
