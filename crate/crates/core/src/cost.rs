//! Path costs, importance weights and the diagnostics derived from them.
//!
//! The cost of a sampled path is
//!
//! ```text
//! S = Φ(X_n) + Σ_k [V(t_k, X_k) + ½ u_k'u_k] dt + Σ_k u_k'ΔW_k
//! ```
//!
//! with every integrand taken at the left node of its step (Itô). The
//! `u'ΔW` term is the measure correction that makes `E[exp(−S)]` the same
//! for every sampling control, so the value estimate `−log mean exp(−S)` does
//! not depend on which policy generated the ensemble; only its variance does.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sde::{ControlProblem, PathEnsemble, Policy};
use crate::stats::{self, pairwise_sum};

/// Cost of one path split into its four contributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRecord {
    pub terminal: f64,
    pub running: f64,
    pub control: f64,
    pub stochastic: f64,
    /// `terminal + running + control + stochastic`, or `+∞` for a diverged path.
    pub total: f64,
}

impl CostRecord {
    fn new(terminal: f64, running: f64, control: f64, stochastic: f64) -> Self {
        let total = terminal + running + control + stochastic;
        Self { terminal, running, control, stochastic, total }
    }

    fn diverged() -> Self {
        Self {
            terminal: f64::NAN,
            running: f64::NAN,
            control: f64::NAN,
            stochastic: f64::NAN,
            total: f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Self-normalized path weights `α_i = exp(−S_i) / mean_j exp(−S_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub weights: Vec<f64>,
    /// `log mean exp(−S)`.
    pub log_normalizer: f64,
    /// `1 / mean(α²)`.
    pub ess_fraction: f64,
    /// `mean(α²) − 1`.
    pub variance: f64,
}

impl WeightSet {
    /// Builds weights from total path costs; `+∞` costs get weight zero.
    pub fn from_costs(totals: &[f64]) -> Result<Self> {
        if totals.is_empty() {
            return Err(Error::InvalidArgument("no paths".into()));
        }
        if totals.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument("path costs must be finite or +inf".into()));
        }
        let neg: Vec<f64> = totals.iter().map(|s| -s).collect();
        let shift = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return Err(Error::DegenerateEnsemble);
        }
        let n = totals.len() as f64;
        let raw: Vec<f64> = neg.iter().map(|v| (v - shift).exp()).collect();
        let mean_raw = pairwise_sum(&raw) / n;
        let weights: Vec<f64> = raw.iter().map(|r| r / mean_raw).collect();
        let sq: Vec<f64> = weights.iter().map(|a| a * a).collect();
        let second = pairwise_sum(&sq) / n;
        Ok(Self {
            weights,
            log_normalizer: shift + mean_raw.ln(),
            ess_fraction: 1.0 / second,
            variance: second - 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        stats::mean(&self.weights)
    }
}

fn check_grid(ensemble: &PathEnsemble, problem: &ControlProblem) -> Result<()> {
    if ensemble.grid() != &problem.grid
        || ensemble.dim_x() != problem.dim_x
        || ensemble.dim_w() != problem.dim_w
    {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Cost of every path with left-point quadrature.
pub fn path_costs(ensemble: &PathEnsemble, problem: &ControlProblem) -> Result<Vec<CostRecord>> {
    check_grid(ensemble, problem)?;
    let grid = *ensemble.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let records = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|i| {
            if ensemble.is_diverged(i) {
                return CostRecord::diverged();
            }
            let mut running = Vec::with_capacity(n);
            let mut quad = Vec::with_capacity(n);
            let mut stoch = Vec::with_capacity(n);
            for k in 0..n {
                let x = ensemble.state(i, k);
                let u = ensemble.control(i, k);
                let dw = ensemble.noise(i, k);
                running.push((problem.running_cost)(grid.time(k), x) * dt);
                quad.push(0.5 * u.iter().map(|v| v * v).sum::<f64>() * dt);
                stoch.push(u.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>());
            }
            let terminal = (problem.terminal_cost)(ensemble.state(i, n));
            let rec = CostRecord::new(terminal, pairwise_sum(&running), pairwise_sum(&quad), pairwise_sum(&stoch));
            if rec.total.is_nan() {
                CostRecord::diverged()
            } else {
                rec
            }
        })
        .collect();
    Ok(records)
}

pub fn totals(costs: &[CostRecord]) -> Vec<f64> {
    costs.iter().map(|c| c.total).collect()
}

pub fn weights(costs: &[CostRecord]) -> Result<WeightSet> {
    WeightSet::from_costs(&totals(costs))
}

/// `J(t0, x0) ≈ −log mean exp(−S_i)`.
pub fn value_estimate(costs: &[CostRecord]) -> Result<f64> {
    Ok(0.0 - weights(costs)?.log_normalizer)
}

/// Plain sample mean of `S_i`: the performance of the sampling policy itself.
/// `+∞` if any path diverged.
pub fn expected_cost(costs: &[CostRecord]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::InvalidArgument("no paths".into()));
    }
    Ok(stats::mean(&totals(costs)))
}

/// Integrated weight-variance bounds for a sampling policy relative to `u_star`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceBounds {
    /// `Σ_k dt ‖mean_i[(u*−u)_ik α_i]‖²`
    pub lower: f64,
    /// `Σ_k dt mean_i[‖(u*−u)_ik‖² α_i²]`
    pub upper: f64,
}

/// Bounds on `Var(α)` for the ensemble's sampling policy given a reference
/// optimal control.
pub fn variance_bounds(ensemble: &PathEnsemble, problem: &ControlProblem, u_star: &Policy) -> Result<VarianceBounds> {
    let costs = path_costs(ensemble, problem)?;
    let w = weights(&costs)?;
    variance_bounds_with(ensemble, &w, u_star)
}

/// As [`variance_bounds`] with precomputed weights.
pub fn variance_bounds_with(ensemble: &PathEnsemble, w: &WeightSet, u_star: &Policy) -> Result<VarianceBounds> {
    if w.len() != ensemble.n_paths() {
        return Err(Error::InvalidArgument("weights do not belong to this ensemble".into()));
    }
    let grid = *ensemble.grid();
    let n = grid.n_steps();
    let m = ensemble.dim_w();
    let np = ensemble.n_paths() as f64;
    // Per-node (upper integrand, lower integrand)
    let per_node: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = grid.time(k);
            let mut us = vec![0.0; m];
            let mut sq = Vec::with_capacity(ensemble.n_paths());
            let mut lin: Vec<Vec<f64>> = vec![Vec::with_capacity(ensemble.n_paths()); m];
            for i in 0..ensemble.n_paths() {
                let a = w.weights[i];
                if a == 0.0 {
                    continue;
                }
                u_star.eval_at_node(k, t, ensemble.state(i, k), &mut us);
                let u = ensemble.control(i, k);
                let mut d2 = 0.0;
                for j in 0..m {
                    let d = us[j] - u[j];
                    d2 += d * d;
                    lin[j].push(d * a);
                }
                sq.push(d2 * a * a);
            }
            let upper = pairwise_sum(&sq) / np;
            let lower: f64 = lin
                .iter()
                .map(|v| {
                    let mean = pairwise_sum(v) / np;
                    mean * mean
                })
                .sum();
            (upper, lower)
        })
        .collect();
    let dt = grid.dt();
    let up: Vec<f64> = per_node.iter().map(|p| p.0 * dt).collect();
    let lo: Vec<f64> = per_node.iter().map(|p| p.1 * dt).collect();
    Ok(VarianceBounds { lower: pairwise_sum(&lo), upper: pairwise_sum(&up) })
}

/// Sampling diagnostics of one ensemble with batch standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostSummary {
    pub n_paths: usize,
    pub n_diverged: usize,
    /// Mean cost over non-diverged paths.
    pub expected_cost: f64,
    pub expected_cost_se: f64,
    pub value: f64,
    pub value_se: f64,
    pub var_alpha: f64,
    pub var_alpha_se: f64,
    pub ess_fraction: f64,
    pub ess_fraction_se: f64,
    pub cost_sd: f64,
}

/// Summary statistics; standard errors come from 10 contiguous batches, each
/// with its own weight normalization.
pub fn summarize(costs: &[CostRecord]) -> Result<CostSummary> {
    let w = weights(costs)?;
    let tot = totals(costs);
    let finite: Vec<f64> = tot.iter().copied().filter(|s| s.is_finite()).collect();
    let n_diverged = tot.len() - finite.len();
    let es = stats::mean(&finite);
    let sd = {
        let d: Vec<f64> = finite.iter().map(|s| (s - es) * (s - es)).collect();
        if finite.len() > 1 {
            (pairwise_sum(&d) / (finite.len() - 1) as f64).sqrt()
        } else {
            0.0
        }
    };
    let batch_ws = |r: std::ops::Range<usize>| WeightSet::from_costs(&tot[r]).ok();
    let (_, es_se) = stats::batch_estimate(tot.len(), |r| {
        let f: Vec<f64> = tot[r].iter().copied().filter(|s| s.is_finite()).collect();
        stats::mean(&f)
    });
    let (_, value_se) = stats::batch_estimate(tot.len(), |r| batch_ws(r).map_or(f64::INFINITY, |b| -b.log_normalizer));
    let (_, var_se) = stats::batch_estimate(tot.len(), |r| batch_ws(r).map_or(f64::INFINITY, |b| b.variance));
    let (_, lam_se) = stats::batch_estimate(tot.len(), |r| batch_ws(r).map_or(0.0, |b| b.ess_fraction));
    Ok(CostSummary {
        n_paths: tot.len(),
        n_diverged,
        expected_cost: es,
        expected_cost_se: es_se,
        value: 0.0 - w.log_normalizer,
        value_se,
        var_alpha: w.variance,
        var_alpha_se: var_se,
        ess_fraction: w.ess_fraction,
        ess_fraction_se: lam_se,
        cost_sd: sd,
    })
}
