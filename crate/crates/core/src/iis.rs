//! Iterative importance sampling: sample under the current controller, refit
//! its coefficients from the weighted paths, repeat.

use nalgebra::DMatrix;

use crate::cost::{self, CostSummary};
use crate::error::{Error, Result};
use crate::estimator::{fit_feedback, CorrectionOptions, FitOptions, Ridge, TestFunctions};
use crate::sde::{simulate_with, BasisSet, ControlProblem, Divergence, ParametrizedPolicy, Policy, SimOptions};
use crate::stats::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct IisConfig {
    pub n_paths: usize,
    pub n_rounds: usize,
    pub ridge: Ridge,
    /// `A ← (1 − γ) A_old + γ A_new`.
    pub damping: f64,
    pub seed: u64,
    pub correction: CorrectionOptions,
    pub divergence: Divergence,
    pub threads: Option<usize>,
}

impl Default for IisConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            n_rounds: 2,
            ridge: Ridge::Auto,
            damping: 1.0,
            seed: 0,
            correction: CorrectionOptions::default(),
            divergence: Divergence::Error,
            threads: None,
        }
    }
}

impl IisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rounds == 0 {
            return Err(Error::InvalidArgument("n_rounds must be at least 1".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.correction.window_steps == 0 {
            return Err(Error::InvalidArgument("window_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Noise seed used by round `r`.
    pub fn round_seed(&self, round: usize) -> u64 {
        derive_seed(self.seed, round as u64)
    }

    fn sim_options(&self, seed: u64) -> SimOptions {
        SimOptions { n_paths: self.n_paths, seed, threads: self.threads, divergence: self.divergence }
    }
}

/// Diagnostics of one round. Sampling statistics describe the policy that
/// generated the round's ensemble; `coefficients` are the refit result.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub round: usize,
    pub seed: u64,
    pub expected_cost: f64,
    pub expected_cost_se: f64,
    pub var_alpha: f64,
    pub ess_fraction: f64,
    pub value: f64,
    pub n_diverged: usize,
    pub coefficients: Vec<DMatrix<f64>>,
}

impl IterationReport {
    fn new(round: usize, seed: u64, s: &CostSummary, coefficients: Vec<DMatrix<f64>>) -> Self {
        Self {
            round,
            seed,
            expected_cost: s.expected_cost,
            expected_cost_se: s.expected_cost_se,
            var_alpha: s.var_alpha,
            ess_fraction: s.ess_fraction,
            value: s.value,
            n_diverged: s.n_diverged,
            coefficients,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IisOutcome {
    pub policy: Policy,
    pub reports: Vec<IterationReport>,
}

/// A failed run: the error and every round completed before it.
#[derive(Debug, Clone)]
pub struct IisFailure {
    pub error: Error,
    pub reports: Vec<IterationReport>,
}

impl std::fmt::Display for IisFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iterative importance sampling failed after {} rounds: {}", self.reports.len(), self.error)
    }
}

impl std::error::Error for IisFailure {}

/// Runs `config.n_rounds` rounds starting from `warm_start` (policy Zero if
/// `None`). A parametrized warm start on the same basis seeds the damping
/// recursion; any other warm start is only used as the round-0 sampler.
pub fn run(
    problem: &ControlProblem,
    basis: &BasisSet,
    test: &TestFunctions,
    config: &IisConfig,
    warm_start: Option<Policy>,
) -> std::result::Result<IisOutcome, IisFailure> {
    let fail = |error, reports| IisFailure { error, reports };
    config.validate().map_err(|e| fail(e, vec![]))?;

    let mut sampler = warm_start.unwrap_or(Policy::Zero);
    let mut current: Option<Vec<DMatrix<f64>>> = match &sampler {
        Policy::Parametrized(p) if p.basis().name() == basis.name() && p.basis().len() == basis.len() => {
            Some(p.coefficients().to_vec())
        }
        _ => None,
    };
    let opts = FitOptions { ridge: config.ridge, correction: config.correction };
    let mut reports = Vec::with_capacity(config.n_rounds);

    for round in 0..config.n_rounds {
        let seed = config.round_seed(round);
        let step = || -> Result<(CostSummary, Vec<DMatrix<f64>>)> {
            let ens = simulate_with(problem, &sampler, &config.sim_options(seed))?;
            let costs = cost::path_costs(&ens, problem)?;
            let summary = cost::summarize(&costs)?;
            let w = cost::weights(&costs)?;
            let fit = fit_feedback(&ens, &w, basis, test, opts)?;
            Ok((summary, fit.coefficients))
        };
        let (summary, fresh) = match step() {
            Ok(v) => v,
            Err(e) => return Err(fail(e, reports)),
        };
        let coeffs = match current.take() {
            Some(old) if config.damping < 1.0 => old
                .iter()
                .zip(&fresh)
                .map(|(a, b)| a * (1.0 - config.damping) + b * config.damping)
                .collect(),
            _ => fresh,
        };
        reports.push(IterationReport::new(round, seed, &summary, coeffs.clone()));
        sampler = match ParametrizedPolicy::new(problem.grid, basis.clone(), coeffs.clone()) {
            Ok(p) => Policy::Parametrized(p),
            Err(e) => return Err(fail(e, reports)),
        };
        current = Some(coeffs);
    }
    Ok(IisOutcome { policy: sampler, reports })
}

/// Out-of-sample performance of a policy on a fresh ensemble.
pub fn evaluate(problem: &ControlProblem, policy: &Policy, sim: &SimOptions) -> Result<CostSummary> {
    let ens = simulate_with(problem, policy, sim)?;
    let costs = cost::path_costs(&ens, problem)?;
    cost::summarize(&costs)
}
