//! Geometric Brownian motion benchmark with a known optimal controller.
//!
//! ```text
//! dX = X (dt/2 + u dt + dW),    S = (Q/2) log(X(t1))² + ½∫u² dt + ∫u dW
//! u*(t, x) = −Q log(x) / (Q (t1 − t) + 1)
//! ```
//!
//! In `y = log x` the dynamics become `dy = u dt + dW` with terminal cost
//! `(Q/2) y²`, an LQ problem with `J(t, y) = ½ P(t) y² + c(t)`,
//! `P(t) = Q / (1 + Q (t1 − t))` and `c(t) = ½ log(1 + Q (t1 − t))`.
//! Simulations for the benchmark run in `y` so paths can never leave the
//! domain `x > 0`; states are mapped back to `x` for reporting.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::cost::{self, CostSummary};
use crate::error::{Error, Result};
use crate::estimator::{CorrectionOptions, Ridge};
use crate::iis::{self, IisConfig};
use crate::sde::{
    simulate_with, BasisSet, ControlProblem, Divergence, ParametrizedPolicy, Policy, SimOptions, TimeGrid,
};
use crate::stats::{self, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GbmSpec {
    pub q: f64,
    pub x0: f64,
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl Default for GbmSpec {
    fn default() -> Self {
        Self { q: 10.0, x0: 0.5, t0: 0.0, t1: 1.0, n_steps: 1000 }
    }
}

impl GbmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::InvalidProblem(format!("Q must be positive, got {}", self.q)));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(Error::InvalidProblem(format!("x0 must be positive, got {}", self.x0)));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, self.t1, self.n_steps)
    }

    /// Riccati coefficient `P(t)` of `J = ½ P y² + c`.
    pub fn riccati_p(&self, t: f64) -> f64 {
        self.q / (1.0 + self.q * (self.t1 - t))
    }

    pub fn riccati_c(&self, t: f64) -> f64 {
        0.5 * (1.0 + self.q * (self.t1 - t)).ln()
    }

    /// Feedback gain `a(t)` of `u*(t, x) = a(t) log x`.
    pub fn optimal_gain(&self, t: f64) -> f64 {
        -self.riccati_p(t)
    }

    /// Mean of `log X(t)` under the optimal controller.
    pub fn optimal_log_mean(&self, t: f64) -> f64 {
        self.x0.ln() * (1.0 + self.q * (self.t1 - t)) / (1.0 + self.q * (self.t1 - self.t0))
    }
}

/// The benchmark in its original coordinates (state `x`).
pub fn make_problem(spec: &GbmSpec) -> Result<ControlProblem> {
    spec.validate()?;
    let q = spec.q;
    Ok(ControlProblem::new(1, 1, vec![spec.x0], spec.grid()?)?
        .with_drift(|_, x, out| out[0] = 0.5 * x[0])
        .with_diffusion(|_, x, out| out[0] = x[0])
        .with_terminal_cost(move |x| 0.5 * q * x[0].ln().powi(2)))
}

/// The benchmark in `y = log x` (state `y`, `dy = u dt + dW`).
pub fn make_log_problem(spec: &GbmSpec) -> Result<ControlProblem> {
    spec.validate()?;
    let q = spec.q;
    Ok(ControlProblem::new(1, 1, vec![spec.x0.ln()], spec.grid()?)?
        .with_diffusion(|_, _, out| out[0] = 1.0)
        .with_terminal_cost(move |y| 0.5 * q * y[0] * y[0]))
}

pub fn optimal_control(spec: &GbmSpec, t: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("x = {x} must be positive")));
    }
    Ok(spec.optimal_gain(t) * x.ln())
}

/// `u*` acting on `x`-states (for [`make_problem`]).
pub fn analytic_control(spec: &GbmSpec) -> Policy {
    let s = *spec;
    Policy::analytic("gbm-optimal", move |t, x, out| {
        out[0] = if x[0] > 0.0 { s.optimal_gain(t) * x[0].ln() } else { f64::NAN };
    })
}

/// `u*` acting on `y`-states (for [`make_log_problem`]).
pub fn analytic_control_log(spec: &GbmSpec) -> Policy {
    let s = *spec;
    Policy::analytic("gbm-optimal-log", move |t, y, out| out[0] = s.optimal_gain(t) * y[0])
}

/// `u*(t, y) + √ε` on `y`-states.
pub fn perturbed_control_log(spec: &GbmSpec, epsilon: f64) -> Result<Policy> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    let s = *spec;
    let shift = epsilon.sqrt();
    Ok(Policy::analytic(format!("gbm-optimal+sqrt({epsilon})"), move |t, y, out| {
        out[0] = s.optimal_gain(t) * y[0] + shift
    }))
}

/// Closed-form optimal cost-to-go `J(t, x)`.
pub fn analytic_value(spec: &GbmSpec, t: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("x = {x} must be positive")));
    }
    let y = x.ln();
    Ok(0.5 * spec.riccati_p(t) * y * y + spec.riccati_c(t))
}

/// Controller parametrizations compared in the benchmark. Basis functions are
/// functions of `x`, evaluated on `y`-states as `x = exp(y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerBasis {
    /// `a(t)`
    Const,
    /// `a(t) + b(t) x`
    Affine,
    /// `a(t) + b(t) x + c(t) x²`
    Quadratic,
    /// `a(t) log x`
    Log,
}

impl ControllerBasis {
    pub const ALL: [ControllerBasis; 4] =
        [ControllerBasis::Const, ControllerBasis::Affine, ControllerBasis::Quadratic, ControllerBasis::Log];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerBasis::Const => "const",
            ControllerBasis::Affine => "affine",
            ControllerBasis::Quadratic => "quadratic",
            ControllerBasis::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }

    pub fn len(&self) -> usize {
        match self {
            ControllerBasis::Const | ControllerBasis::Log => 1,
            ControllerBasis::Affine => 2,
            ControllerBasis::Quadratic => 3,
        }
    }

    /// `h(x)` for a physical state `x > 0`.
    pub fn eval_x(&self, x: f64, out: &mut [f64]) {
        match self {
            ControllerBasis::Const => out[0] = 1.0,
            ControllerBasis::Affine => {
                out[0] = 1.0;
                out[1] = x;
            }
            ControllerBasis::Quadratic => {
                out[0] = 1.0;
                out[1] = x;
                out[2] = x * x;
            }
            ControllerBasis::Log => out[0] = x.ln(),
        }
    }

    /// Basis on `y = log x` states.
    pub fn log_basis(&self) -> BasisSet {
        let b = *self;
        BasisSet::new(self.name(), self.len(), move |_, y, out| match b {
            ControllerBasis::Log => out[0] = y[0],
            _ => b.eval_x(y[0].exp(), out),
        })
    }

    /// Basis on `x` states.
    pub fn x_basis(&self) -> BasisSet {
        let b = *self;
        BasisSet::new(self.name(), self.len(), move |_, x, out| b.eval_x(x[0], out))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle for the linear backward equation of ψ = exp(−J)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdeScheme {
    CrankNicolson,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeParams {
    pub y_min: f64,
    pub y_max: f64,
    pub n_y: usize,
    pub n_t: usize,
    pub scheme: PdeScheme,
}

impl Default for PdeParams {
    fn default() -> Self {
        Self { y_min: -6.0, y_max: 6.0, n_y: 2001, n_t: 2000, scheme: PdeScheme::CrankNicolson }
    }
}

/// `ψ(t_j, y_i)` on a uniform grid in `y = log x`.
#[derive(Clone, Debug)]
pub struct PdeGrid {
    pub y: Vec<f64>,
    pub t: Vec<f64>,
    /// `psi[j][i] = ψ(t_j, y_i)`.
    pub psi: Vec<Vec<f64>>,
}

impl PdeGrid {
    fn slice(&self, t: f64) -> Result<usize> {
        let (t0, t1) = (self.t[0], *self.t.last().unwrap());
        if !(t >= t0 - 1e-12 && t <= t1 + 1e-12) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [{t0}, {t1}]")));
        }
        let j = ((t - t0) / (t1 - t0) * (self.t.len() - 1) as f64).round() as usize;
        Ok(j.min(self.t.len() - 1))
    }

    fn locate(&self, y: f64) -> Result<(usize, f64)> {
        let h = self.y[1] - self.y[0];
        let n = self.y.len();
        if !(y >= self.y[0] && y <= self.y[n - 1]) {
            return Err(Error::Domain(format!("y = {y} outside the PDE grid")));
        }
        let i = (((y - self.y[0]) / h).floor() as usize).min(n - 2);
        Ok((i, (y - self.y[i]) / h))
    }

    /// `log ψ(t, y)` by linear interpolation of `log ψ` (t snapped to the
    /// nearest slice).
    pub fn log_psi(&self, t: f64, y: f64) -> Result<f64> {
        let j = self.slice(t)?;
        let (i, f) = self.locate(y)?;
        let row = &self.psi[j];
        Ok((1.0 - f) * row[i].ln() + f * row[i + 1].ln())
    }

    /// Induced optimal control `u*(t, x) = σ ψ_x / ψ = ∂_y log ψ` at `y = log x`.
    pub fn control(&self, t: f64, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("x = {x} must be positive")));
        }
        let j = self.slice(t)?;
        let (i, f) = self.locate(x.ln())?;
        let row = &self.psi[j];
        let h = self.y[1] - self.y[0];
        let n = row.len();
        let grad = |i: usize| -> f64 {
            if i == 0 {
                (row[1].ln() - row[0].ln()) / h
            } else if i == n - 1 {
                (row[n - 1].ln() - row[n - 2].ln()) / h
            } else {
                (row[i + 1].ln() - row[i - 1].ln()) / (2.0 * h)
            }
        };
        Ok((1.0 - f) * grad(i) + f * grad(i + 1))
    }

    /// Mean of `y` under the induced control, integrating `dm/dt = u(t, m)`
    /// with Heun's method over the stored slices (exact for linear controls).
    pub fn controlled_log_mean(&self, y0: f64, t_end: f64) -> Result<f64> {
        let j_end = self.slice(t_end)?;
        let mut m = y0;
        for j in 0..j_end {
            let dt = self.t[j + 1] - self.t[j];
            let k1 = self.control(self.t[j], m.exp())?;
            let k2 = self.control(self.t[j + 1], (m + dt * k1).exp())?;
            m += 0.5 * dt * (k1 + k2);
        }
        Ok(m)
    }
}

/// Solves `ψ_t + ½ ψ_yy = 0` backward from `ψ(t1, y) = exp(−(Q/2) y²)` with
/// Dirichlet data from the closed form.
pub fn pde_oracle(spec: &GbmSpec, params: &PdeParams) -> Result<PdeGrid> {
    spec.validate()?;
    if params.n_y < 3 || params.n_t < 1 || !(params.y_max > params.y_min) {
        return Err(Error::InvalidArgument("PDE grid needs n_y >= 3, n_t >= 1, y_max > y_min".into()));
    }
    let n = params.n_y;
    let h = (params.y_max - params.y_min) / (n - 1) as f64;
    let y: Vec<f64> = (0..n).map(|i| params.y_min + i as f64 * h).collect();
    let dtau = (spec.t1 - spec.t0) / params.n_t as f64;
    let t: Vec<f64> = (0..=params.n_t)
        .map(|j| if j == params.n_t { spec.t1 } else { spec.t0 + j as f64 * dtau })
        .collect();
    let exact = |tt: f64, yy: f64| (-(0.5 * spec.riccati_p(tt) * yy * yy + spec.riccati_c(tt))).exp();

    // diffusion coefficient ½ of ψ_yy
    let r = 0.5 * dtau / (h * h);
    if params.scheme == PdeScheme::Explicit && dtau > h * h {
        return Err(Error::Cfl { dt: dtau, limit: h * h });
    }

    let mut psi = vec![Vec::new(); params.n_t + 1];
    let mut cur: Vec<f64> = y.iter().map(|&yy| (-0.5 * spec.q * yy * yy).exp()).collect();
    psi[params.n_t] = cur.clone();

    let mut rhs = vec![0.0; n];
    let mut cprime = vec![0.0; n];
    let mut dprime = vec![0.0; n];
    for j in (0..params.n_t).rev() {
        let tn = t[j];
        let mut next = vec![0.0; n];
        next[0] = exact(tn, y[0]);
        next[n - 1] = exact(tn, y[n - 1]);
        match params.scheme {
            PdeScheme::Explicit => {
                for i in 1..n - 1 {
                    next[i] = cur[i] + r * (cur[i + 1] - 2.0 * cur[i] + cur[i - 1]);
                }
            }
            PdeScheme::CrankNicolson => {
                // (1 + 2a) v_i − a (v_{i−1} + v_{i+1}) = (1 − 2a) c_i + a (c_{i−1} + c_{i+1}),  a = r/2
                let a = 0.5 * r;
                for i in 1..n - 1 {
                    rhs[i] = (1.0 - 2.0 * a) * cur[i] + a * (cur[i - 1] + cur[i + 1]);
                }
                rhs[1] += a * next[0];
                rhs[n - 2] += a * next[n - 1];
                // Thomas algorithm on interior nodes 1..n-1
                let diag = 1.0 + 2.0 * a;
                let off = -a;
                cprime[1] = off / diag;
                dprime[1] = rhs[1] / diag;
                for i in 2..n - 1 {
                    let denom = diag - off * cprime[i - 1];
                    cprime[i] = off / denom;
                    dprime[i] = (rhs[i] - off * dprime[i - 1]) / denom;
                }
                next[n - 2] = dprime[n - 2];
                for i in (1..n - 2).rev() {
                    next[i] = dprime[i] - cprime[i] * next[i + 1];
                }
            }
        }
        if next.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite { path: 0, step: j });
        }
        psi[j] = next.clone();
        cur = next;
    }
    Ok(PdeGrid { y, t, psi })
}

// ---------------------------------------------------------------------------
// Reproduction of the controller comparison and bound experiments
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_paths: usize,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub damping: f64,
    pub ridge: Ridge,
    /// Length of the increment quotient in time units (`≤ dt` = single step).
    pub correction_window: f64,
    pub centered: bool,
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seeds: vec![1, 2, 3, 4, 5],
            rounds: 3,
            damping: 1.0,
            ridge: Ridge::Auto,
            correction_window: 0.05,
            centered: true,
            threads: None,
        }
    }
}

impl BenchConfig {
    pub fn correction(&self, grid: &TimeGrid) -> CorrectionOptions {
        let steps = (self.correction_window / grid.dt()).round().max(1.0) as usize;
        CorrectionOptions { window_steps: steps, centered: self.centered }
    }

    pub fn iis_config(&self, grid: &TimeGrid, seed: u64) -> IisConfig {
        IisConfig {
            n_paths: self.n_paths,
            n_rounds: self.rounds,
            ridge: self.ridge,
            damping: self.damping,
            seed,
            correction: self.correction(grid),
            divergence: Divergence::Absorb,
            threads: self.threads,
        }
    }

    fn sim(&self, seed: u64) -> SimOptions {
        SimOptions { n_paths: self.n_paths, seed, threads: self.threads, divergence: Divergence::Absorb }
    }
}

/// Columns of the controller comparison, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Zero,
    Const,
    Affine,
    Quadratic,
    Log,
    Optimal,
}

impl Column {
    pub const ALL: [Column; 6] =
        [Column::Zero, Column::Const, Column::Affine, Column::Quadratic, Column::Log, Column::Optimal];

    pub fn label(&self) -> &'static str {
        match self {
            Column::Zero => "u=0",
            Column::Const => "u0",
            Column::Affine => "u1",
            Column::Quadratic => "u2",
            Column::Log => "alog",
            Column::Optimal => "ustar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table1Row {
    pub column: Column,
    pub expected_cost: f64,
    pub var_alpha: f64,
    pub lambda: f64,
    pub stderr_es: f64,
    pub n_diverged: usize,
}

#[derive(Clone, Debug)]
pub struct Table1 {
    /// Median over seeds per column.
    pub rows: Vec<Table1Row>,
    /// `per_seed[s][c]`.
    pub per_seed: Vec<Vec<Table1Row>>,
}

/// Parametrized controllers fitted for one seed.
#[derive(Clone, Debug)]
pub struct FittedControllers {
    pub constant: Policy,
    pub affine: Policy,
    pub quadratic: Policy,
    pub log: Policy,
}

impl FittedControllers {
    pub fn get(&self, b: ControllerBasis) -> &Policy {
        match b {
            ControllerBasis::Const => &self.constant,
            ControllerBasis::Affine => &self.affine,
            ControllerBasis::Quadratic => &self.quadratic,
            ControllerBasis::Log => &self.log,
        }
    }
}

fn row(column: Column, s: &CostSummary) -> Table1Row {
    Table1Row {
        column,
        expected_cost: s.expected_cost,
        var_alpha: s.var_alpha,
        lambda: s.ess_fraction,
        stderr_es: s.expected_cost_se,
        n_diverged: s.n_diverged,
    }
}

/// Embeds affine coefficients `[a, b]` into the quadratic basis as `[a, b, 0]`.
fn embed_affine(grid: TimeGrid, affine: &Policy) -> Result<Policy> {
    let p = affine
        .as_parametrized()
        .ok_or_else(|| Error::InvalidArgument("affine controller is not parametrized".into()))?;
    let coeffs = p
        .coefficients()
        .iter()
        .map(|a| DMatrix::from_fn(a.nrows(), 3, |r, c| if c < 2 { a[(r, c)] } else { 0.0 }))
        .collect();
    Ok(Policy::Parametrized(ParametrizedPolicy::new(
        grid,
        ControllerBasis::Quadratic.log_basis(),
        coeffs,
    )?))
}

/// Fits the four parametrized controllers by iterative importance sampling
/// (test functions equal to the basis). The quadratic fit starts from the
/// fitted affine controller; the others start from `u = 0`.
pub fn fit_controllers(spec: &GbmSpec, cfg: &BenchConfig, seed: u64) -> Result<FittedControllers> {
    let problem = make_log_problem(spec)?;
    let grid = problem.grid;
    let fit = |b: ControllerBasis, warm: Option<Policy>, label: u64| -> Result<Policy> {
        let basis = b.log_basis();
        let out = iis::run(&problem, &basis, &basis, &cfg.iis_config(&grid, derive_seed(seed, label)), warm)
            .map_err(|f| f.error)?;
        Ok(out.policy)
    };
    let constant = fit(ControllerBasis::Const, None, 1)?;
    let affine = fit(ControllerBasis::Affine, None, 2)?;
    let quadratic = fit(ControllerBasis::Quadratic, Some(embed_affine(grid, &affine)?), 3)?;
    let log = fit(ControllerBasis::Log, None, 4)?;
    Ok(FittedControllers { constant, affine, quadratic, log })
}

/// Table rows for one seed: each controller evaluated on a fresh ensemble.
pub fn table1_for_seed(spec: &GbmSpec, cfg: &BenchConfig, seed: u64) -> Result<Vec<Table1Row>> {
    let problem = make_log_problem(spec)?;
    let fitted = fit_controllers(spec, cfg, seed)?;
    let mut rows = Vec::with_capacity(6);
    for (c, col) in Column::ALL.into_iter().enumerate() {
        let policy = match col {
            Column::Zero => Policy::Zero,
            Column::Const => fitted.constant.clone(),
            Column::Affine => fitted.affine.clone(),
            Column::Quadratic => fitted.quadratic.clone(),
            Column::Log => fitted.log.clone(),
            Column::Optimal => analytic_control_log(spec),
        };
        let s = iis::evaluate(&problem, &policy, &cfg.sim(derive_seed(seed, 100 + c as u64)))?;
        rows.push(row(col, &s));
    }
    Ok(rows)
}

pub fn reproduce_table1(spec: &GbmSpec, cfg: &BenchConfig) -> Result<Table1> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&s| table1_for_seed(spec, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let rows = (0..Column::ALL.len())
        .map(|c| {
            let pick = |f: fn(&Table1Row) -> f64| stats::median(&per_seed.iter().map(|r| f(&r[c])).collect::<Vec<_>>());
            Table1Row {
                column: Column::ALL[c],
                expected_cost: pick(|r| r.expected_cost),
                var_alpha: pick(|r| r.var_alpha),
                lambda: pick(|r| r.lambda),
                stderr_es: pick(|r| r.stderr_es),
                n_diverged: per_seed.iter().map(|r| r[c].n_diverged).max().unwrap_or(0),
            }
        })
        .collect();
    Ok(Table1 { rows, per_seed })
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut s = String::from("policy,ES,varalpha,lambda,stderr_ES\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.column.label(), r.expected_cost, r.var_alpha, r.lambda, r.stderr_es);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure1Row {
    pub epsilon: f64,
    pub var: f64,
    pub var_se: f64,
    pub lower: f64,
    pub upper: f64,
    pub bound_lo_analytic: f64,
    pub bound_hi_analytic: f64,
    pub lambda: f64,
    pub lambda_se: f64,
}

/// Weight variance under `u* + √ε` and the integrated bounds, per `ε`.
pub fn reproduce_figure1(spec: &GbmSpec, epsilons: &[f64], n_paths: usize, seed: u64) -> Result<Vec<Figure1Row>> {
    let problem = make_log_problem(spec)?;
    let u_star = analytic_control_log(spec);
    let mut rows = Vec::with_capacity(epsilons.len());
    for (j, &eps) in epsilons.iter().enumerate() {
        let pol = perturbed_control_log(spec, eps)?;
        let opts = SimOptions::new(n_paths, derive_seed(seed, 200 + j as u64));
        let ens = simulate_with(&problem, &pol, &opts)?;
        let costs = cost::path_costs(&ens, &problem)?;
        let w = cost::weights(&costs)?;
        let summary = cost::summarize(&costs)?;
        let b = cost::variance_bounds_with(&ens, &w, &u_star)?;
        rows.push(Figure1Row {
            epsilon: eps,
            var: w.variance,
            var_se: summary.var_alpha_se,
            lower: b.lower,
            upper: b.upper,
            bound_lo_analytic: eps,
            bound_hi_analytic: eps / (1.0 - eps),
            lambda: w.ess_fraction,
            lambda_se: summary.ess_fraction_se,
        });
    }
    Ok(rows)
}

pub fn figure1_csv(rows: &[Figure1Row]) -> String {
    let mut s = String::from("epsilon,var,lower,upper,bound_lo_analytic,bound_hi_analytic\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epsilon, r.var, r.lower, r.upper, r.bound_lo_analytic, r.bound_hi_analytic
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct Figure2 {
    pub t: f64,
    /// `(x, u0, u1, u2, ulog, ustar)`.
    pub controls: Vec<[f64; 6]>,
    /// `(bin_left, bin_right, count)`.
    pub histogram: Vec<(f64, f64, usize)>,
    /// Fitted log-basis gain at `t`.
    pub log_gain: f64,
    /// Sample mean and standard error of `log X*(t)`.
    pub log_state_mean: f64,
    pub log_state_se: f64,
}

pub const FIGURE2_BINS: usize = 30;

/// x-grid `0.10, 0.15, …, 3.00` (contains `x = 1` exactly).
pub fn figure2_xs() -> Vec<f64> {
    (2..=60).map(|j| j as f64 / 20.0).collect()
}

/// Controllers at the mid-horizon node and a histogram of the optimally
/// controlled state there.
pub fn reproduce_figure2(spec: &GbmSpec, cfg: &BenchConfig, seed: u64) -> Result<Figure2> {
    let problem = make_log_problem(spec)?;
    let grid = problem.grid;
    let k = grid.n_steps() / 2;
    let t = grid.time(k);
    let fitted = fit_controllers(spec, cfg, seed)?;
    let eval = |p: &Policy, x: f64| {
        let mut u = [0.0];
        p.eval_at_node(k, t, &[x.ln()], &mut u);
        u[0]
    };
    let controls = figure2_xs()
        .into_iter()
        .map(|x| {
            [
                x,
                eval(&fitted.constant, x),
                eval(&fitted.affine, x),
                eval(&fitted.quadratic, x),
                eval(&fitted.log, x),
                optimal_control(spec, t, x).unwrap_or(f64::NAN),
            ]
        })
        .collect();
    let log_gain = fitted.log.as_parametrized().map(|p| p.coefficients()[k][(0, 0)]).unwrap_or(f64::NAN);

    let ens = simulate_with(
        &problem,
        &analytic_control_log(spec),
        &SimOptions { n_paths: cfg.n_paths, seed: derive_seed(seed, 300), threads: cfg.threads, divergence: Divergence::Error },
    )?;
    let ys: Vec<f64> = (0..ens.n_paths()).map(|i| ens.state(i, k)[0]).collect();
    let xs: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
    let (log_state_mean, _) = stats::mean_and_se(&ys);
    let (_, log_state_se) = stats::batch_estimate(ys.len(), |r| stats::mean(&ys[r]));
    Ok(Figure2 { t, controls, histogram: histogram(&xs, FIGURE2_BINS), log_gain, log_state_mean, log_state_se })
}

/// Equal-width bins over `[min, max]`; the last bin is closed on the right.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, if b + 1 == bins { hi.max(lo + width) } else { lo + (b + 1) as f64 * width }, c))
        .collect()
}

pub fn figure2_controls_csv(fig: &Figure2) -> String {
    let mut s = String::from("x,u0,u1,u2,ulog,ustar\n");
    for r in &fig.controls {
        let _ = writeln!(s, "{},{},{},{},{},{}", r[0], r[1], r[2], r[3], r[4], r[5]);
    }
    s
}

pub fn figure2_hist_csv(fig: &Figure2) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for (l, r, c) in &fig.histogram {
        let _ = writeln!(s, "{l},{r},{c}");
    }
    s
}
