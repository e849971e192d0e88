//! Controlled diffusions and their Euler–Maruyama path ensembles.
//!
//! A [`ControlProblem`] describes
//!
//! ```text
//! dX = b(t, X) dt + σ(t, X) (u(t, X) dt + dW),   X(t0) = x0
//! ```
//!
//! together with running cost `V` and terminal cost `Φ`. [`simulate`] draws
//! an ensemble of paths under a sampling [`Policy`], storing states, Brownian
//! increments and the controls applied, so costs and estimators can be
//! recomputed from the ensemble alone.
//!
//! Path `i` draws its increments in step order from its own ChaCha8 stream
//! (master seed, stream `i`), so the noise at `(seed, i, k)` is fixed and an
//! ensemble is bit-identical for any thread count or scheduling order.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// `(t, x, out)`: vector-valued function of time and state written into `out`.
pub type VecFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x) -> value`.
pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `x -> value`.
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Uniform time discretization of `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite()) || t1 <= t0 {
            return Err(Error::InvalidGrid(format!("need finite t1 > t0, got [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        Ok(Self { t0, t1, n_steps })
    }

    /// Grid with step as close as possible to `dt`.
    pub fn with_dt(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        let n = ((t1 - t0) / dt).round().max(1.0) as usize;
        Self::new(t0, t1, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    /// Node time `t_k`; the last node is exactly `t1`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Index of the left node of the step containing `t`, clamped to
    /// `0..n_steps`.
    pub fn node_at(&self, t: f64) -> usize {
        if !(t > self.t0) {
            return 0;
        }
        let mut k = ((t - self.t0) / self.dt()).floor() as usize;
        k = k.min(self.n_steps - 1);
        if k + 1 < self.n_steps && self.time(k + 1) <= t {
            k += 1;
        }
        k
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// A controlled diffusion with path cost.
#[derive(Clone)]
pub struct ControlProblem {
    pub dim_x: usize,
    pub dim_w: usize,
    /// `b(t, x)`, length `dim_x`.
    pub drift: VecFn,
    /// `σ(t, x)`, row-major `dim_x × dim_w`.
    pub diffusion: VecFn,
    /// `V(t, x)`.
    pub running_cost: ScalarFn,
    /// `Φ(x)`.
    pub terminal_cost: TerminalFn,
    pub x0: Vec<f64>,
    pub grid: TimeGrid,
}

impl ControlProblem {
    /// Problem with zero drift, identity-like diffusion (`σ_ij = δ_ij`) and
    /// zero costs; override pieces with the `with_*` builders.
    pub fn new(dim_x: usize, dim_w: usize, x0: Vec<f64>, grid: TimeGrid) -> Result<Self> {
        if dim_x == 0 || dim_w == 0 {
            return Err(Error::InvalidProblem("state and noise dimensions must be positive".into()));
        }
        if x0.len() != dim_x {
            return Err(Error::InvalidProblem(format!(
                "x0 has length {}, expected {dim_x}",
                x0.len()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("x0 must be finite".into()));
        }
        Ok(Self {
            dim_x,
            dim_w,
            drift: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(move |_, _, out: &mut [f64]| {
                out.fill(0.0);
                for i in 0..dim_x.min(dim_w) {
                    out[i * dim_w + i] = 1.0;
                }
            }),
            running_cost: Arc::new(|_, _| 0.0),
            terminal_cost: Arc::new(|_| 0.0),
            x0,
            grid,
        })
    }

    pub fn with_drift(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_diffusion(
        mut self,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn with_running_cost(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running_cost = Arc::new(f);
        self
    }

    pub fn with_terminal_cost(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_cost = Arc::new(f);
        self
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = grid;
        self
    }
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("dim_x", &self.dim_x)
            .field("dim_w", &self.dim_w)
            .field("x0", &self.x0)
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

/// Known basis functions `h(t, x) ∈ ℝ^k` of a parametrized controller.
#[derive(Clone)]
pub struct BasisSet {
    name: String,
    k: usize,
    eval: VecFn,
}

impl BasisSet {
    pub fn new(
        name: impl Into<String>,
        k: usize,
        eval: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        assert!(k > 0, "a basis needs at least one function");
        Self { name: name.into(), k, eval: Arc::new(eval) }
    }

    /// The single function `h = 1` (open-loop controllers).
    pub fn constant() -> Self {
        Self::new("const", 1, |_, _, out| out[0] = 1.0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.k);
        (self.eval)(t, x, out)
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.eval(t, x, &mut out);
        out
    }
}

impl fmt::Debug for BasisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BasisSet({}, k={})", self.name, self.k)
    }
}

/// Closed-form control `u(t, x)`.
#[derive(Clone)]
pub struct AnalyticPolicy {
    name: String,
    f: VecFn,
}

impl AnalyticPolicy {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// `u(t, x) = A(t_k) h(t, x)` with `t_k` the left grid node of `t`.
#[derive(Clone)]
pub struct ParametrizedPolicy {
    grid: TimeGrid,
    basis: BasisSet,
    coefficients: Vec<DMatrix<f64>>,
}

impl ParametrizedPolicy {
    /// `coefficients[k]` is `A(t_k)` (`m × k_basis`) for `k = 0..n_steps`.
    pub fn new(grid: TimeGrid, basis: BasisSet, coefficients: Vec<DMatrix<f64>>) -> Result<Self> {
        if coefficients.len() != grid.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "need coefficients for {} nodes, got {}",
                grid.n_steps(),
                coefficients.len()
            )));
        }
        let m = coefficients[0].nrows();
        for (k, a) in coefficients.iter().enumerate() {
            if a.ncols() != basis.len() || a.nrows() != m || m == 0 {
                return Err(Error::InvalidArgument(format!(
                    "coefficient at node {k} has shape {}x{}, expected {m}x{}",
                    a.nrows(),
                    a.ncols(),
                    basis.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite coefficient at node {k}")));
            }
        }
        Ok(Self { grid, basis, coefficients })
    }

    /// All-zero coefficients.
    pub fn zeros(grid: TimeGrid, basis: BasisSet, dim_u: usize) -> Self {
        let k = basis.len();
        Self { grid, basis, coefficients: vec![DMatrix::zeros(dim_u, k); grid.n_steps()] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn coefficients(&self) -> &[DMatrix<f64>] {
        &self.coefficients
    }

    pub fn dim_u(&self) -> usize {
        self.coefficients[0].nrows()
    }

    fn eval_node(&self, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let a = &self.coefficients[k.min(self.coefficients.len() - 1)];
        let nb = self.basis.len();
        let mut stack = [0.0; 16];
        let mut heap;
        let h: &mut [f64] = if nb <= stack.len() {
            &mut stack[..nb]
        } else {
            heap = vec![0.0; nb];
            &mut heap
        };
        self.basis.eval(t, x, h);
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (c, hv) in h.iter().enumerate() {
                s += a[(r, c)] * hv;
            }
            *o = s;
        }
    }
}

/// A control function used to generate sample paths.
#[derive(Clone)]
pub enum Policy {
    Zero,
    Analytic(AnalyticPolicy),
    Parametrized(ParametrizedPolicy),
}

impl Policy {
    pub fn analytic(
        name: impl Into<String>,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Policy::Analytic(AnalyticPolicy { name: name.into(), f: Arc::new(f) })
    }

    /// Identifier recorded in ensembles sampled under this policy.
    pub fn id(&self) -> String {
        match self {
            Policy::Zero => "zero".to_string(),
            Policy::Analytic(p) => format!("analytic:{}", p.name),
            Policy::Parametrized(p) => format!("parametrized:{}", p.basis.name()),
        }
    }

    /// `u(t, x)`; parametrized policies use the coefficients of the left node.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Policy::Zero => out.fill(0.0),
            Policy::Analytic(p) => (p.f)(t, x, out),
            Policy::Parametrized(p) => p.eval_node(p.grid.node_at(t), t, x, out),
        }
    }

    /// Evaluation at grid node `k` (time `t = t_k`), avoiding a time lookup.
    pub fn eval_at_node(&self, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Policy::Parametrized(p) if p.grid.n_steps() > 0 => p.eval_node(k, t, x, out),
            _ => self.eval(t, x, out),
        }
    }

    pub fn as_parametrized(&self) -> Option<&ParametrizedPolicy> {
        match self {
            Policy::Parametrized(p) => Some(p),
            _ => None,
        }
    }
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Policy({})", self.id())
    }
}

/// What to do when a path produces a non-finite state or control.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Divergence {
    /// Fail the whole simulation, naming the path and step.
    #[default]
    Error,
    /// Mark the path as diverged: its state is held at the last finite value,
    /// later controls are zero and its cost is `+∞` (weight zero).
    Absorb,
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub divergence: Divergence,
}

impl SimOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self { n_paths, seed, threads: None, divergence: Divergence::Error }
    }

    pub fn threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    pub fn divergence(mut self, divergence: Divergence) -> Self {
        self.divergence = divergence;
        self
    }
}

/// Simulated paths with their noise and applied controls. Immutable.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    n_paths: usize,
    dim_x: usize,
    dim_w: usize,
    grid: TimeGrid,
    states: Vec<f64>,
    noise: Vec<f64>,
    controls: Vec<f64>,
    diverged_at: Vec<Option<usize>>,
    policy_id: String,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn policy_id(&self) -> &str {
        &self.policy_id
    }

    /// `X_i(t_k)` for `k = 0..=n_steps`.
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * (self.n_steps() + 1) + k) * self.dim_x;
        &self.states[off..off + self.dim_x]
    }

    /// `ΔW` of path `i` over step `k` (`k < n_steps`).
    pub fn noise(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * self.n_steps() + k) * self.dim_w;
        &self.noise[off..off + self.dim_w]
    }

    /// Control applied on step `k` of path `i`.
    pub fn control(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * self.n_steps() + k) * self.dim_w;
        &self.controls[off..off + self.dim_w]
    }

    pub fn path_states(&self, i: usize) -> &[f64] {
        let len = (self.n_steps() + 1) * self.dim_x;
        &self.states[i * len..(i + 1) * len]
    }

    pub fn path_noise(&self, i: usize) -> &[f64] {
        let len = self.n_steps() * self.dim_w;
        &self.noise[i * len..(i + 1) * len]
    }

    pub fn path_controls(&self, i: usize) -> &[f64] {
        let len = self.n_steps() * self.dim_w;
        &self.controls[i * len..(i + 1) * len]
    }

    /// Step at which path `i` diverged (only with [`Divergence::Absorb`]).
    pub fn diverged_at(&self, i: usize) -> Option<usize> {
        self.diverged_at[i]
    }

    pub fn is_diverged(&self, i: usize) -> bool {
        self.diverged_at[i].is_some()
    }

    pub fn n_diverged(&self) -> usize {
        self.diverged_at.iter().filter(|d| d.is_some()).count()
    }

    /// Verifies that every stored control equals `policy` evaluated at the
    /// stored state. Returns the first mismatching `(path, step)`.
    pub fn check_controls(&self, policy: &Policy) -> std::result::Result<(), (usize, usize)> {
        let mut u = vec![0.0; self.dim_w];
        for i in 0..self.n_paths {
            let stop = self.diverged_at[i].unwrap_or(self.n_steps());
            for k in 0..stop {
                policy.eval_at_node(k, self.grid.time(k), self.state(i, k), &mut u);
                if u.as_slice() != self.control(i, k) {
                    return Err((i, k));
                }
            }
        }
        Ok(())
    }

    /// Re-runs the Euler recursion on the stored increments.
    pub fn reconstruct_states(&self, problem: &ControlProblem, policy: &Policy) -> Result<Vec<f64>> {
        let mut states = vec![0.0; self.states.len()];
        let mut controls = vec![0.0; self.controls.len()];
        let sl = (self.n_steps() + 1) * self.dim_x;
        let cl = self.n_steps() * self.dim_w;
        for i in 0..self.n_paths {
            euler_path(
                problem,
                policy,
                self.path_noise(i),
                &mut states[i * sl..(i + 1) * sl],
                &mut controls[i * cl..(i + 1) * cl],
                Divergence::Absorb,
            )
            .map_err(|step| Error::NonFinite { path: i, step })?;
        }
        Ok(states)
    }
}

/// Simulates `n_paths` paths with default options.
pub fn simulate(problem: &ControlProblem, policy: &Policy, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    simulate_with(problem, policy, &SimOptions::new(n_paths, seed))
}

pub fn simulate_with(problem: &ControlProblem, policy: &Policy, opts: &SimOptions) -> Result<PathEnsemble> {
    if opts.n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if let Some(p) = policy.as_parametrized() {
        if p.grid() != &problem.grid {
            return Err(Error::GridMismatch);
        }
        if p.dim_u() != problem.dim_w {
            return Err(Error::InvalidArgument(format!(
                "policy has {} outputs, problem has {} noise dimensions",
                p.dim_u(),
                problem.dim_w
            )));
        }
    }
    match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(|| run_simulation(problem, policy, opts))
        }
        None => run_simulation(problem, policy, opts),
    }
}

fn run_simulation(problem: &ControlProblem, policy: &Policy, opts: &SimOptions) -> Result<PathEnsemble> {
    let n = problem.grid.n_steps();
    let (dx, dw) = (problem.dim_x, problem.dim_w);
    let sl = (n + 1) * dx;
    let nl = n * dw;
    let mut states = vec![0.0; opts.n_paths * sl];
    let mut noise = vec![0.0; opts.n_paths * nl];
    let mut controls = vec![0.0; opts.n_paths * nl];
    let sqrt_dt = problem.grid.dt().sqrt();

    let outcome: Vec<std::result::Result<Option<usize>, usize>> = states
        .par_chunks_mut(sl)
        .zip(noise.par_chunks_mut(nl))
        .zip(controls.par_chunks_mut(nl))
        .enumerate()
        .map(|(i, ((xs, dws), us))| {
            fill_noise(opts.seed, i as u64, dw, sqrt_dt, dws);
            euler_path(problem, policy, dws, xs, us, opts.divergence)
        })
        .collect();

    let mut diverged_at = Vec::with_capacity(opts.n_paths);
    for (i, r) in outcome.into_iter().enumerate() {
        match r {
            Ok(d) => diverged_at.push(d),
            Err(step) => return Err(Error::NonFinite { path: i, step }),
        }
    }

    Ok(PathEnsemble {
        n_paths: opts.n_paths,
        dim_x: dx,
        dim_w: dw,
        grid: problem.grid,
        states,
        noise,
        controls,
        diverged_at,
        policy_id: policy.id(),
    })
}

/// Brownian increments `ΔW ~ N(0, dt·I)` for one path.
fn fill_noise(seed: u64, path: u64, dim_w: usize, sqrt_dt: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    debug_assert_eq!(out.len() % dim_w, 0);
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z * sqrt_dt;
    }
}

/// Euler–Maruyama recursion for one path given its increments.
///
/// `Ok(None)`: path finished. `Ok(Some(k))`: diverged at step `k` (absorbed).
/// `Err(k)`: non-finite value at step `k` under [`Divergence::Error`].
pub(crate) fn euler_path(
    problem: &ControlProblem,
    policy: &Policy,
    noise: &[f64],
    states: &mut [f64],
    controls: &mut [f64],
    divergence: Divergence,
) -> std::result::Result<Option<usize>, usize> {
    let grid = &problem.grid;
    let n = grid.n_steps();
    let (dx, dw) = (problem.dim_x, problem.dim_w);
    let dt = grid.dt();
    let mut b = vec![0.0; dx];
    let mut sigma = vec![0.0; dx * dw];
    let mut kick = vec![0.0; dw];

    states[..dx].copy_from_slice(&problem.x0);
    for k in 0..n {
        let t = grid.time(k);
        let (head, tail) = states.split_at_mut((k + 1) * dx);
        let x = &head[k * dx..];
        let next = &mut tail[..dx];
        let u = &mut controls[k * dw..(k + 1) * dw];

        policy.eval_at_node(k, t, x, u);
        (problem.drift)(t, x, &mut b);
        (problem.diffusion)(t, x, &mut sigma);
        let dwk = &noise[k * dw..(k + 1) * dw];
        for j in 0..dw {
            kick[j] = u[j] * dt + dwk[j];
        }
        for r in 0..dx {
            let mut s = x[r] + b[r] * dt;
            for j in 0..dw {
                s += sigma[r * dw + j] * kick[j];
            }
            next[r] = s;
        }

        let finite = u.iter().all(|v| v.is_finite()) && next.iter().all(|v| v.is_finite());
        if !finite {
            match divergence {
                Divergence::Error => return Err(k),
                Divergence::Absorb => {
                    if u.iter().any(|v| !v.is_finite()) {
                        u.fill(0.0);
                    }
                    for kk in k..n {
                        let (head, tail) = states.split_at_mut((kk + 1) * dx);
                        tail[..dx].copy_from_slice(&head[kk * dx..]);
                        if kk > k {
                            controls[kk * dw..(kk + 1) * dw].fill(0.0);
                        }
                    }
                    return Ok(Some(k));
                }
            }
        }
    }
    Ok(None)
}
