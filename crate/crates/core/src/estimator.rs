//! Weighted path averages and the parametrized feedback fit.
//!
//! With `⟨Y⟩(t) = E[α Y(t)]` the weighted average over an ensemble sampled
//! under `u`, the optimal control satisfies, for any test function `f`,
//!
//! ```text
//! ⟨(u* − u) f'⟩(t) = lim_{r→t} ⟨ (W(r) − W(t)) f(t)' / (r − t) ⟩
//! ```
//!
//! If `u* = A(t) h(t, x)`, then `A(t) ⟨h f'⟩ = ⟨u f'⟩ + ⟨ΔW f'⟩/Δt`, one small
//! linear system per grid node. [`fit_feedback`] assembles those systems from
//! a single ensemble and solves them independently.
//!
//! The limit is realized by a finite quotient over `window_steps` grid steps
//! (`1` = the single step `ΔW_k / dt`). Because `E[ΔW f] = 0` under the
//! sampling measure, the increment term may also be computed with centered
//! weights `α − 1`; the expectation is unchanged and the variance shrinks to
//! roughly `Var(α)` times the uncentered one, which matters once the sampler
//! is close to optimal.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cost::WeightSet;
use crate::error::{Error, Result};
use crate::sde::{BasisSet, ParametrizedPolicy, PathEnsemble, Policy, TimeGrid};
use crate::stats;

/// Test functions `f(t, x) ∈ ℝ^l` share the representation of a basis.
pub type TestFunctions = BasisSet;

/// How the `r → t` limit in the control correction is discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrectionOptions {
    /// Number of grid steps in the increment quotient (truncated at the horizon).
    pub window_steps: usize,
    /// Use `α − 1` instead of `α` for the increment term.
    pub centered: bool,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        Self { window_steps: 1, centered: false }
    }
}

impl CorrectionOptions {
    pub fn window(mut self, steps: usize) -> Self {
        self.window_steps = steps;
        self
    }

    pub fn centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }
}

/// Ridge added to the normal matrix `G G'` of each node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `1e-8 · trace(G G') / k_basis`, per node.
    Auto,
    Fixed(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Auto
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FitOptions {
    pub ridge: Ridge,
    pub correction: CorrectionOptions,
}

/// Weighted moments per grid node.
#[derive(Clone, Debug)]
pub struct MomentSeries {
    /// `⟨h f'⟩`, `k_basis × l`.
    pub g: Vec<DMatrix<f64>>,
    /// `⟨u f'⟩`, `m × l`.
    pub u: Vec<DMatrix<f64>>,
    /// Increment term `⟨ΔW f'⟩ / Δt`, `m × l`.
    pub d: Vec<DMatrix<f64>>,
}

/// Per-node coefficients with conditioning diagnostics.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub grid: TimeGrid,
    pub basis: BasisSet,
    /// `A(t_k)`, `m × k_basis`.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Smallest singular value of `G G' + ridge·I` per node.
    pub min_singular: Vec<f64>,
    /// Ridge used per node.
    pub ridge: Vec<f64>,
}

impl FitResult {
    pub fn policy(&self) -> Result<Policy> {
        Ok(Policy::Parametrized(ParametrizedPolicy::new(
            self.grid,
            self.basis.clone(),
            self.coefficients.clone(),
        )?))
    }
}

fn check_weights(ensemble: &PathEnsemble, w: &WeightSet) -> Result<()> {
    if w.len() != ensemble.n_paths() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} paths",
            w.len(),
            ensemble.n_paths()
        )));
    }
    Ok(())
}

fn check_node(ensemble: &PathEnsemble, k: usize) -> Result<()> {
    if k >= ensemble.n_steps() {
        return Err(Error::NodeOutOfRange { node: k, n_steps: ensemble.n_steps() });
    }
    Ok(())
}

/// `mean_i α_i f(t_k, X_ik)`. Node `k` may be `n_steps` (the final time).
pub fn weighted_average(ensemble: &PathEnsemble, w: &WeightSet, f: &TestFunctions, k: usize) -> Result<Vec<f64>> {
    check_weights(ensemble, w)?;
    if k > ensemble.n_steps() {
        return Err(Error::NodeOutOfRange { node: k, n_steps: ensemble.n_steps() });
    }
    let t = ensemble.grid().time(k);
    let l = f.len();
    let mut acc = vec![0.0; l];
    let mut fv = vec![0.0; l];
    for i in 0..ensemble.n_paths() {
        let a = w.weights[i];
        if a == 0.0 {
            continue;
        }
        f.eval(t, ensemble.state(i, k), &mut fv);
        for j in 0..l {
            acc[j] += a * fv[j];
        }
    }
    let n = ensemble.n_paths() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Estimate of `⟨(u* − u) f'⟩(t_k)` (`m × l`) with the single-step quotient.
pub fn control_correction(ensemble: &PathEnsemble, w: &WeightSet, f: &TestFunctions, k: usize) -> Result<DMatrix<f64>> {
    control_correction_with(ensemble, w, f, k, CorrectionOptions::default())
}

pub fn control_correction_with(
    ensemble: &PathEnsemble,
    w: &WeightSet,
    f: &TestFunctions,
    k: usize,
    opts: CorrectionOptions,
) -> Result<DMatrix<f64>> {
    check_weights(ensemble, w)?;
    check_node(ensemble, k)?;
    check_window(opts)?;
    let idx: Vec<usize> = (0..ensemble.n_paths()).collect();
    Ok(increment_term(ensemble, &w.weights, &idx, f, k, opts))
}

/// Control correction with a batch standard error: the totals are split into
/// 10 contiguous groups, each weighted with its own normalization. Returns
/// `(full-ensemble estimate, elementwise standard error)`.
pub fn control_correction_batched(
    ensemble: &PathEnsemble,
    totals: &[f64],
    f: &TestFunctions,
    k: usize,
    opts: CorrectionOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if totals.len() != ensemble.n_paths() {
        return Err(Error::InvalidArgument("cost totals do not match the ensemble".into()));
    }
    let full = control_correction_with(ensemble, &WeightSet::from_costs(totals)?, f, k, opts)?;
    let mut parts = Vec::new();
    for r in stats::batch_ranges(totals.len(), stats::N_BATCHES) {
        let ws = WeightSet::from_costs(&totals[r.clone()])?;
        let idx: Vec<usize> = r.collect();
        parts.push(increment_term(ensemble, &ws.weights, &idx, f, k, opts));
    }
    let se = DMatrix::from_fn(full.nrows(), full.ncols(), |a, b| {
        let v: Vec<f64> = parts.iter().map(|p| p[(a, b)]).collect();
        stats::mean_and_se(&v).1
    });
    Ok((full, se))
}

fn check_window(opts: CorrectionOptions) -> Result<()> {
    if opts.window_steps == 0 {
        return Err(Error::InvalidArgument("window_steps must be at least 1".into()));
    }
    Ok(())
}

/// `⟨(W(t_r) − W(t_k)) f(t_k)'⟩ / (t_r − t_k)` over the paths `idx`, where
/// `weights[j]` belongs to path `idx[j]`.
fn increment_term(
    ensemble: &PathEnsemble,
    weights: &[f64],
    idx: &[usize],
    f: &TestFunctions,
    k: usize,
    opts: CorrectionOptions,
) -> DMatrix<f64> {
    let m = ensemble.dim_w();
    let l = f.len();
    let n = ensemble.n_steps();
    let end = (k + opts.window_steps).min(n);
    let span = ensemble.grid().time(end) - ensemble.grid().time(k);
    let t = ensemble.grid().time(k);
    let mut acc = DMatrix::zeros(m, l);
    let mut plain = DMatrix::zeros(m, l);
    let mut live = 0usize;
    let mut fv = vec![0.0; l];
    let mut inc = vec![0.0; m];
    for (j, &i) in idx.iter().enumerate() {
        let a = weights[j];
        if ensemble.is_diverged(i) {
            continue;
        }
        live += 1;
        f.eval(t, ensemble.state(i, k), &mut fv);
        inc.fill(0.0);
        for s in k..end {
            for (c, d) in inc.iter_mut().zip(ensemble.noise(i, s)) {
                *c += d;
            }
        }
        for r in 0..m {
            for c in 0..l {
                let v = inc[r] * fv[c];
                acc[(r, c)] += a * v;
                plain[(r, c)] += v;
            }
        }
    }
    let mut out = acc / (idx.len() as f64 * span);
    if opts.centered && live > 0 {
        out -= plain / (live as f64 * span);
    }
    out
}

/// Paths per accumulation chunk; chunk partial sums are added in index order
/// so the result does not depend on the thread count.
const CHUNK: usize = 128;

/// `⟨h f'⟩`, `⟨u f'⟩` and the increment term at every node.
pub fn moments(
    ensemble: &PathEnsemble,
    w: &WeightSet,
    basis: &BasisSet,
    test: &TestFunctions,
    opts: CorrectionOptions,
) -> Result<MomentSeries> {
    check_weights(ensemble, w)?;
    check_window(opts)?;
    let n = ensemble.n_steps();
    let (kb, l, m) = (basis.len(), test.len(), ensemble.dim_w());
    let np = ensemble.n_paths();
    let grid = *ensemble.grid();
    let times: Vec<f64> = (0..=n).map(|k| grid.time(k)).collect();

    // per node: g (kb·l), u (m·l), weighted increment (m·l), plain increment (m·l), live count
    let stride = kb * l + 3 * m * l + 1;
    let starts: Vec<usize> = (0..np).step_by(CHUNK).collect();
    let partials: Vec<Vec<f64>> = starts
        .into_par_iter()
        .map(|p0| {
            let mut acc = vec![0.0; n * stride];
            let mut hv = vec![0.0; kb];
            let mut fv = vec![0.0; l];
            let mut cum = vec![0.0; (n + 1) * m];
            for i in p0..(p0 + CHUNK).min(np) {
                if ensemble.is_diverged(i) {
                    continue;
                }
                let a = w.weights[i];
                let noise = ensemble.path_noise(i);
                for s in 0..n {
                    for r in 0..m {
                        cum[(s + 1) * m + r] = cum[s * m + r] + noise[s * m + r];
                    }
                }
                for k in 0..n {
                    let t = times[k];
                    let x = ensemble.state(i, k);
                    test.eval(t, x, &mut fv);
                    basis.eval(t, x, &mut hv);
                    let uk = ensemble.control(i, k);
                    let end = (k + opts.window_steps).min(n);
                    let node = &mut acc[k * stride..(k + 1) * stride];
                    let (g, rest) = node.split_at_mut(kb * l);
                    let (u, rest) = rest.split_at_mut(m * l);
                    let (dw, rest) = rest.split_at_mut(m * l);
                    let (dp, live) = rest.split_at_mut(m * l);
                    live[0] += 1.0;
                    for c in 0..l {
                        let af = a * fv[c];
                        for r in 0..kb {
                            g[r * l + c] += hv[r] * af;
                        }
                        for r in 0..m {
                            u[r * l + c] += uk[r] * af;
                            let inc = cum[end * m + r] - cum[k * m + r];
                            dw[r * l + c] += inc * af;
                            dp[r * l + c] += inc * fv[c];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; n * stride];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }

    let npf = np as f64;
    let mut series = MomentSeries { g: Vec::with_capacity(n), u: Vec::with_capacity(n), d: Vec::with_capacity(n) };
    for k in 0..n {
        let node = &total[k * stride..(k + 1) * stride];
        let span = times[(k + opts.window_steps).min(n)] - times[k];
        let live = node[stride - 1];
        let at = |off: usize, rows: usize| DMatrix::from_fn(rows, l, |r, c| node[off + r * l + c]);
        let g = at(0, kb) / npf;
        let u = at(kb * l, m) / npf;
        let mut d = at(kb * l + m * l, m) / (npf * span);
        if opts.centered && live > 0.0 {
            d -= at(kb * l + 2 * m * l, m) / (live * span);
        }
        series.g.push(g);
        series.u.push(u);
        series.d.push(d);
    }
    Ok(series)
}

/// Solves `A_k (G_k G_k' + ridge·I) = (U_k + D_k) G_k'` at every node.
pub fn fit_feedback(
    ensemble: &PathEnsemble,
    w: &WeightSet,
    basis: &BasisSet,
    test: &TestFunctions,
    opts: FitOptions,
) -> Result<FitResult> {
    if test.len() < basis.len() {
        return Err(Error::InvalidArgument(format!(
            "need at least as many test functions ({}) as basis functions ({})",
            test.len(),
            basis.len()
        )));
    }
    if let Ridge::Fixed(r) = opts.ridge {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {r}")));
        }
    }
    let mom = moments(ensemble, w, basis, test, opts.correction)?;
    let grid = *ensemble.grid();
    let solved: Vec<Result<(DMatrix<f64>, f64, f64)>> = (0..grid.n_steps())
        .into_par_iter()
        .map(|k| solve_node(&mom.g[k], &(&mom.u[k] + &mom.d[k]), opts.ridge, k, grid.time(k)))
        .collect();

    let mut out = FitResult {
        grid,
        basis: basis.clone(),
        coefficients: Vec::with_capacity(grid.n_steps()),
        min_singular: Vec::with_capacity(grid.n_steps()),
        ridge: Vec::with_capacity(grid.n_steps()),
    };
    for r in solved {
        let (a, s, rg) = r?;
        out.coefficients.push(a);
        out.min_singular.push(s);
        out.ridge.push(rg);
    }
    Ok(out)
}

const SINGULAR_TOL: f64 = 1e-12;

fn solve_node(g: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: Ridge, node: usize, time: f64) -> Result<(DMatrix<f64>, f64, f64)> {
    let kb = g.nrows();
    let gram = g * g.transpose();
    let r = match ridge {
        Ridge::Auto => 1e-8 * gram.trace() / kb as f64,
        Ridge::Fixed(r) => r,
    };
    let normal = &gram + DMatrix::identity(kb, kb) * r;
    let sigma_min = normal
        .clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if r == 0.0 && !(sigma_min >= SINGULAR_TOL) {
        return Err(Error::SingularFit { node, time, sigma_min });
    }
    // A M = R G'  with M symmetric  =>  M A' = G R'
    let b = g * rhs.transpose();
    let at = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => normal
            .svd(true, true)
            .solve(&b, f64::EPSILON)
            .map_err(|_| Error::NonFiniteFit { node, time })?,
    };
    let a = at.transpose();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFit { node, time });
    }
    Ok((a, sigma_min, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{path_costs, weights};
    use crate::sde::{simulate, ControlProblem};
    use approx::assert_relative_eq;

    fn frozen(x0: f64) -> ControlProblem {
        ControlProblem::new(1, 1, vec![x0], TimeGrid::new(0.0, 1.0, 20).unwrap())
            .unwrap()
            .with_diffusion(|_, _, out| out[0] = 0.0)
    }

    fn identity_fn() -> TestFunctions {
        BasisSet::new("x", 1, |_, x, out| out[0] = x[0])
    }

    #[test]
    fn constant_test_function_averages_to_one() {
        let p = ControlProblem::new(1, 1, vec![0.0], TimeGrid::new(0.0, 1.0, 20).unwrap())
            .unwrap()
            .with_terminal_cost(|x| x[0] * x[0]);
        let e = simulate(&p, &Policy::Zero, 300, 2).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        for k in [0, 7, 20] {
            let v = weighted_average(&e, &w, &BasisSet::constant(), k).unwrap();
            assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn frozen_dynamics_average_to_initial_state() {
        let p = frozen(0.7);
        let e = simulate(&p, &Policy::Zero, 10, 1).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        assert_relative_eq!(weighted_average(&e, &w, &identity_fn(), 13).unwrap()[0], 0.7, epsilon = 1e-14);
    }

    #[test]
    fn node_range_is_checked() {
        let p = frozen(0.0);
        let e = simulate(&p, &Policy::Zero, 4, 1).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        assert!(matches!(
            weighted_average(&e, &w, &identity_fn(), 21),
            Err(Error::NodeOutOfRange { node: 21, .. })
        ));
        assert!(control_correction(&e, &w, &identity_fn(), 20).is_err());
        assert!(control_correction_with(&e, &w, &identity_fn(), 0, CorrectionOptions::default().window(0)).is_err());
    }

    #[test]
    fn singular_system_without_ridge_is_reported() {
        // every path sits at x0 = 0, so h = x gives a zero normal matrix
        let p = frozen(0.0);
        let e = simulate(&p, &Policy::Zero, 8, 1).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        let opts = FitOptions { ridge: Ridge::Fixed(0.0), ..Default::default() };
        let err = fit_feedback(&e, &w, &identity_fn(), &identity_fn(), opts).unwrap_err();
        assert!(matches!(err, Error::SingularFit { node: 0, .. }), "{err:?}");
        let ok = fit_feedback(&e, &w, &identity_fn(), &identity_fn(), FitOptions { ridge: Ridge::Fixed(1e-6), ..Default::default() });
        assert!(ok.is_ok());
    }

    #[test]
    fn too_few_test_functions_is_rejected() {
        let p = frozen(1.0);
        let e = simulate(&p, &Policy::Zero, 4, 1).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        let two = BasisSet::new("1,x", 2, |_, x, out| {
            out[0] = 1.0;
            out[1] = x[0];
        });
        assert!(fit_feedback(&e, &w, &two, &BasisSet::constant(), FitOptions::default()).is_err());
    }

    #[test]
    fn fit_shapes_cover_every_node() {
        let p = ControlProblem::new(2, 2, vec![0.1, -0.2], TimeGrid::new(0.0, 1.0, 15).unwrap())
            .unwrap()
            .with_terminal_cost(|x| x[0] * x[0] + x[1] * x[1]);
        let e = simulate(&p, &Policy::Zero, 200, 3).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        let basis = BasisSet::new("1,x0,x1", 3, |_, x, out| {
            out[0] = 1.0;
            out[1] = x[0];
            out[2] = x[1];
        });
        let fit = fit_feedback(&e, &w, &basis, &basis, FitOptions::default()).unwrap();
        assert_eq!(fit.coefficients.len(), 15);
        assert!(fit.coefficients.iter().all(|a| a.shape() == (2, 3)));
        assert_eq!(fit.min_singular.len(), 15);
        assert!(fit.policy().is_ok());
    }

    #[test]
    fn scalar_fit_equals_correction_plus_control() {
        let p = ControlProblem::new(1, 1, vec![0.0], TimeGrid::new(0.0, 1.0, 10).unwrap())
            .unwrap()
            .with_terminal_cost(|x| (x[0] - 1.0).powi(2));
        let pol = Policy::analytic("c", |_, _, out| out[0] = 0.25);
        let e = simulate(&p, &pol, 500, 11).unwrap();
        let w = weights(&path_costs(&e, &p).unwrap()).unwrap();
        let one = BasisSet::constant();
        let fit = fit_feedback(&e, &w, &one, &one, FitOptions { ridge: Ridge::Fixed(0.0), ..Default::default() }).unwrap();
        let corr = control_correction(&e, &w, &one, 0).unwrap();
        assert_relative_eq!(fit.coefficients[0][(0, 0)], corr[(0, 0)] + 0.25, epsilon = 1e-12);
    }
}
