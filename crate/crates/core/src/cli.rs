//! Batch front end: experiment configuration, command dispatch and artifact
//! writing. Every artifact carries the seed, step size, path count, a hash of
//! the effective configuration and the configuration itself.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench_gbm::{self, BenchConfig, ControllerBasis, GbmSpec};
use crate::cost;
use crate::error::Error;
use crate::estimator::{CorrectionOptions, Ridge};
use crate::iis::{self, IisConfig, IterationReport};
use crate::sde::{simulate_with, BasisSet, ControlProblem, Divergence, ParametrizedPolicy, Policy, SimOptions, TimeGrid};
use crate::stats::derive_seed;

pub use expr::Expr;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::InvalidProblem(_)
            | Error::InvalidArgument(_)
            | Error::GridMismatch
            | Error::Cfl { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub policy: PolicyConfig,
    /// Controller basis for `fit`: const, affine, quadratic or log.
    pub basis: String,
    /// Test functions for `fit`; the basis itself when absent.
    pub test_functions: Option<String>,
    pub sampler: SamplerConfig,
    pub iis: IisSettings,
    pub bench: BenchSettings,
    pub output: OutputConfig,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::Gbm(GbmProblem::default()),
            grid: GridConfig::default(),
            policy: PolicyConfig::Zero {},
            basis: "log".into(),
            test_functions: None,
            sampler: SamplerConfig::default(),
            iis: IisSettings::default(),
            bench: BenchSettings::default(),
            output: OutputConfig::default(),
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProblemConfig {
    Gbm(GbmProblem),
    Custom(CustomProblem),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbmProblem {
    pub q: f64,
    pub x0: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Default for GbmProblem {
    fn default() -> Self {
        let s = GbmSpec::default();
        Self { q: s.q, x0: s.x0, t0: s.t0, t1: s.t1 }
    }
}

/// One-dimensional problem given by expressions in `t` and `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomProblem {
    pub drift: String,
    pub diffusion: String,
    pub running_cost: String,
    pub terminal_cost: String,
    pub x0: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Default for CustomProblem {
    fn default() -> Self {
        Self {
            drift: "0".into(),
            diffusion: "1".into(),
            running_cost: "0".into(),
            terminal_cost: "0".into(),
            x0: 0.0,
            t0: 0.0,
            t1: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dt: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dt: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyConfig {
    Zero {},
    /// Closed-form optimal controller (gbm only).
    Analytic {},
    /// Coefficients CSV written by `fit`.
    Coefficients { path: PathBuf, basis: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceConfig {
    Error,
    Absorb,
}

impl From<DivergenceConfig> for Divergence {
    fn from(d: DivergenceConfig) -> Self {
        match d {
            DivergenceConfig::Error => Divergence::Error,
            DivergenceConfig::Absorb => Divergence::Absorb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub divergence: DivergenceConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_paths: 10_000, seed: 1, divergence: DivergenceConfig::Error }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IisSettings {
    pub rounds: usize,
    pub damping: f64,
    /// Fixed ridge; automatic when absent.
    pub ridge: Option<f64>,
    /// Time span of the increment quotient (one step when `<= dt`).
    pub correction_window: f64,
    pub centered: bool,
    pub divergence: DivergenceConfig,
}

impl Default for IisSettings {
    fn default() -> Self {
        Self {
            rounds: 2,
            damping: 1.0,
            ridge: None,
            correction_window: 0.05,
            centered: true,
            divergence: DivergenceConfig::Absorb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// Seeds `seed, seed + 1, …` for the controller table.
    pub n_seeds: usize,
    pub rounds: usize,
    pub epsilons: Vec<f64>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { n_seeds: 5, rounds: 3, epsilons: vec![0.05, 0.1, 0.2, 0.4, 0.6, 0.8] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub dt: Option<f64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    /// Parses a JSON configuration; errors name the line, column and key.
    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.sampler.seed = s;
        }
        if let Some(n) = o.n_paths {
            self.sampler.n_paths = n;
        }
        if let Some(dt) = o.dt {
            self.grid.dt = dt;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }

    fn validate(&self) -> CliResult<()> {
        if self.sampler.n_paths == 0 {
            return Err(CliError::Config("sampler.n_paths must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    fn is_gbm(&self) -> bool {
        matches!(self.problem, ProblemConfig::Gbm(_))
    }

    fn grid(&self) -> CliResult<TimeGrid> {
        let (t0, t1) = match &self.problem {
            ProblemConfig::Gbm(g) => (g.t0, g.t1),
            ProblemConfig::Custom(c) => (c.t0, c.t1),
        };
        Ok(TimeGrid::with_dt(t0, t1, self.grid.dt)?)
    }

    pub fn gbm_spec(&self) -> CliResult<GbmSpec> {
        match &self.problem {
            ProblemConfig::Gbm(g) => {
                let spec = GbmSpec { q: g.q, x0: g.x0, t0: g.t0, t1: g.t1, n_steps: self.grid()?.n_steps() };
                spec.validate()?;
                Ok(spec)
            }
            ProblemConfig::Custom(_) => Err(CliError::Config("this command needs problem.kind = \"gbm\"".into())),
        }
    }

    /// The simulated problem. The gbm benchmark is simulated in `y = log x`.
    pub fn build_problem(&self) -> CliResult<ControlProblem> {
        match &self.problem {
            ProblemConfig::Gbm(_) => Ok(bench_gbm::make_log_problem(&self.gbm_spec()?)?),
            ProblemConfig::Custom(c) => {
                let parse = |key: &str, s: &str| {
                    Expr::parse(s).map_err(|e| CliError::Config(format!("problem.{key}: {e}")))
                };
                let b = Arc::new(parse("drift", &c.drift)?);
                let s = Arc::new(parse("diffusion", &c.diffusion)?);
                let v = Arc::new(parse("running_cost", &c.running_cost)?);
                let phi = Arc::new(parse("terminal_cost", &c.terminal_cost)?);
                let grid = self.grid()?;
                let t1 = grid.t1();
                Ok(ControlProblem::new(1, 1, vec![c.x0], grid)?
                    .with_drift(move |t, x, out| out[0] = b.eval(t, x[0]))
                    .with_diffusion(move |t, x, out| out[0] = s.eval(t, x[0]))
                    .with_running_cost(move |t, x| v.eval(t, x[0]))
                    .with_terminal_cost(move |x| phi.eval(t1, x[0])))
            }
        }
    }

    /// Named basis in the coordinates of the simulated state.
    pub fn basis_named(&self, name: &str) -> CliResult<BasisSet> {
        let b = ControllerBasis::parse(name).ok_or_else(|| {
            CliError::Config(format!("unknown basis {name:?} (expected const, affine, quadratic or log)"))
        })?;
        Ok(if self.is_gbm() { b.log_basis() } else { b.x_basis() })
    }

    pub fn build_policy(&self, problem: &ControlProblem) -> CliResult<Policy> {
        match &self.policy {
            PolicyConfig::Zero {} => Ok(Policy::Zero),
            PolicyConfig::Analytic {} => Ok(bench_gbm::analytic_control_log(&self.gbm_spec()?)),
            PolicyConfig::Coefficients { path, basis } => {
                let basis = self.basis_named(basis)?;
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let coeffs = parse_coefficients_csv(&text, &problem.grid, problem.dim_w, basis.len())?;
                Ok(Policy::Parametrized(ParametrizedPolicy::new(problem.grid, basis, coeffs)?))
            }
        }
    }

    fn iis_config(&self, grid: &TimeGrid) -> CliResult<IisConfig> {
        let cfg = IisConfig {
            n_paths: self.sampler.n_paths,
            n_rounds: self.iis.rounds,
            ridge: self.ridge()?,
            damping: self.iis.damping,
            seed: self.sampler.seed,
            correction: self.correction(grid),
            divergence: self.iis.divergence.into(),
            threads: self.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn ridge(&self) -> CliResult<Ridge> {
        match self.iis.ridge {
            None => Ok(Ridge::Auto),
            Some(r) if r >= 0.0 && r.is_finite() => Ok(Ridge::Fixed(r)),
            Some(r) => Err(CliError::Config(format!("iis.ridge must be >= 0, got {r}"))),
        }
    }

    fn correction(&self, grid: &TimeGrid) -> CorrectionOptions {
        let steps = (self.iis.correction_window / grid.dt()).round().max(1.0) as usize;
        CorrectionOptions { window_steps: steps, centered: self.iis.centered }
    }

    fn bench_config(&self) -> CliResult<BenchConfig> {
        if self.bench.n_seeds == 0 {
            return Err(CliError::Config("bench.n_seeds must be at least 1".into()));
        }
        Ok(BenchConfig {
            n_paths: self.sampler.n_paths,
            seeds: (0..self.bench.n_seeds as u64).map(|i| self.sampler.seed.wrapping_add(i)).collect(),
            rounds: self.bench.rounds,
            damping: self.iis.damping,
            ridge: self.ridge()?,
            correction_window: self.iis.correction_window,
            centered: self.iis.centered,
            threads: self.threads,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// Provenance
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub n_paths: usize,
    pub config: ExperimentConfig,
}

impl Metadata {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        let config_hash = config.hash();
        let run_id = hex(&Sha256::digest(format!("{command}\n{config_hash}").as_bytes()))[..12].to_string();
        Self {
            command: command.into(),
            run_id,
            config_hash,
            seed: config.sampler.seed,
            dt: config.grid.dt,
            n_paths: config.sampler.n_paths,
            config: config.clone(),
        }
    }

    /// `# key=value` lines placed above a CSV header.
    pub fn csv_preamble(&self) -> String {
        format!(
            "# command={}\n# run_id={}\n# seed={}\n# dt={}\n# n_paths={}\n# config_hash={}\n# config={}\n",
            self.command,
            self.run_id,
            self.seed,
            self.dt,
            self.n_paths,
            self.config_hash,
            self.config.to_json()
        )
    }
}

/// Configuration embedded in a CSV artifact.
pub fn config_from_csv(text: &str) -> CliResult<ExperimentConfig> {
    let line = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# config="))
        .ok_or_else(|| CliError::Config("no embedded config".into()))?;
    ExperimentConfig::parse(line)
}

fn write_file(dir: &Path, name: &str, content: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, content)?;
    Ok(p)
}

fn write_csv(dir: &Path, name: &str, meta: &Metadata, body: &str) -> CliResult<PathBuf> {
    write_file(dir, name, &(meta.csv_preamble() + body))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    write_file(dir, name, &s)
}

// ---------------------------------------------------------------------------
// Coefficient files
// ---------------------------------------------------------------------------

/// `t, a_00, a_01, …` per node, entries of `A(t_k)` row-major.
pub fn coefficients_csv(grid: &TimeGrid, coefficients: &[DMatrix<f64>]) -> String {
    let (m, k) = coefficients.first().map(|a| a.shape()).unwrap_or((0, 0));
    let mut s = String::from("t");
    for r in 0..m {
        for c in 0..k {
            let _ = write!(s, ",a_{r}_{c}");
        }
    }
    s.push('\n');
    for (n, a) in coefficients.iter().enumerate() {
        let _ = write!(s, "{}", grid.time(n));
        for r in 0..m {
            for c in 0..k {
                let _ = write!(s, ",{}", a[(r, c)]);
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_coefficients_csv(text: &str, grid: &TimeGrid, m: usize, k: usize) -> CliResult<Vec<DMatrix<f64>>> {
    let bad = |line: usize, msg: String| CliError::Config(format!("coefficients line {}: {msg}", line + 1));
    let mut rows = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    rows.next().ok_or_else(|| CliError::Config("coefficients file is empty".into()))?;
    let mut out = Vec::with_capacity(grid.n_steps());
    for (ln, l) in rows {
        let vals = l
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(ln, e.to_string()))?;
        if vals.len() != 1 + m * k {
            return Err(bad(ln, format!("expected {} columns, found {}", 1 + m * k, vals.len())));
        }
        let n = out.len();
        if n >= grid.n_steps() || (vals[0] - grid.time(n)).abs() > 1e-9 * (1.0 + grid.time(n).abs()) {
            return Err(bad(ln, format!("time {} does not match grid node {n}", vals[0])));
        }
        out.push(DMatrix::from_row_slice(m, k, &vals[1..]));
    }
    if out.len() != grid.n_steps() {
        return Err(CliError::Config(format!("{} coefficient rows for {} grid nodes", out.len(), grid.n_steps())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "ES")]
    pub es: f64,
    #[serde(rename = "ES_se")]
    pub es_se: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "J_se")]
    pub j_se: f64,
    pub var_alpha: f64,
    pub lambda: f64,
    pub n_paths: usize,
    pub n_diverged: usize,
    pub seed: u64,
    pub policy: String,
    pub metadata: Metadata,
}

fn summary(s: &cost::CostSummary, seed: u64, policy: &Policy, meta: Metadata) -> Summary {
    Summary {
        es: s.expected_cost,
        es_se: s.expected_cost_se,
        j: s.value,
        j_se: s.value_se,
        var_alpha: s.var_alpha,
        lambda: s.ess_fraction,
        n_paths: s.n_paths,
        n_diverged: s.n_diverged,
        seed,
        policy: policy.id(),
        metadata: meta,
    }
}

/// Simulates under the configured policy; writes `summary.json`.
pub fn cmd_simulate(config: &ExperimentConfig) -> CliResult<Summary> {
    config.validate()?;
    let problem = config.build_problem()?;
    let policy = config.build_policy(&problem)?;
    let opts = SimOptions {
        n_paths: config.sampler.n_paths,
        seed: config.sampler.seed,
        threads: config.threads,
        divergence: config.sampler.divergence.into(),
    };
    let ens = simulate_with(&problem, &policy, &opts)?;
    let costs = cost::path_costs(&ens, &problem)?;
    let s = cost::summarize(&costs)?;
    let out = summary(&s, config.sampler.seed, &policy, Metadata::new("simulate", config));
    write_json(&config.output.dir, "summary.json", &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub seed: u64,
    #[serde(rename = "ES")]
    pub es: f64,
    #[serde(rename = "ES_se")]
    pub es_se: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub var_alpha: f64,
    pub lambda: f64,
    pub n_diverged: usize,
}

impl From<&IterationReport> for RoundRecord {
    fn from(r: &IterationReport) -> Self {
        Self {
            round: r.round,
            seed: r.seed,
            es: r.expected_cost,
            es_se: r.expected_cost_se,
            j: r.value,
            var_alpha: r.var_alpha,
            lambda: r.ess_fraction,
            n_diverged: r.n_diverged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub basis: String,
    pub rounds: Vec<RoundRecord>,
    pub metadata: Metadata,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub policy: Policy,
    pub report: FitReport,
    pub evaluation: Summary,
}

/// Iterative fit of the configured basis. Writes `coefficients.csv`,
/// `iterations.json` (also on failure, with the completed rounds) and
/// `evaluation.json` (fresh ensemble under the fitted controller).
pub fn cmd_fit(config: &ExperimentConfig) -> CliResult<FitOutcome> {
    config.validate()?;
    let problem = config.build_problem()?;
    let basis = config.basis_named(&config.basis)?;
    let test = match &config.test_functions {
        Some(name) => config.basis_named(name)?,
        None => basis.clone(),
    };
    let warm = match config.policy {
        PolicyConfig::Zero {} => None,
        _ => Some(config.build_policy(&problem)?),
    };
    let icfg = config.iis_config(&problem.grid)?;
    let meta = Metadata::new("fit", config);
    let dir = &config.output.dir;
    let report = |reports: &[IterationReport]| FitReport {
        basis: config.basis.clone(),
        rounds: reports.iter().map(RoundRecord::from).collect(),
        metadata: meta.clone(),
    };
    let outcome = match iis::run(&problem, &basis, &test, &icfg, warm) {
        Ok(o) => o,
        Err(f) => {
            write_json(dir, "iterations.json", &report(&f.reports))?;
            return Err(f.error.into());
        }
    };
    let report = report(&outcome.reports);
    write_json(dir, "iterations.json", &report)?;
    let coeffs = outcome.policy.as_parametrized().map(|p| p.coefficients().to_vec()).unwrap_or_default();
    write_csv(dir, "coefficients.csv", &meta, &coefficients_csv(&problem.grid, &coeffs))?;

    let eval_seed = derive_seed(config.sampler.seed, 0x00E7_A1);
    let opts = SimOptions {
        n_paths: config.sampler.n_paths,
        seed: eval_seed,
        threads: config.threads,
        divergence: config.iis.divergence.into(),
    };
    let s = iis::evaluate(&problem, &outcome.policy, &opts)?;
    let evaluation = summary(&s, eval_seed, &outcome.policy, Metadata::new("fit-evaluate", config));
    write_json(dir, "evaluation.json", &evaluation)?;
    Ok(FitOutcome { policy: outcome.policy, report, evaluation })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Table1,
    Figure1,
    Figure2,
}

impl BenchKind {
    pub fn name(&self) -> &'static str {
        match self {
            BenchKind::Table1 => "table1",
            BenchKind::Figure1 => "figure1",
            BenchKind::Figure2 => "figure2",
        }
    }
}

/// Benchmark reproductions; returns the written files.
pub fn cmd_bench(which: BenchKind, config: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    config.validate()?;
    let spec = config.gbm_spec()?;
    let bc = config.bench_config()?;
    let meta = Metadata::new(&format!("bench-{}", which.name()), config);
    let dir = &config.output.dir;
    Ok(match which {
        BenchKind::Table1 => {
            let t = bench_gbm::reproduce_table1(&spec, &bc)?;
            vec![write_csv(dir, "table1.csv", &meta, &bench_gbm::table1_csv(&t.rows))?]
        }
        BenchKind::Figure1 => {
            let rows = bench_gbm::reproduce_figure1(&spec, &config.bench.epsilons, bc.n_paths, config.sampler.seed)?;
            vec![write_csv(dir, "figure1.csv", &meta, &bench_gbm::figure1_csv(&rows))?]
        }
        BenchKind::Figure2 => {
            let mut bc = bc;
            bc.rounds = config.iis.rounds;
            let fig = bench_gbm::reproduce_figure2(&spec, &bc, config.sampler.seed)?;
            vec![
                write_csv(dir, "figure2_controls.csv", &meta, &bench_gbm::figure2_controls_csv(&fig))?,
                write_csv(dir, "figure2_hist.csv", &meta, &bench_gbm::figure2_hist_csv(&fig))?,
            ]
        }
    })
}

// ---------------------------------------------------------------------------
// Expressions for custom problems
// ---------------------------------------------------------------------------

pub mod expr {
    //! `expr := term (('+'|'-') term)*`, `term := unary (('*'|'/') unary)*`,
    //! `unary := '-' unary | power`, `power := atom ('^' unary)?`,
    //! `atom := number | t | x | log(expr) | exp(expr) | (expr)`.

    #[derive(Clone, Debug, PartialEq)]
    pub enum Expr {
        Num(f64),
        T,
        X,
        Neg(Box<Expr>),
        Add(Box<Expr>, Box<Expr>),
        Sub(Box<Expr>, Box<Expr>),
        Mul(Box<Expr>, Box<Expr>),
        Div(Box<Expr>, Box<Expr>),
        Pow(Box<Expr>, Box<Expr>),
        Log(Box<Expr>),
        Exp(Box<Expr>),
    }

    impl Expr {
        pub fn parse(src: &str) -> Result<Expr, String> {
            let mut p = Parser { s: src.as_bytes(), pos: 0 };
            let e = p.expr()?;
            p.skip_ws();
            if p.pos != p.s.len() {
                return Err(format!("unexpected {:?} at position {}", p.s[p.pos] as char, p.pos));
            }
            Ok(e)
        }

        pub fn eval(&self, t: f64, x: f64) -> f64 {
            match self {
                Expr::Num(v) => *v,
                Expr::T => t,
                Expr::X => x,
                Expr::Neg(a) => -a.eval(t, x),
                Expr::Add(a, b) => a.eval(t, x) + b.eval(t, x),
                Expr::Sub(a, b) => a.eval(t, x) - b.eval(t, x),
                Expr::Mul(a, b) => a.eval(t, x) * b.eval(t, x),
                Expr::Div(a, b) => a.eval(t, x) / b.eval(t, x),
                Expr::Pow(a, b) => a.eval(t, x).powf(b.eval(t, x)),
                Expr::Log(a) => a.eval(t, x).ln(),
                Expr::Exp(a) => a.eval(t, x).exp(),
            }
        }
    }

    struct Parser<'a> {
        s: &'a [u8],
        pos: usize,
    }

    impl Parser<'_> {
        fn skip_ws(&mut self) {
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
        }

        fn peek(&mut self) -> Option<u8> {
            self.skip_ws();
            self.s.get(self.pos).copied()
        }

        fn expect(&mut self, c: u8) -> Result<(), String> {
            if self.peek() == Some(c) {
                self.pos += 1;
                Ok(())
            } else {
                Err(format!("expected {:?} at position {}", c as char, self.pos))
            }
        }

        fn expr(&mut self) -> Result<Expr, String> {
            let mut lhs = self.term()?;
            while let Some(c @ (b'+' | b'-')) = self.peek() {
                self.pos += 1;
                let rhs = self.term()?;
                lhs = if c == b'+' { Expr::Add(lhs.into(), rhs.into()) } else { Expr::Sub(lhs.into(), rhs.into()) };
            }
            Ok(lhs)
        }

        fn term(&mut self) -> Result<Expr, String> {
            let mut lhs = self.unary()?;
            while let Some(c @ (b'*' | b'/')) = self.peek() {
                self.pos += 1;
                let rhs = self.unary()?;
                lhs = if c == b'*' { Expr::Mul(lhs.into(), rhs.into()) } else { Expr::Div(lhs.into(), rhs.into()) };
            }
            Ok(lhs)
        }

        fn unary(&mut self) -> Result<Expr, String> {
            if self.peek() == Some(b'-') {
                self.pos += 1;
                return Ok(Expr::Neg(self.unary()?.into()));
            }
            self.power()
        }

        fn power(&mut self) -> Result<Expr, String> {
            let base = self.atom()?;
            if self.peek() == Some(b'^') {
                self.pos += 1;
                return Ok(Expr::Pow(base.into(), self.unary()?.into()));
            }
            Ok(base)
        }

        fn atom(&mut self) -> Result<Expr, String> {
            let start = self.pos;
            match self.peek() {
                None => Err("unexpected end of expression".into()),
                Some(b'(') => {
                    self.pos += 1;
                    let e = self.expr()?;
                    self.expect(b')')?;
                    Ok(e)
                }
                Some(c) if c.is_ascii_digit() || c == b'.' => {
                    let begin = self.pos;
                    while self.pos < self.s.len() && (self.s[self.pos].is_ascii_digit() || self.s[self.pos] == b'.') {
                        self.pos += 1;
                    }
                    if self.pos < self.s.len() && matches!(self.s[self.pos], b'e' | b'E') {
                        let mut q = self.pos + 1;
                        if q < self.s.len() && matches!(self.s[q], b'+' | b'-') {
                            q += 1;
                        }
                        if q < self.s.len() && self.s[q].is_ascii_digit() {
                            while q < self.s.len() && self.s[q].is_ascii_digit() {
                                q += 1;
                            }
                            self.pos = q;
                        }
                    }
                    let text = std::str::from_utf8(&self.s[begin..self.pos]).unwrap();
                    text.parse().map(Expr::Num).map_err(|_| format!("bad number {text:?} at position {begin}"))
                }
                Some(c) if c.is_ascii_alphabetic() => {
                    let begin = self.pos;
                    while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
                        self.pos += 1;
                    }
                    match &self.s[begin..self.pos] {
                        b"t" => Ok(Expr::T),
                        b"x" => Ok(Expr::X),
                        name @ (b"log" | b"exp") => {
                            self.expect(b'(')?;
                            let arg = self.expr()?;
                            self.expect(b')')?;
                            Ok(if name == b"log" { Expr::Log(arg.into()) } else { Expr::Exp(arg.into()) })
                        }
                        other => Err(format!(
                            "unknown identifier {:?} at position {begin}",
                            String::from_utf8_lossy(other)
                        )),
                    }
                }
                Some(c) => Err(format!("unexpected {:?} at position {start}", c as char)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expressions() {
        let cases = [
            ("1 + 2 * 3", 7.0),
            ("-2^2", -4.0),
            ("2^3^2", 512.0),
            ("(1 + x) / 2", 1.5),
            ("log(exp(t))", 0.25),
            ("x*x - 4*x + 1e-1", 4.0 - 8.0 + 0.1),
            ("5*log(x)^2", 5.0 * 2f64.ln().powi(2)),
            ("2.5E+1", 25.0),
        ];
        for (src, want) in cases {
            let got = Expr::parse(src).unwrap().eval(0.25, 2.0);
            assert!((got - want).abs() < 1e-12, "{src}: {got} vs {want}");
        }
        for bad in ["", "1 +", "sin(x)", "(x", "x y", "2 $ 3"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let e = ExperimentConfig::parse("{\n  \"sampler\": {\"n_paths\": 5, \"sede\": 1}\n}").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("sede") && msg.contains("line 2"), "{msg}");
        assert_eq!(e.exit_code(), 2);
        assert!(ExperimentConfig::parse("{\"problem\": {\"kind\": \"gbm\", \"Q\": 3}}").is_err());
        assert!(ExperimentConfig::parse("{\"bogus\": 1}").is_err());
        assert!(ExperimentConfig::parse("{\"policy\": {\"kind\": \"zero\", \"x\": 1}}").is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = ExperimentConfig::parse("{\"sampler\": {\"seed\": 9}}").unwrap();
        assert_eq!(c.sampler.seed, 9);
        assert_eq!(c.sampler.n_paths, 10_000);
        assert_eq!(c.problem, ProblemConfig::Gbm(GbmProblem::default()));
    }

    #[test]
    fn config_round_trip() {
        let mut c = ExperimentConfig::default();
        c.problem = ProblemConfig::Custom(CustomProblem { drift: "x/2".into(), x0: 0.1, ..Default::default() });
        c.policy = PolicyConfig::Coefficients { path: "a.csv".into(), basis: "affine".into() };
        c.iis.ridge = Some(1e-6);
        c.threads = Some(2);
        assert_eq!(ExperimentConfig::parse(&c.to_json()).unwrap(), c);
        let meta = Metadata::new("x", &c);
        assert_eq!(config_from_csv(&meta.csv_preamble()).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides { seed: Some(3), n_paths: Some(7), dt: Some(0.01), out: Some("o".into()), threads: Some(1) });
        assert_eq!((c.sampler.seed, c.sampler.n_paths, c.grid.dt, c.threads), (3, 7, 0.01, Some(1)));
        assert_eq!(c.output.dir, PathBuf::from("o"));
    }

    #[test]
    fn coefficient_csv_round_trip() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let a: Vec<DMatrix<f64>> = (0..4).map(|k| DMatrix::from_row_slice(1, 2, &[k as f64, 0.1 / 3.0])).collect();
        let text = coefficients_csv(&grid, &a);
        assert!(text.starts_with("t,a_0_0,a_0_1\n0,0,"));
        assert_eq!(parse_coefficients_csv(&text, &grid, 1, 2).unwrap(), a);
        assert!(parse_coefficients_csv(&text, &grid, 1, 3).is_err());
        assert!(parse_coefficients_csv(&text, &TimeGrid::new(0.0, 1.0, 5).unwrap(), 1, 2).is_err());
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from(Error::InvalidGrid("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::NonFinite { path: 1, step: 2 }).exit_code(), 3);
        assert_eq!(CliError::from(Error::SingularFit { node: 0, time: 0.0, sigma_min: 0.0 }).exit_code(), 3);
    }
}
