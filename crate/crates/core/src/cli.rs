//! Batch experiment runner behind the `agflow` binary.
//!
//! Each verb reads one JSON config, applies `AGFLOW_<KEY>` environment
//! overrides to its top-level keys, runs the experiment and writes a CSV
//! report whose first line is a `#` comment with provenance. Exit status is
//! 0 when every check passes, 1 when a threshold is missed or the computation
//! fails, 2 when the config or the command line is invalid.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agformula::{
    ag_reconstruct, error_decomposition, exact_trajectory, perturbed_solution, run_method, DefectSpec, OneStepMethod,
};
use crate::error::Error;
use crate::flow::IntegratorConfig;
use crate::picard::{
    certified_radius, estimate_l_m, picard_solve, reference_distance, ConstantSource, LipschitzData, PicardOptions,
    SamplingGrid, DEFAULT_SAFETY,
};
use crate::problems::{self, CatalogProblem};
use crate::quadrature::QuadSpec;
use crate::types::{StateVector, TimeWindow};

pub const ENV_PREFIX: &str = "AGFLOW_";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "agflow", version, about = "Perturbed-flow identity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report destination; overrides `output_path`. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Reconstruct perturbed paths from flow and transported defect.
    Verify,
    /// Split a method's global error into per-step contributions.
    Decompose,
    /// Measure the order of the transported-defect integral.
    Converge,
    /// Certify a local existence interval and run the fixed-point iteration.
    Picard,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Decompose => "decompose",
            Command::Converge => "converge",
            Command::Picard => "picard",
        }
    }
}

/// A method for `decompose` and `converge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    #[default]
    Euler,
    Heun,
    Rk4,
    /// Nodes sampled from the integrator's dense output.
    Exact,
}

impl MethodChoice {
    fn one_step(self) -> Option<OneStepMethod> {
        match self {
            MethodChoice::Euler => Some(OneStepMethod::Euler),
            MethodChoice::Heun => Some(OneStepMethod::Heun),
            MethodChoice::Rk4 => Some(OneStepMethod::Rk4),
            MethodChoice::Exact => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantsChoice {
    /// Closed-form ball constants from the catalog.
    Analytic,
    /// Sampled constants times `safety`.
    #[default]
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    /// Ball center; defaults to `initial_state`, else the problem's sampling center.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    pub eps: f64,
    pub h: f64,
    /// Defaults to the window start.
    #[serde(default)]
    pub s0: Option<f64>,
    #[serde(default)]
    pub constants: ConstantsChoice,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default)]
    pub options: PicardOptions,
    #[serde(default)]
    pub sampling: Option<SamplingGrid>,
}

/// One experiment. Keys irrelevant to the chosen verb are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default = "default_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_quad_tol")]
    pub quad_tol: f64,
    #[serde(default = "default_one")]
    pub quad_panels: usize,
    /// Overrides the verb's default pass threshold.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Fill the `wall_time` column. Off by default so reports are reproducible.
    #[serde(default)]
    pub timing: bool,
    /// Defaults to the problem's window.
    #[serde(default)]
    pub window: Option<[f64; 2]>,
    /// Defaults to a seeded draw from the problem's sampling box.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,

    /// `verify`: defects to test; defaults to the five-defect suite.
    #[serde(default)]
    pub defects: Option<Vec<DefectSpec>>,
    /// `verify`: explicit `[s, t]` pairs; otherwise `samples` seeded pairs.
    #[serde(default)]
    pub intervals: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// `verify`: tolerance for integrating the perturbed path itself.
    #[serde(default = "default_path_tol")]
    pub path_tol: f64,

    /// `decompose`, `converge`
    #[serde(default)]
    pub method: MethodChoice,
    /// `decompose`
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// `converge`
    #[serde(default)]
    pub step_counts: Option<Vec<usize>>,
    /// `converge`: defaults to the method's order.
    #[serde(default)]
    pub expected_slope: Option<f64>,
    #[serde(default)]
    pub slope_tolerance: Option<f64>,

    /// `picard`
    #[serde(default)]
    pub picard: Option<PicardConfig>,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_quad_tol() -> f64 {
    1e-9
}
fn default_one() -> usize {
    1
}
fn default_samples() -> usize {
    10
}
fn default_path_tol() -> f64 {
    1e-12
}
fn default_steps() -> usize {
    64
}
fn default_safety() -> f64 {
    DEFAULT_SAFETY
}

/// Invalid command line or config (exit status 2).
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Json(serde_json::Error),
    #[error("config must be a JSON object")]
    NotAnObject,
    #[error("invalid config: {0}")]
    Schema(serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Merges `AGFLOW_<KEY>=<value>` pairs into the top-level object. Values that
/// parse as JSON are used as such, anything else as a string.
pub fn apply_env_overrides<I>(doc: &mut Value, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let obj = doc.as_object_mut().ok_or(ConfigError::NotAnObject)?;
    for (key, raw) in vars {
        let Some(name) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        if name.is_empty() {
            continue;
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        info!("config override from {key}");
        obj.insert(name.to_ascii_lowercase(), value);
    }
    Ok(())
}

/// Parses and validates a config document, returning it with the SHA-256 of
/// its canonical (sorted-key) serialization.
pub fn parse_config(
    text: &str,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(ExperimentConfig, String), ConfigError> {
    let mut doc: Value = serde_json::from_str(text).map_err(ConfigError::Json)?;
    apply_env_overrides(&mut doc, vars)?;
    let canonical = serde_json::to_string(&doc).map_err(ConfigError::Json)?;
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(ConfigError::Schema)?;
    Ok((cfg, hash))
}

/// Resolved inputs shared by all verbs.
struct Setup {
    problem: CatalogProblem,
    window: TimeWindow,
    integ: IntegratorConfig,
    quad: QuadSpec,
    rng: ChaCha8Rng,
}

impl ExperimentConfig {
    fn setup(&self) -> Result<Setup, ConfigError> {
        let problem = problems::by_name(&self.problem).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "unknown problem `{}`; known: {}",
                self.problem,
                problems::problem_names().join(", ")
            ))
        })?;
        let window = match self.window {
            Some([a, b]) => TimeWindow::new(a, b)?,
            None => problem.window,
        };
        let integ = IntegratorConfig::with_tol(self.abs_tol, self.rel_tol)?;
        let quad = QuadSpec::with_tol(self.quad_tol).panels(self.quad_panels);
        quad.validate()?;
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ConfigError::Invalid(format!("threshold must be positive, got {t}")));
            }
        }
        Ok(Setup {
            problem,
            window,
            integ,
            quad,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        })
    }

    fn initial_state(&self, setup: &mut Setup) -> Result<StateVector, ConfigError> {
        match &self.initial_state {
            Some(x) => {
                let x = StateVector::new(x.clone())?;
                x.expect_dim(setup.problem.dim()).map_err(|_| {
                    ConfigError::Invalid(format!("initial_state must have dimension {}", setup.problem.dim()))
                })?;
                Ok(x)
            }
            None => Ok(setup.problem.sample_state(&mut setup.rng)),
        }
    }
}

/// A finished report: CSV body plus pass/fail.
pub struct Report {
    pub body: String,
    pub passed: bool,
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn run_verify(cfg: &ExperimentConfig) -> Result<Result<Report, Error>, ConfigError> {
    let mut setup = cfg.setup()?;
    let path_cfg = IntegratorConfig::with_tol(cfg.path_tol, cfg.path_tol)?;
    let y0 = cfg.initial_state(&mut setup)?;
    let defects = cfg.defects.clone().unwrap_or_else(|| DefectSpec::suite(setup.window));
    for d in &defects {
        d.validate()?;
    }
    let intervals: Vec<(f64, f64)> = match &cfg.intervals {
        Some(list) => {
            for [s, t] in list {
                if !(setup.window.contains(*s) && setup.window.contains(*t) && s <= t) {
                    return Err(ConfigError::Invalid(format!(
                        "interval [{s}, {t}] not an ordered pair inside the window"
                    )));
                }
            }
            list.iter().map(|[s, t]| (*s, *t)).collect()
        }
        None => {
            if cfg.samples == 0 {
                return Err(ConfigError::Invalid("samples must be >= 1".into()));
            }
            let w = setup.window;
            let probe = CatalogProblem {
                window: w,
                ..setup.problem.clone()
            };
            (0..cfg.samples)
                .map(|_| probe.sample_interval(&mut setup.rng))
                .collect()
        }
    };

    Ok((|| {
        let mut body = String::from("problem,s,t,defect_id,residual,flow_term_norm,integral_norm,panels,wall_time\n");
        let mut passed = true;
        for defect in &defects {
            let pp = perturbed_solution(&setup.problem.field, defect, setup.window, &y0, &path_cfg)?;
            for &(s, t) in &intervals {
                let started = Instant::now();
                let d = ag_reconstruct(&setup.problem.field, &pp, s, t, &setup.integ, &setup.quad)?;
                let elapsed = started.elapsed().as_secs_f64();
                let yt = pp.path.evaluate(t)?;
                let limit = cfg
                    .threshold
                    .unwrap_or(50.0 * (cfg.abs_tol + cfg.quad_tol) * (1.0 + yt.norm()));
                if !(d.residual <= limit) {
                    warn!(
                        "{} {} [{s}, {t}]: residual {} above {limit}",
                        setup.problem.name,
                        defect.id(),
                        d.residual
                    );
                    passed = false;
                }
                let wall = if cfg.timing { num(elapsed) } else { String::new() };
                writeln!(
                    body,
                    "{},{},{},{},{},{},{},{},{}",
                    setup.problem.name,
                    num(s),
                    num(t),
                    defect.id(),
                    num(d.residual),
                    num(d.flow_term.norm()),
                    num(d.integral_term.norm()),
                    d.contributions.len(),
                    wall
                )
                .expect("write to string");
            }
        }
        Ok(Report { body, passed })
    })())
}

fn method_trajectory(
    cfg: &ExperimentConfig,
    setup: &Setup,
    x0: &StateVector,
    steps: usize,
) -> Result<crate::agformula::MethodTrajectory, Error> {
    let (a, b) = (setup.window.start(), setup.window.end());
    match cfg.method.one_step() {
        Some(m) => run_method(&setup.problem.field, m, a, b, x0, steps),
        None => exact_trajectory(&setup.problem.field, a, b, x0, steps, &setup.integ),
    }
}

/// Norms at or below this count as zero in the decompose and converge checks.
const NEGLIGIBLE: f64 = 1e-9;

fn run_decompose(cfg: &ExperimentConfig) -> Result<Result<Report, Error>, ConfigError> {
    let mut setup = cfg.setup()?;
    if cfg.steps < 2 {
        return Err(ConfigError::Invalid(format!("steps must be >= 2, got {}", cfg.steps)));
    }
    let x0 = cfg.initial_state(&mut setup)?;
    Ok((|| {
        let traj = method_trajectory(cfg, &setup, &x0, cfg.steps)?;
        let r = error_decomposition(&setup.problem.field, &traj, &setup.integ, &setup.quad)?;
        let mut body = String::from("row,start,end,contribution_norm,global_error,neg_integral_term,agreement\n");
        let mut max_piece = 0.0_f64;
        for (k, (a, b, v)) in r.decomposition.grouped(&traj.nodes).iter().enumerate() {
            max_piece = max_piece.max(v.norm());
            writeln!(body, "{k},{},{},{},,,", num(*a), num(*b), num(v.norm())).expect("write to string");
        }
        let g = r.global_error.norm();
        let i = r.decomposition.integral_term.norm();
        writeln!(
            body,
            "summary,{},{},{},{},{},{}",
            num(traj.nodes[0]),
            num(traj.nodes[traj.nodes.len() - 1]),
            num(r.decomposition.abs_integral),
            num(g),
            num(i),
            num(r.agreement)
        )
        .expect("write to string");
        let limit = cfg.threshold.unwrap_or(0.01);
        let negligible = g <= NEGLIGIBLE && i <= NEGLIGIBLE && max_piece <= NEGLIGIBLE;
        let passed = r.agreement <= limit || negligible;
        if !passed {
            warn!("agreement {} above {limit}", r.agreement);
        }
        Ok(Report { body, passed })
    })())
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Errors at or below this make a convergence fit meaningless.
const DEGENERATE: f64 = 1e-12;

fn run_converge(cfg: &ExperimentConfig) -> Result<Result<Report, Error>, ConfigError> {
    let mut setup = cfg.setup()?;
    let counts = cfg
        .step_counts
        .clone()
        .ok_or_else(|| ConfigError::Invalid("converge needs `step_counts`".into()))?;
    if counts.len() < 3 || counts.iter().any(|n| *n < 1) {
        return Err(ConfigError::Invalid("step_counts needs >= 3 positive entries".into()));
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != counts.len() {
        return Err(ConfigError::Invalid("step_counts must be distinct".into()));
    }
    let x0 = cfg.initial_state(&mut setup)?;
    Ok((|| {
        let mut body = String::from("N,h,global_error,integral_term_norm\n");
        let mut log_h = Vec::new();
        let mut log_i = Vec::new();
        let mut degenerate = false;
        for &n in &counts {
            let traj = method_trajectory(cfg, &setup, &x0, n)?;
            let r = error_decomposition(&setup.problem.field, &traj, &setup.integ, &setup.quad)?;
            let h = setup.window.length() / n as f64;
            let g = r.global_error.norm();
            let i = r.decomposition.integral_term.norm();
            writeln!(body, "{n},{},{},{}", num(h), num(g), num(i)).expect("write to string");
            if i <= DEGENERATE || g <= DEGENERATE {
                degenerate = true;
            }
            log_h.push(h.ln());
            log_i.push(i.ln());
        }
        let passed = if degenerate {
            writeln!(body, "slope,degenerate").expect("write to string");
            // nothing to fit; pass only if the errors vanish altogether
            log_i.iter().all(|l| l.exp() <= DEGENERATE)
        } else {
            let slope = fit_slope(&log_h, &log_i);
            writeln!(body, "slope,{}", num(slope)).expect("write to string");
            let order = cfg.method.one_step().map(|m| m.order() as f64);
            match cfg.expected_slope.or(order) {
                Some(expected) => {
                    let tol = cfg.slope_tolerance.unwrap_or(match cfg.method {
                        MethodChoice::Rk4 => 0.3,
                        MethodChoice::Heun => 0.2,
                        _ => 0.1,
                    });
                    let ok = (slope - expected).abs() <= tol;
                    if !ok {
                        warn!("slope {slope} outside {expected} +- {tol}");
                    }
                    ok
                }
                None => true,
            }
        };
        Ok(Report { body, passed })
    })())
}

fn run_picard(cfg: &ExperimentConfig) -> Result<Result<Report, Error>, ConfigError> {
    let setup = cfg.setup()?;
    let pc = cfg
        .picard
        .clone()
        .ok_or_else(|| ConfigError::Invalid("picard needs a `picard` object with radius, eps and h".into()))?;
    let center = match (&pc.center, &cfg.initial_state) {
        (Some(c), _) | (None, Some(c)) => StateVector::new(c.clone())?,
        (None, None) => setup.problem.state_center.clone(),
    };
    center
        .expect_dim(setup.problem.dim())
        .map_err(|_| ConfigError::Invalid(format!("center must have dimension {}", setup.problem.dim())))?;
    let x0 = match &cfg.initial_state {
        Some(x) => StateVector::new(x.clone())?,
        None => center.clone(),
    };
    let s0 = pc.s0.unwrap_or(setup.window.start());
    if !(pc.safety >= 1.0 && pc.safety.is_finite()) {
        return Err(ConfigError::Invalid(format!("safety must be >= 1, got {}", pc.safety)));
    }
    let outer = pc.radius + pc.eps;
    let (l, m, safety, source) = match pc.constants {
        ConstantsChoice::Analytic => {
            let f = setup.problem.lipschitz_on_ball.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!("{} has no analytic ball constants", setup.problem.name))
            })?;
            let (l, m) = f(&center, outer);
            (l, m, 1.0, ConstantSource::Analytic)
        }
        ConstantsChoice::Estimated => {
            let span = TimeWindow::new(s0 - pc.h, s0 + pc.h)?;
            let grid = pc.sampling.unwrap_or(SamplingGrid {
                seed: cfg.seed,
                ..SamplingGrid::default()
            });
            let est = estimate_l_m(&setup.problem.field, span, &center, outer, &grid)?.with_safety(pc.safety);
            (
                est.l_est,
                est.m_est,
                pc.safety,
                ConstantSource::Estimated { safety: pc.safety },
            )
        }
    };
    let data = LipschitzData::new(l * safety, m * safety, pc.radius, pc.eps, pc.h, center, s0, source)?;
    let delta = certified_radius(&data);
    Ok((|| {
        let (path, cert) = picard_solve(&setup.problem.field, &data, None, s0, &x0, delta, &pc.options)?;
        let reference_cfg = IntegratorConfig::with_tol(1e-12, 1e-12)?;
        let gap = reference_distance(&setup.problem.field, &path, s0, &x0, 256, &reference_cfg)?;
        let mut body = String::from("L_est,M_est,safety,delta,iterations,max_contraction,ball_ok,sup_distance\n");
        writeln!(
            body,
            "{},{},{},{},{},{},{},{}",
            num(l),
            num(m),
            num(safety),
            num(delta),
            cert.iterations,
            num(cert.max_contraction()),
            cert.ball_ok,
            num(gap)
        )
        .expect("write to string");
        let limit = cfg.threshold.unwrap_or(1e-8);
        if !cert.ball_ok {
            warn!(
                "iterates left the ball: distance {} > {}",
                cert.max_ball_distance,
                data.outer_radius()
            );
        }
        let passed = cert.accepted() && gap <= limit;
        Ok(Report { body, passed })
    })())
}

/// Header comment: tool version, config hash, seed and PRNG, UTC timestamp.
pub fn header_line(command: &str, config_hash: &str, seed: u64) -> String {
    format!(
        "# agflow {} command={command} config_sha256={config_hash} seed={seed} prng=chacha8 timestamp={}\n",
        env!("CARGO_PKG_VERSION"),
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    )
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Runs the CLI on `args` with environment `vars`; returns the exit status.
pub fn run<I, T>(args: I, vars: Vec<(String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_CONFIG;
        }
        if !crate::exec::init_threads(n) {
            warn!("could not size the worker pool to {n} threads");
        }
    }
    let Some(config_path) = cli.config.as_deref() else {
        eprintln!("error: --config <path> is required");
        return EXIT_CONFIG;
    };
    let text = match std::fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(source) => {
            eprintln!(
                "error: {}",
                ConfigError::Read {
                    path: config_path.to_path_buf(),
                    source
                }
            );
            return EXIT_CONFIG;
        }
    };
    let (cfg, hash) = match parse_config(&text, vars) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match cli.command {
        Command::Verify => run_verify(&cfg),
        Command::Decompose => run_decompose(&cfg),
        Command::Converge => run_converge(&cfg),
        Command::Picard => run_picard(&cfg),
    };
    let report = match outcome {
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
        Ok(Err(e)) => {
            eprintln!("error: {} failed: {e}", cli.command.name());
            return EXIT_FAIL;
        }
        Ok(Ok(r)) => r,
    };
    let mut text = header_line(cli.command.name(), &hash, cfg.seed);
    text.push_str(&report.body);
    let dest = cli.out.or(cfg.output_path);
    match dest {
        Some(path) => {
            if let Err(e) = write_atomic(&path, &text) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_FAIL;
            }
            info!("report written to {}", path.display());
        }
        None => print!("{text}"),
    }
    if report.passed {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        parse_config(text, Vec::new()).unwrap().0
    }

    #[test]
    fn missing_problem_is_named() {
        let err = parse_config("{\"seed\": 1}", Vec::new()).unwrap_err();
        assert!(err.to_string().contains("problem"), "{err}");
    }

    #[test]
    fn env_overrides_top_level_keys() {
        let vars = vec![
            ("AGFLOW_SEED".to_string(), "42".to_string()),
            ("AGFLOW_PROBLEM".to_string(), "logistic".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let (c, h1) = parse_config("{\"problem\": \"zero-1\"}", vars).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.problem, "logistic");
        let (_, h2) = parse_config("{\"seed\": 42, \"problem\": \"logistic\"}", Vec::new()).unwrap();
        assert_eq!(h1, h2, "hash is over the canonical merged document");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config("{\"problem\": \"zero-1\", \"tol\": 1}", Vec::new()).is_err());
    }

    #[test]
    fn setup_validation() {
        assert!(cfg("{\"problem\": \"nope\"}").setup().is_err());
        assert!(cfg("{\"problem\": \"zero-1\", \"abs_tol\": 1.0}").setup().is_err());
        assert!(cfg("{\"problem\": \"zero-1\", \"window\": [1.0, 0.0]}")
            .setup()
            .is_err());
        assert!(cfg("{\"problem\": \"zero-1\"}").setup().is_ok());
    }

    #[test]
    fn verify_linear_constant_defect() {
        let c = cfg(
            r#"{"problem": "linear-growth", "initial_state": [1.0], "defects": [{"kind": "constant", "value": 1.0}],
                "intervals": [[0.0, 1.0]]}"#,
        );
        let r = run_verify(&c).unwrap().unwrap();
        assert!(r.passed);
        let row = r.body.lines().nth(1).unwrap();
        let residual: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(residual <= 1e-7);
    }

    #[test]
    fn converge_zero_field_is_degenerate() {
        let c = cfg(r#"{"problem": "zero-1", "method": "rk4", "step_counts": [4, 8, 16]}"#);
        let r = run_converge(&c).unwrap().unwrap();
        assert!(r.passed);
        assert!(r.body.ends_with("slope,degenerate\n"));
    }

    #[test]
    fn converge_needs_three_counts() {
        let c = cfg(r#"{"problem": "logistic", "step_counts": [4, 8]}"#);
        assert!(run_converge(&c).is_err());
    }

    #[test]
    fn picard_zero_field() {
        let c =
            cfg(r#"{"problem": "zero-1", "initial_state": [0.5], "picard": {"radius": 1.0, "eps": 0.5, "h": 2.0}}"#);
        let r = run_picard(&c).unwrap().unwrap();
        assert!(r.passed);
        let row: Vec<&str> = r.body.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.5);
        assert_eq!(row[4], "1");
        assert_eq!(row[5].parse::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn slope_fit() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 4.0 * x - 1.0).collect();
        assert!((fit_slope(&xs, &ys) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_atomic(&p, "a\n").unwrap();
        write_atomic(&p, "b\n").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "b\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
