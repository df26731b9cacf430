//! Perturbed trajectories and the nonlinear variation-of-constants identity
//!
//! `Y_t = X_{s,t}^{Y_s} + int_s^t (dX_{tau,t}/dx)(Y_tau) E_tau dtau`
//!
//! for a path `Y` with defect `E = Y' - f(., Y)`. The same machinery splits
//! the global error of a one-step method into transported local defects.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{evolve, integrate, IntegratorConfig};
use crate::path::DensePath;
use crate::quadrature::{self, Panel, QuadSpec};
use crate::sensitivity::{d_current_time, flow_jvp};
use crate::types::{lerp, max_norm, StateVector, TimeWindow, VectorField};

type DefectFn = dyn Fn(f64) -> Result<StateVector> + Send + Sync;
type StateDefectFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// A path `Y` together with its defect `E(t) = Y'(t) - f(t, Y(t))`.
#[derive(Clone)]
pub struct PerturbedPath {
    pub path: DensePath,
    defect: Arc<DefectFn>,
    /// Times where `E` may jump; includes the path's own breakpoints.
    pub defect_breakpoints: Vec<f64>,
}

impl fmt::Debug for PerturbedPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbedPath")
            .field("path", &self.path)
            .field("defect_breakpoints", &self.defect_breakpoints)
            .finish()
    }
}

impl PerturbedPath {
    /// Pairs a path with a declared defect.
    pub fn new<E>(path: DensePath, defect: E, mut defect_breakpoints: Vec<f64>) -> Self
    where
        E: Fn(f64) -> Result<StateVector> + Send + Sync + 'static,
    {
        defect_breakpoints.extend_from_slice(path.breakpoints());
        defect_breakpoints.sort_by(f64::total_cmp);
        defect_breakpoints.dedup();
        Self {
            path,
            defect: Arc::new(defect),
            defect_breakpoints,
        }
    }

    pub fn defect(&self, t: f64) -> Result<StateVector> {
        (self.defect)(t)
    }

    /// `max |Y'(t) - f(t, Y(t)) - E(t)|` over `samples` points per smooth piece,
    /// skipping the piece endpoints.
    pub fn relation_residual(&self, field: &VectorField, samples: usize) -> Result<f64> {
        let w = self.path.window();
        let mut cuts = vec![w.start()];
        cuts.extend(
            self.defect_breakpoints
                .iter()
                .copied()
                .filter(|b| w.contains(*b) && *b > w.start() && *b < w.end()),
        );
        cuts.push(w.end());
        let mut worst = 0.0_f64;
        for piece in cuts.windows(2) {
            for k in 1..=samples {
                let t = lerp(piece[0], piece[1], k as f64 / (samples + 1) as f64);
                let y = self.path.evaluate(t)?;
                let implied = self.path.derivative(t)?.sub(&field.eval(t, &y)?);
                worst = worst.max(implied.dist(&self.defect(t)?));
            }
        }
        Ok(worst)
    }
}

/// `E(t) = Y'(t) - f(t, Y(t))` read off the path itself.
pub fn defect_from_path(field: &VectorField, path: &DensePath) -> Result<PerturbedPath> {
    if path.dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            found: path.dim(),
        });
    }
    let f = field.clone();
    let p = path.clone();
    Ok(PerturbedPath::new(
        path.clone(),
        move |t| {
            let y = p.evaluate(t)?;
            Ok(p.derivative(t)?.sub(&f.eval(t, &y)?))
        },
        Vec::new(),
    ))
}

/// Test defects. Scalar parameters apply to every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefectSpec {
    Zero,
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        frequency: f64,
    },
    /// `before` on `t < breakpoint`, `after` from there on.
    Step {
        breakpoint: f64,
        before: f64,
        after: f64,
    },
    /// `E = factor * Y`.
    Coupled {
        factor: f64,
    },
}

impl DefectSpec {
    /// The five standard defects; the step sits at the middle of `window`.
    pub fn suite(window: TimeWindow) -> Vec<DefectSpec> {
        vec![
            DefectSpec::Zero,
            DefectSpec::Constant { value: 1.0 },
            DefectSpec::Sine {
                amplitude: 0.1,
                frequency: 1.0,
            },
            DefectSpec::Step {
                breakpoint: window.at(0.5),
                before: 0.1,
                after: -0.2,
            },
            DefectSpec::Coupled { factor: 0.1 },
        ]
    }

    pub fn id(&self) -> String {
        match self {
            DefectSpec::Zero => "zero".into(),
            DefectSpec::Constant { value } => format!("constant({value})"),
            DefectSpec::Sine { amplitude, frequency } => format!("sine({amplitude};{frequency})"),
            DefectSpec::Step {
                breakpoint,
                before,
                after,
            } => format!("step({breakpoint};{before};{after})"),
            DefectSpec::Coupled { factor } => format!("coupled({factor})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params: Vec<f64> = match self {
            DefectSpec::Zero => vec![],
            DefectSpec::Constant { value } => vec![*value],
            DefectSpec::Sine { amplitude, frequency } => vec![*amplitude, *frequency],
            DefectSpec::Step {
                breakpoint,
                before,
                after,
            } => vec![*breakpoint, *before, *after],
            DefectSpec::Coupled { factor } => vec![*factor],
        };
        if params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "non-finite defect parameter in {}",
                self.id()
            )))
        }
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            DefectSpec::Step { breakpoint, .. } => vec![*breakpoint],
            _ => Vec::new(),
        }
    }

    /// `e(t, y)`, so that the perturbed equation reads `y' = f(t, y) + e(t, y)`.
    fn state_defect(&self) -> Arc<StateDefectFn> {
        match *self {
            DefectSpec::Zero => Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            DefectSpec::Constant { value } => Arc::new(move |_, _, out: &mut [f64]| out.fill(value)),
            DefectSpec::Sine { amplitude, frequency } => {
                Arc::new(move |t, _, out: &mut [f64]| out.fill(amplitude * (frequency * t).sin()))
            }
            DefectSpec::Step {
                breakpoint,
                before,
                after,
            } => Arc::new(move |t, _, out: &mut [f64]| out.fill(if t < breakpoint { before } else { after })),
            DefectSpec::Coupled { factor } => Arc::new(move |_, y: &[f64], out: &mut [f64]| {
                for (o, yi) in out.iter_mut().zip(y) {
                    *o = factor * yi;
                }
            }),
        }
    }
}

/// Solves `y' = f(t, y) + e(t, y)` on `window` from `y0`, restarting at every
/// defect breakpoint, and declares `E(t) = e(t, Y(t))` along the result.
pub fn perturbed_solution(
    field: &VectorField,
    defect: &DefectSpec,
    window: TimeWindow,
    y0: &StateVector,
    cfg: &IntegratorConfig,
) -> Result<PerturbedPath> {
    defect.validate()?;
    let n = field.dim();
    y0.expect_dim(n)?;
    let e = defect.state_defect();
    let mut cuts = vec![window.start()];
    let inner: Vec<f64> = defect
        .breakpoints()
        .into_iter()
        .filter(|b| *b > window.start() && *b < window.end())
        .collect();
    cuts.extend(&inner);
    cuts.push(window.end());

    let mut pieces = Vec::with_capacity(cuts.len() - 1);
    let mut y = y0.as_slice().to_vec();
    for piece in cuts.windows(2) {
        let (a, b) = (piece[0], piece[1]);
        // evaluate the defect at the piece midpoint side so a step is read
        // from the correct branch even at the piece ends
        let mid = 0.5 * (a + b);
        let e = e.clone();
        let rhs = |t: f64, x: &[f64], dx: &mut [f64]| -> Result<()> {
            field.eval_into(t, x, dx)?;
            let mut extra = vec![0.0; n];
            let tt = if t <= a || t >= b { mid } else { t };
            let step_t = if matches!(defect, DefectSpec::Step { .. }) {
                tt
            } else {
                t
            };
            e(step_t, x, &mut extra);
            for (d, v) in dx.iter_mut().zip(&extra) {
                *d += v;
            }
            Ok(())
        };
        let out = integrate(n, rhs, a, b, &y, cfg)?;
        y = out.end.clone();
        pieces.push(out.dense);
    }
    let path = if pieces.len() == 1 {
        pieces.pop().expect("one piece")
    } else {
        DensePath::concat(&pieces)?
    };
    let p = path.clone();
    let declared = move |t: f64| -> Result<StateVector> {
        let y = p.evaluate(t)?;
        let mut out = vec![0.0; n];
        e(t, y.as_slice(), &mut out);
        StateVector::new(out)
    };
    Ok(PerturbedPath::new(path, declared, inner))
}

/// Terms of the identity on `[s, t]`.
#[derive(Debug, Clone)]
pub struct AGDecomposition {
    pub s: f64,
    pub t: f64,
    /// `X_{s,t}^{Y_s}`
    pub flow_term: StateVector,
    /// Per-panel pieces of the transported-defect integral, ascending in time.
    pub contributions: Vec<Panel>,
    /// Left-to-right sum of `contributions`.
    pub integral_term: StateVector,
    pub reconstruction: StateVector,
    /// `|Y_t - reconstruction|`
    pub residual: f64,
    /// Sum of the contribution norms.
    pub abs_integral: f64,
    pub evaluations: usize,
}

impl AGDecomposition {
    /// Contributions summed over the intervals between consecutive `nodes`.
    pub fn grouped(&self, nodes: &[f64]) -> Vec<(f64, f64, StateVector)> {
        let dim = self.integral_term.dim();
        let mut out: Vec<(f64, f64, Vec<f64>)> = nodes.windows(2).map(|w| (w[0], w[1], vec![0.0; dim])).collect();
        for p in &self.contributions {
            let mid = 0.5 * (p.start + p.end);
            let k = nodes
                .partition_point(|n| *n <= mid)
                .saturating_sub(1)
                .min(out.len().saturating_sub(1));
            if let Some(slot) = out.get_mut(k) {
                for (acc, v) in slot.2.iter_mut().zip(&p.value) {
                    *acc += v;
                }
            }
        }
        out.into_iter()
            .map(|(a, b, v)| (a, b, StateVector::from_vec_unchecked(v)))
            .collect()
    }
}

/// Evaluates both sides of the identity for `pp` on `[s, t]`.
///
/// The integrand at each quadrature node `tau` is the flow sensitivity
/// `(dX_{tau,t}/dx)(Y_tau) E_tau`, computed by its own variational solve.
/// Panels never straddle `pp.defect_breakpoints`.
pub fn ag_reconstruct(
    field: &VectorField,
    pp: &PerturbedPath,
    s: f64,
    t: f64,
    cfg: &IntegratorConfig,
    quad: &QuadSpec,
) -> Result<AGDecomposition> {
    let window = pp.path.window();
    window.check(s)?;
    window.check(t)?;
    if s > t {
        return Err(Error::InvalidArgument(format!("interval end {t} precedes start {s}")));
    }
    let n = field.dim();
    let ys = pp.path.evaluate(s)?;
    let yt = pp.path.evaluate(t)?;
    let flow_term = evolve(field, s, t, &ys, cfg)?.value;

    let integrand = |tau: f64| -> Result<Vec<f64>> {
        let y = pp.path.evaluate(tau)?;
        let e = pp.defect(tau)?;
        Ok(flow_jvp(field, tau, t, &y, &e, cfg)?.jvp_value.into_vec())
    };
    let outcome = quadrature::integrate(integrand, n, s, t, &pp.defect_breakpoints, quad)?;
    let integral_term = StateVector::new(outcome.total)?;
    let reconstruction = flow_term.add(&integral_term);
    let residual = yt.dist(&reconstruction);
    Ok(AGDecomposition {
        s,
        t,
        flow_term,
        contributions: outcome.panels,
        integral_term,
        reconstruction,
        residual,
        abs_integral: outcome.abs_total,
        evaluations: outcome.evaluations,
    })
}

/// The integrand at `tau` computed two ways: from the declared defect, and
/// in the form `(dX/dx)(Y' - Phi'_{tau,tau}(Y))` with `Phi'_{tau,tau}(x)`
/// the current-time derivative of the flow at zero elapsed time.
pub fn proposition_integrand(
    field: &VectorField,
    pp: &PerturbedPath,
    tau: f64,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<(StateVector, StateVector)> {
    let y = pp.path.evaluate(tau)?;
    let direct = flow_jvp(field, tau, t, &y, &pp.defect(tau)?, cfg)?.jvp_value;
    let generator = d_current_time(field, tau, tau, &y, cfg)?;
    let v = pp.path.derivative(tau)?.sub(&generator);
    let via_generator = flow_jvp(field, tau, t, &y, &v, cfg)?.jvp_value;
    Ok((direct, via_generator))
}

/// One-step methods that can be decomposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OneStepMethod {
    Euler,
    Heun,
    Rk4,
}

impl OneStepMethod {
    pub fn order(self) -> u32 {
        match self {
            OneStepMethod::Euler => 1,
            OneStepMethod::Heun => 2,
            OneStepMethod::Rk4 => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            OneStepMethod::Euler => "euler",
            OneStepMethod::Heun => "heun",
            OneStepMethod::Rk4 => "rk4",
        }
    }

    fn step(self, field: &VectorField, t: f64, h: f64, y: &StateVector) -> Result<StateVector> {
        let k1 = field.eval(t, y)?;
        Ok(match self {
            OneStepMethod::Euler => y.axpy(h, &k1),
            OneStepMethod::Heun => {
                let k2 = field.eval(t + h, &y.axpy(h, &k1))?;
                y.axpy(0.5 * h, &k1.add(&k2))
            }
            OneStepMethod::Rk4 => {
                let k2 = field.eval(t + 0.5 * h, &y.axpy(0.5 * h, &k1))?;
                let k3 = field.eval(t + 0.5 * h, &y.axpy(0.5 * h, &k2))?;
                let k4 = field.eval(t + h, &y.axpy(h, &k3))?;
                let sum = k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4);
                y.axpy(h / 6.0, &sum)
            }
        })
    }
}

/// Discrete trajectory of a method, with `f` evaluated at every node.
#[derive(Debug, Clone)]
pub struct MethodTrajectory {
    pub nodes: Vec<f64>,
    pub states: Vec<StateVector>,
    pub method_tag: String,
    pub node_derivatives: Vec<StateVector>,
}

impl MethodTrajectory {
    pub fn new(field: &VectorField, nodes: Vec<f64>, states: Vec<StateVector>, method_tag: &str) -> Result<Self> {
        if nodes.len() < 2 || nodes.len() != states.len() {
            return Err(Error::InvalidArgument(
                "a trajectory needs at least two nodes, one state each".into(),
            ));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("node times must be strictly increasing".into()));
        }
        let node_derivatives = nodes
            .iter()
            .zip(&states)
            .map(|(t, y)| field.eval(*t, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            nodes,
            states,
            method_tag: method_tag.into(),
            node_derivatives,
        })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn last_state(&self) -> &StateVector {
        &self.states[self.states.len() - 1]
    }
}

fn uniform_nodes(t0: f64, t1: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !(t1 > t0) {
        return Err(Error::InvalidArgument(format!(
            "need t1 > t0 and at least one step, got [{t0}, {t1}] / {steps}"
        )));
    }
    Ok((0..=steps).map(|k| lerp(t0, t1, k as f64 / steps as f64)).collect())
}

/// Runs `method` with `steps` uniform steps on `[t0, t1]`.
pub fn run_method(
    field: &VectorField,
    method: OneStepMethod,
    t0: f64,
    t1: f64,
    x0: &StateVector,
    steps: usize,
) -> Result<MethodTrajectory> {
    x0.expect_dim(field.dim())?;
    let nodes = uniform_nodes(t0, t1, steps)?;
    let mut states = Vec::with_capacity(nodes.len());
    states.push(x0.clone());
    for k in 0..steps {
        let h = nodes[k + 1] - nodes[k];
        let next = method.step(field, nodes[k], h, &states[k])?;
        states.push(next);
    }
    MethodTrajectory::new(field, nodes, states, method.tag())
}

/// The "exact method": nodes sampled from the integrator's dense output.
pub fn exact_trajectory(
    field: &VectorField,
    t0: f64,
    t1: f64,
    x0: &StateVector,
    steps: usize,
    cfg: &IntegratorConfig,
) -> Result<MethodTrajectory> {
    let nodes = uniform_nodes(t0, t1, steps)?;
    let dense = evolve(field, t0, t1, x0, cfg)?.dense;
    let states = nodes.iter().map(|t| dense.evaluate(*t)).collect::<Result<Vec<_>>>()?;
    MethodTrajectory::new(field, nodes, states, "exact")
}

/// Piecewise cubic Hermite path through the method's nodes.
pub fn dense_extension(method: &MethodTrajectory) -> Result<DensePath> {
    DensePath::hermite(&method.nodes, &method.states, &method.node_derivatives)
}

/// Global error of a method split into transported local defects.
#[derive(Debug, Clone)]
pub struct ErrorDecomposition {
    pub decomposition: AGDecomposition,
    /// `X_{t_0,t_N}^{y_0}` from the integrator.
    pub reference: StateVector,
    /// `reference - y_N`; the identity predicts `-integral_term`.
    pub global_error: StateVector,
    /// `|global_error + integral_term| / |global_error|`
    pub agreement: f64,
}

pub fn error_decomposition(
    field: &VectorField,
    method: &MethodTrajectory,
    cfg: &IntegratorConfig,
    quad: &QuadSpec,
) -> Result<ErrorDecomposition> {
    let path = dense_extension(method)?;
    let pp = defect_from_path(field, &path)?;
    let (t0, tn) = (method.nodes[0], method.nodes[method.nodes.len() - 1]);
    let decomposition = ag_reconstruct(field, &pp, t0, tn, cfg, quad)?;
    let reference = evolve(field, t0, tn, &method.states[0], cfg)?.value;
    let global_error = reference.sub(method.last_state());
    let mismatch = global_error.add(&decomposition.integral_term).norm();
    let agreement = relative(mismatch, global_error.norm());
    Ok(ErrorDecomposition {
        decomposition,
        reference,
        global_error,
        agreement,
    })
}

fn relative(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

type MapFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type MapJvpFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A differentiable map `phi: R^in -> R^out` with its derivative action.
#[derive(Clone)]
pub struct SmoothMap {
    pub in_dim: usize,
    pub out_dim: usize,
    eval: Arc<MapFn>,
    jvp: Arc<MapJvpFn>,
}

impl SmoothMap {
    pub fn new<F, J>(in_dim: usize, out_dim: usize, eval: F, jvp: J) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        J: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            in_dim,
            out_dim,
            eval: Arc::new(eval),
            jvp: Arc::new(jvp),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(dim, dim, |x| x.to_vec(), |_, v| v.to_vec())
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.eval)(x)
    }

    pub fn jvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        (self.jvp)(x, v)
    }
}

/// `|phi(F(b)) - phi(F(a)) - int_a^b phi'(F(s)) f(s) ds|` where `f = F'`.
pub fn chain_rule_residual<G>(
    phi: &SmoothMap,
    path: &DensePath,
    f_of_path: G,
    a: f64,
    b: f64,
    quad: &QuadSpec,
) -> Result<f64>
where
    G: Fn(f64) -> Result<StateVector> + Sync + Send,
{
    if path.dim() != phi.in_dim {
        return Err(Error::DimensionMismatch {
            expected: phi.in_dim,
            found: path.dim(),
        });
    }
    let integrand = |s: f64| -> Result<Vec<f64>> {
        let x = path.evaluate(s)?;
        let v = f_of_path(s)?;
        Ok(phi.jvp(x.as_slice(), v.as_slice()))
    };
    let integral = quadrature::integrate(integrand, phi.out_dim, a, b, path.breakpoints(), quad)?.total;
    let lhs_b = phi.eval(path.evaluate(b)?.as_slice());
    let lhs_a = phi.eval(path.evaluate(a)?.as_slice());
    let diff: Vec<f64> = (0..phi.out_dim).map(|i| lhs_b[i] - lhs_a[i] - integral[i]).collect();
    Ok(max_norm(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{by_name, fields};
    use std::f64::consts::E;

    fn sv(x: &[f64]) -> StateVector {
        StateVector::from_slice(x).unwrap()
    }

    fn unit() -> TimeWindow {
        TimeWindow::new(0.0, 1.0).unwrap()
    }

    fn tight() -> IntegratorConfig {
        IntegratorConfig::with_tol(1e-12, 1e-12).unwrap()
    }

    #[test]
    fn defect_examples() {
        // exact solution of x' = x has no defect
        let f = fields::linear_scalar(1.0);
        let exact = DensePath::from_fn(unit(), 1, vec![], |t, o| o[0] = t.exp(), |t, o| o[0] = t.exp()).unwrap();
        let pp = defect_from_path(&f, &exact).unwrap();
        assert!(pp.defect(0.4).unwrap().norm() < 1e-15);
        // constant path: E = -f
        let log = fields::logistic();
        let pp = defect_from_path(&log, &DensePath::constant(unit(), &sv(&[0.3]))).unwrap();
        assert!((pp.defect(0.5).unwrap()[0] + 0.21).abs() < 1e-15);
        // zero field, affine path: E = c
        let z = fields::zero(1);
        let line = DensePath::from_fn(unit(), 1, vec![], |t, o| o[0] = 2.0 + 3.0 * t, |_, o| o[0] = 3.0).unwrap();
        assert_eq!(defect_from_path(&z, &line).unwrap().defect(0.7).unwrap()[0], 3.0);
    }

    #[test]
    fn dense_extension_examples() {
        let z = fields::zero(1);
        let m = MethodTrajectory::new(&z, vec![0.0, 1.0], vec![sv(&[2.0]), sv(&[2.0])], "flat").unwrap();
        let p = dense_extension(&m).unwrap();
        assert_eq!(p.evaluate(0.37).unwrap()[0], 2.0);

        let f = fields::linear_scalar(1.0);
        let nodes: Vec<f64> = (0..8).map(|k| k as f64 / 7.0).collect();
        let states: Vec<StateVector> = nodes.iter().map(|t| sv(&[t.exp()])).collect();
        let p = dense_extension(&MethodTrajectory::new(&f, nodes, states, "exact").unwrap()).unwrap();
        let worst = (0..=200)
            .map(|k| k as f64 / 200.0)
            .map(|t| (p.evaluate(t).unwrap()[0] - t.exp()).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");

        let euler = run_method(
            &fields::constant(vec![1.5]),
            OneStepMethod::Euler,
            0.0,
            1.0,
            &sv(&[0.0]),
            1,
        )
        .unwrap();
        let p = dense_extension(&euler).unwrap();
        assert!((p.evaluate(0.25).unwrap()[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn zero_defect_reconstructs_the_flow() {
        let f = fields::logistic();
        let cfg = IntegratorConfig::default();
        let pp = perturbed_solution(&f, &DefectSpec::Zero, unit(), &sv(&[0.2]), &tight()).unwrap();
        let d = ag_reconstruct(&f, &pp, 0.1, 0.9, &cfg, &QuadSpec::default()).unwrap();
        assert_eq!(d.integral_term.norm(), 0.0);
        assert!(d.residual <= 1e-9);
    }

    #[test]
    fn closed_form_linear_instance() {
        let f = fields::linear_scalar(1.0);
        let y = DensePath::from_fn(
            unit(),
            1,
            vec![],
            |t, o| o[0] = 2.0 * t.exp() - 1.0,
            |t, o| o[0] = 2.0 * t.exp(),
        )
        .unwrap();
        let pp = PerturbedPath::new(y, |_| StateVector::filled(1, 1.0), vec![]);
        let d = ag_reconstruct(&f, &pp, 0.0, 1.0, &IntegratorConfig::default(), &QuadSpec::default()).unwrap();
        assert!((d.flow_term[0] - E).abs() <= 1e-7);
        assert!((d.integral_term[0] - (E - 1.0)).abs() <= 1e-7);
        assert!((d.reconstruction[0] - (2.0 * E - 1.0)).abs() <= 1e-7);
        assert!(d.residual <= 1e-7);
    }

    #[test]
    fn logistic_sine_defect() {
        let f = fields::logistic();
        let spec = DefectSpec::Sine {
            amplitude: 0.1,
            frequency: 1.0,
        };
        let pp = perturbed_solution(&f, &spec, unit(), &sv(&[0.5]), &tight()).unwrap();
        let d = ag_reconstruct(
            &f,
            &pp,
            0.0,
            1.0,
            &IntegratorConfig::default(),
            &QuadSpec::default().panels(64),
        )
        .unwrap();
        assert!(d.residual <= 1e-6, "{}", d.residual);
        assert!(d.contributions.len() >= 64);
    }

    #[test]
    fn declared_defects_satisfy_the_relation() {
        let f = fields::cubic_decay();
        for spec in DefectSpec::suite(unit()) {
            let pp = perturbed_solution(&f, &spec, unit(), &sv(&[0.8]), &tight()).unwrap();
            assert!(pp.relation_residual(&f, 9).unwrap() <= 1e-8, "{}", spec.id());
        }
    }

    #[test]
    fn step_defect_breakpoint_respected() {
        let f = fields::linear_scalar(-2.0);
        let spec = DefectSpec::Step {
            breakpoint: 0.5,
            before: 1.0,
            after: -1.0,
        };
        let pp = perturbed_solution(&f, &spec, unit(), &sv(&[1.0]), &tight()).unwrap();
        assert!(pp.defect_breakpoints.contains(&0.5));
        let d = ag_reconstruct(&f, &pp, 0.0, 1.0, &IntegratorConfig::default(), &QuadSpec::default()).unwrap();
        assert!(d.contributions.iter().all(|p| !(p.start < 0.5 && p.end > 0.5)));
        assert!(d.residual <= 1e-8, "{}", d.residual);
    }

    #[test]
    fn exact_method_has_no_error() {
        let f = fields::logistic();
        let cfg = tight();
        let m = exact_trajectory(&f, 0.0, 1.0, &sv(&[0.5]), 16, &cfg).unwrap();
        let r = error_decomposition(&f, &m, &cfg, &QuadSpec::with_tol(1e-12)).unwrap();
        assert!(r.global_error.norm() <= 1e-10);
        assert!(r.decomposition.integral_term.norm() <= 1e-9);
    }

    #[test]
    fn euler_error_matches_integral_term() {
        let f = fields::logistic();
        let m = run_method(&f, OneStepMethod::Euler, 0.0, 1.0, &sv(&[0.5]), 64).unwrap();
        let r = error_decomposition(&f, &m, &tight(), &QuadSpec::with_tol(1e-12)).unwrap();
        let exact = by_name("logistic").unwrap().exact(0.0, 1.0, &sv(&[0.5])).unwrap();
        let direct = exact.sub(m.last_state());
        assert!(direct.dist(&r.global_error) <= 1e-10);
        assert!(r.agreement <= 0.01, "{}", r.agreement);
        let grouped = r.decomposition.grouped(&m.nodes);
        assert_eq!(grouped.len(), 64);
        let sum: f64 = grouped.iter().map(|g| g.2[0]).sum();
        assert!((sum - r.decomposition.integral_term[0]).abs() <= 1e-14);
    }

    #[test]
    fn proposition_form_agrees() {
        let f = fields::logistic();
        let m = run_method(&f, OneStepMethod::Heun, 0.0, 1.0, &sv(&[0.3]), 8).unwrap();
        let pp = defect_from_path(&f, &dense_extension(&m).unwrap()).unwrap();
        for k in 0..10 {
            let tau = 0.05 + 0.09 * k as f64;
            let (a, b) = proposition_integrand(&f, &pp, tau, 1.0, &tight()).unwrap();
            assert!(a.dist(&b) <= 1e-10);
        }
    }

    #[test]
    fn chain_rule_examples() {
        let quad = QuadSpec::with_tol(1e-12);
        let line = DensePath::from_fn(unit(), 1, vec![], |t, o| o[0] = t, |_, o| o[0] = 1.0).unwrap();
        let one = |_| StateVector::filled(1, 1.0);
        let id = SmoothMap::identity(1);
        assert!(chain_rule_residual(&id, &line, one, 0.0, 1.0, &quad).unwrap() <= 1e-12);
        let square = SmoothMap::new(1, 1, |x| vec![x[0] * x[0]], |x, v| vec![2.0 * x[0] * v[0]]);
        assert!(chain_rule_residual(&square, &line, one, 0.0, 1.0, &quad).unwrap() <= 1e-12);
        let exp = DensePath::from_fn(unit(), 1, vec![], |t, o| o[0] = t.exp(), |t, o| o[0] = t.exp()).unwrap();
        let sine = SmoothMap::new(1, 1, |x| vec![x[0].sin()], |x, v| vec![x[0].cos() * v[0]]);
        let r = chain_rule_residual(
            &sine,
            &exp,
            |t| StateVector::new(vec![f64::exp(t)]),
            0.0,
            1.0,
            &QuadSpec::with_tol(1e-9).panels(64),
        )
        .unwrap();
        assert!(r <= 1e-8);
    }

    #[test]
    fn method_orders() {
        let f = fields::linear_scalar(1.0);
        for method in [OneStepMethod::Euler, OneStepMethod::Heun, OneStepMethod::Rk4] {
            let err = |n| (run_method(&f, method, 0.0, 1.0, &sv(&[1.0]), n).unwrap().last_state()[0] - E).abs();
            let ratio = (err(20) / err(40)).log2();
            assert!((ratio - method.order() as f64).abs() < 0.15, "{method:?}: {ratio}");
        }
    }
}
