//! Benchmark vector fields with closed-form flows, flow Jacobians and ball
//! constants. Every other module is tested against these.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quadrature::{self, QuadSpec};
use crate::types::{StateVector, TimeWindow, VectorField};

type FlowFn = dyn Fn(f64, f64, &StateVector) -> StateVector + Send + Sync;
type FlowJvpFn = dyn Fn(f64, f64, &StateVector, &StateVector) -> StateVector + Send + Sync;
type BallFn = dyn Fn(&StateVector, f64) -> (f64, f64) + Send + Sync;

/// A registered problem and its oracles.
#[derive(Clone)]
pub struct CatalogProblem {
    pub name: &'static str,
    pub field: VectorField,
    pub window: TimeWindow,
    pub exact_flow: Option<Arc<FlowFn>>,
    pub exact_flow_jvp: Option<Arc<FlowJvpFn>>,
    /// `(center, radius) -> (L, M)` over the max-norm ball.
    pub lipschitz_on_ball: Option<Arc<BallFn>>,
    /// Random initial states are drawn from `center ± radius * scale_k`.
    pub state_center: StateVector,
    pub state_radius: f64,
    pub state_scale: Vec<f64>,
    /// Radius of a ball around `state_center` containing every trajectory
    /// started in the sampling box, over the whole window.
    pub invariant_radius: Option<f64>,
    pub notes: &'static str,
}

impl fmt::Debug for CatalogProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CatalogProblem")
            .field("name", &self.name)
            .field("dim", &self.field.dim())
            .field("window", &self.window)
            .field("exact_flow", &self.exact_flow.is_some())
            .finish()
    }
}

impl CatalogProblem {
    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn has_oracle(&self) -> bool {
        self.exact_flow.is_some()
    }

    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        let coords = self
            .state_center
            .as_slice()
            .iter()
            .zip(&self.state_scale)
            .map(|(c, w)| c + self.state_radius * w * rng.random_range(-1.0..=1.0))
            .collect();
        StateVector::from_vec_unchecked(coords)
    }

    /// Random `s <= t` inside the window.
    pub fn sample_interval<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let a = self.window.at(rng.random_range(0.0..1.0));
        let b = self.window.at(rng.random_range(0.0..1.0));
        (a.min(b), a.max(b))
    }

    pub fn exact(&self, s: f64, t: f64, x: &StateVector) -> Option<StateVector> {
        self.exact_flow.as_ref().map(|f| f(s, t, x))
    }
}

/// Vector field constructors used by the catalog and by tests.
pub mod fields {
    use super::*;

    pub fn zero(dim: usize) -> VectorField {
        VectorField::new(dim, |_, _, out| out.fill(0.0)).with_jvp(|_, _, _, out| out.fill(0.0))
    }

    pub fn constant(c: Vec<f64>) -> VectorField {
        let n = c.len();
        VectorField::new(n, move |_, _, out| out.copy_from_slice(&c)).with_jvp(|_, _, _, out| out.fill(0.0))
    }

    pub fn linear_scalar(lambda: f64) -> VectorField {
        VectorField::new(1, move |_, x, out| out[0] = lambda * x[0])
            .with_jvp(move |_, _, v, out| out[0] = lambda * v[0])
    }

    pub fn linear_system(a: DMatrix<f64>) -> VectorField {
        assert!(a.is_square());
        let n = a.nrows();
        let b = a.clone();
        let apply = move |m: &DMatrix<f64>, x: &[f64], out: &mut [f64]| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..n).map(|j| m[(i, j)] * x[j]).sum();
            }
        };
        VectorField::new(n, move |_, x, out| apply(&a, x, out)).with_jvp(move |_, _, v, out| apply(&b, v, out))
    }

    pub fn logistic() -> VectorField {
        VectorField::new(1, |_, x, out| out[0] = x[0] * (1.0 - x[0]))
            .with_jvp(|_, x, v, out| out[0] = (1.0 - 2.0 * x[0]) * v[0])
    }

    pub fn cubic_decay() -> VectorField {
        VectorField::new(1, |_, x, out| out[0] = -x[0] * x[0] * x[0])
            .with_jvp(|_, x, v, out| out[0] = -3.0 * x[0] * x[0] * v[0])
    }

    /// Sine-Galerkin truncation of `u_t = u_xx - u^3` on `(0, pi)` with
    /// Dirichlet conditions: `u_k' = -k^2 u_k - P_k(u^3)`, `k = 1..n`.
    ///
    /// The cubic term is evaluated on `2n` interior collocation points, which
    /// integrates every product of four modes exactly, so `P_k(u^3)` is the
    /// exact cubic convolution of the coefficients.
    pub fn reaction_diffusion(n: usize) -> VectorField {
        let rd = Arc::new(Galerkin::new(n));
        let rd2 = rd.clone();
        VectorField::new(n, move |_, u, out| rd.eval(u, out)).with_jvp(move |_, u, v, out| rd2.jvp(u, v, out))
    }

    /// Collocation transforms between sine coefficients and the grid
    /// `x_j = (j+1) pi / (m+1)`, both of which are type-I sine transforms.
    pub(crate) struct Galerkin {
        n: usize,
        m: usize,
        fft: Arc<dyn rustfft::Fft<f64>>,
    }

    impl Galerkin {
        pub(crate) fn new(n: usize) -> Self {
            let m = 2 * n;
            let fft = rustfft::FftPlanner::new().plan_fft_forward(2 * (m + 1));
            Self { n, m, fft }
        }

        /// `out[k] = sum_j input[j] sin((j+1)(k+1) pi / (m+1))`, through the odd
        /// extension of length `2(m+1)`.
        fn dst(&self, input: &[f64], out: &mut [f64]) {
            let len = 2 * (self.m + 1);
            let mut buf = vec![rustfft::num_complex::Complex::new(0.0, 0.0); len];
            for (j, x) in input.iter().enumerate() {
                buf[j + 1].re = *x;
                buf[len - 1 - j].re = -*x;
            }
            self.fft.process(&mut buf);
            for (k, o) in out.iter_mut().enumerate() {
                *o = -0.5 * buf[k + 1].im;
            }
        }

        pub(crate) fn to_grid(&self, coeffs: &[f64], grid: &mut [f64]) {
            self.dst(coeffs, grid);
        }

        pub(crate) fn project(&self, grid: &[f64], out: &mut [f64]) {
            self.dst(grid, out);
            let scale = 2.0 / (self.m + 1) as f64;
            out.iter_mut().for_each(|o| *o *= scale);
        }

        fn eval(&self, u: &[f64], out: &mut [f64]) {
            let mut grid = vec![0.0; self.m];
            self.to_grid(u, &mut grid);
            for g in grid.iter_mut() {
                *g = -*g * *g * *g;
            }
            self.project(&grid, out);
            for (k, o) in out.iter_mut().enumerate() {
                let kk = (k + 1) as f64;
                *o -= kk * kk * u[k];
            }
        }

        fn jvp(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
            let mut gu = vec![0.0; self.m];
            let mut gv = vec![0.0; self.m];
            self.to_grid(u, &mut gu);
            self.to_grid(v, &mut gv);
            for (a, b) in gu.iter_mut().zip(&gv) {
                *a = -3.0 * *a * *a * b;
            }
            self.project(&gu, out);
            debug_assert_eq!(out.len(), self.n);
            for (k, o) in out.iter_mut().enumerate() {
                let kk = (k + 1) as f64;
                *o -= kk * kk * v[k];
            }
        }
    }
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let b = a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn linear_system_matrix() -> DMatrix<f64> {
    // Row-diagonally dominant with negative diagonal, so the max-norm
    // logarithmic norm is -0.5 and trajectories never leave their ball.
    DMatrix::from_row_slice(3, 3, &[-3.0, 1.0, 0.5, -1.0, -2.0, 0.5, 0.2, -0.3, -1.0])
}

fn unit_window() -> TimeWindow {
    TimeWindow::new(0.0, 1.0).expect("valid window")
}

fn zero_problem(name: &'static str, dim: usize) -> CatalogProblem {
    CatalogProblem {
        name,
        field: fields::zero(dim),
        window: unit_window(),
        exact_flow: Some(Arc::new(|_, _, x| x.clone())),
        exact_flow_jvp: Some(Arc::new(|_, _, _, v| v.clone())),
        lipschitz_on_ball: Some(Arc::new(|_, _| (0.0, 0.0))),
        state_center: StateVector::zeros(dim),
        state_radius: 1.0,
        state_scale: vec![1.0; dim],
        invariant_radius: Some(1.0),
        notes: "identity flow",
    }
}

fn linear_problem(name: &'static str, lambda: f64) -> CatalogProblem {
    let window = unit_window();
    CatalogProblem {
        name,
        field: fields::linear_scalar(lambda),
        window,
        exact_flow: Some(Arc::new(move |s, t, x| x.scale((lambda * (t - s)).exp()))),
        exact_flow_jvp: Some(Arc::new(move |s, t, _, v| v.scale((lambda * (t - s)).exp()))),
        lipschitz_on_ball: Some(Arc::new(move |c, r| (lambda.abs(), lambda.abs() * (c.norm() + r)))),
        state_center: StateVector::zeros(1),
        state_radius: 1.0,
        state_scale: vec![1.0],
        invariant_radius: Some((lambda * window.length()).exp().max(1.0)),
        notes: "x' = lambda x",
    }
}

fn linear_system_problem() -> CatalogProblem {
    let a = linear_system_matrix();
    let a_norm = a
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let a1 = a.clone();
    let a2 = a.clone();
    let propagate = |a: &DMatrix<f64>, tau: f64, x: &StateVector| {
        let e = expm(&(a * tau));
        let y = e * DVector::from_column_slice(x.as_slice());
        StateVector::from_vec_unchecked(y.as_slice().to_vec())
    };
    CatalogProblem {
        name: "linear-system-3",
        field: fields::linear_system(a),
        window: unit_window(),
        exact_flow: Some(Arc::new(move |s, t, x| propagate(&a1, t - s, x))),
        exact_flow_jvp: Some(Arc::new(move |s, t, _, v| propagate(&a2, t - s, v))),
        lipschitz_on_ball: Some(Arc::new(move |c, r| (a_norm, a_norm * (c.norm() + r)))),
        state_center: StateVector::zeros(3),
        state_radius: 1.0,
        state_scale: vec![1.0; 3],
        invariant_radius: Some(1.0),
        notes: "x' = A x, exact flow through the matrix exponential",
    }
}

fn logistic_problem() -> CatalogProblem {
    let flow = |tau: f64, x: f64| {
        let e = tau.exp();
        x * e / (1.0 - x + x * e)
    };
    CatalogProblem {
        name: "logistic",
        field: fields::logistic(),
        window: unit_window(),
        exact_flow: Some(Arc::new(move |s, t, x| {
            StateVector::from_vec_unchecked(vec![flow(t - s, x[0])])
        })),
        exact_flow_jvp: Some(Arc::new(|s, t, x, v| {
            let e = (t - s).exp();
            let d = 1.0 - x[0] + x[0] * e;
            StateVector::from_vec_unchecked(vec![e / (d * d) * v[0]])
        })),
        lipschitz_on_ball: Some(Arc::new(|c, r| {
            let (lo, hi) = (c[0] - r, c[0] + r);
            let l = (1.0 - 2.0 * lo).abs().max((1.0 - 2.0 * hi).abs());
            let g = |y: f64| (y * (1.0 - y)).abs();
            let mut m = g(lo).max(g(hi));
            if lo <= 0.5 && 0.5 <= hi {
                m = m.max(0.25);
            }
            (l, m)
        })),
        state_center: StateVector::from_vec_unchecked(vec![0.5]),
        state_radius: 0.4,
        state_scale: vec![1.0],
        // trajectories from [0.1, 0.9] stay in [0.1, 1)
        invariant_radius: Some(0.5),
        notes: "x' = x(1 - x)",
    }
}

fn cubic_problem() -> CatalogProblem {
    CatalogProblem {
        name: "cubic-decay",
        field: fields::cubic_decay(),
        window: unit_window(),
        exact_flow: Some(Arc::new(|s, t, x| {
            let x0 = x[0];
            StateVector::from_vec_unchecked(vec![x0 / (1.0 + 2.0 * x0 * x0 * (t - s)).sqrt()])
        })),
        exact_flow_jvp: Some(Arc::new(|s, t, x, v| {
            let d = 1.0 + 2.0 * x[0] * x[0] * (t - s);
            StateVector::from_vec_unchecked(vec![v[0] / (d * d.sqrt())])
        })),
        lipschitz_on_ball: Some(Arc::new(|c, r| {
            let b = c[0].abs() + r;
            (3.0 * b * b, b * b * b)
        })),
        state_center: StateVector::zeros(1),
        state_radius: 1.0,
        state_scale: vec![1.0],
        invariant_radius: Some(1.0),
        notes: "x' = -x^3, locally but not globally Lipschitz",
    }
}

fn reaction_diffusion_problem(name: &'static str, n: usize, end: f64) -> CatalogProblem {
    CatalogProblem {
        name,
        field: fields::reaction_diffusion(n),
        window: TimeWindow::new(0.0, end).expect("valid window"),
        exact_flow: None,
        exact_flow_jvp: None,
        lipschitz_on_ball: None,
        state_center: StateVector::zeros(n),
        state_radius: 0.5,
        state_scale: (1..=n).map(|k| 1.0 / k as f64).collect(),
        invariant_radius: None,
        notes: "sine-Galerkin reaction-diffusion; cross-solver oracle only",
    }
}

/// Every registered problem, in a fixed order.
pub fn catalog() -> Vec<CatalogProblem> {
    vec![
        zero_problem("zero-1", 1),
        zero_problem("zero-3", 3),
        linear_problem("linear-decay", -2.0),
        linear_problem("linear-growth", 1.0),
        linear_system_problem(),
        logistic_problem(),
        cubic_problem(),
        reaction_diffusion_problem("reaction-diffusion-16", 16, 1.0),
        reaction_diffusion_problem("reaction-diffusion-64", 64, 1.0),
        reaction_diffusion_problem("reaction-diffusion-256", 256, 0.1),
    ]
}

pub fn problem_names() -> Vec<&'static str> {
    catalog().iter().map(|p| p.name).collect()
}

pub fn by_name(name: &str) -> Option<CatalogProblem> {
    catalog().into_iter().find(|p| p.name == name)
}

/// Outcome of [`oracle_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub samples: usize,
    /// `|X(s,t,x) - x - int_s^t f(tau, X(s,tau,x)) dtau|`, worst case.
    pub integral_residual: f64,
    /// Relative error of `exact_flow_jvp` against central differences.
    pub jvp_relative_error: f64,
    /// `X(s,s,x) == x` at every sample.
    pub identity_ok: bool,
}

impl OracleReport {
    pub fn passes(&self, integral_tol: f64, jvp_tol: f64) -> bool {
        self.identity_ok && self.integral_residual <= integral_tol && self.jvp_relative_error <= jvp_tol
    }
}

/// Validates a problem's closed forms against its own field at `samples`
/// seeded random `(s, t, x)`.
pub fn oracle_check(problem: &CatalogProblem, samples: usize, seed: u64) -> Result<OracleReport> {
    let flow = problem
        .exact_flow
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no exact flow", problem.name)))?;
    let n = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quad = QuadSpec::with_tol(1e-12);
    let mut report = OracleReport {
        samples,
        integral_residual: 0.0,
        jvp_relative_error: 0.0,
        identity_ok: true,
    };
    for _ in 0..samples {
        let x = problem.sample_state(&mut rng);
        let (s, t) = problem.sample_interval(&mut rng);
        if flow(s, s, &x) != x {
            report.identity_ok = false;
        }
        let integrand = |tau: f64| -> Result<Vec<f64>> { Ok(problem.field.eval(tau, &flow(s, tau, &x))?.into_vec()) };
        let integral = quadrature::integrate(integrand, n, s, t, &[], &quad)?.total;
        let end = flow(s, t, &x);
        for i in 0..n {
            report.integral_residual = report.integral_residual.max((end[i] - x[i] - integral[i]).abs());
        }
        if let Some(jvp) = &problem.exact_flow_jvp {
            let v = problem.sample_state(&mut rng);
            let h = 1e-6 * x.norm().max(1.0);
            let fd = flow(s, t, &x.axpy(h, &v))
                .sub(&flow(s, t, &x.axpy(-h, &v)))
                .scale(0.5 / h);
            let an = jvp(s, t, &x, &v);
            let rel = an.dist(&fd) / an.norm().max(1.0);
            report.jvp_relative_error = report.jvp_relative_error.max(rel);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(x: &[f64]) -> StateVector {
        StateVector::from_slice(x).unwrap()
    }

    #[test]
    fn catalog_contents() {
        let names = problem_names();
        for required in [
            "zero-1",
            "zero-3",
            "linear-decay",
            "linear-growth",
            "linear-system-3",
            "logistic",
            "cubic-decay",
            "reaction-diffusion-16",
            "reaction-diffusion-64",
            "reaction-diffusion-256",
        ] {
            assert!(names.contains(&required), "{required}");
        }
        assert!(by_name("nope").is_none());
        assert_eq!(by_name("reaction-diffusion-256").unwrap().window.end(), 0.1);
    }

    #[test]
    fn closed_form_examples() {
        let zero = by_name("zero-3").unwrap();
        let x = sv(&[1.0, -2.0, 0.5]);
        assert_eq!(zero.exact(0.0, 0.7, &x).unwrap(), x);
        let cubic = by_name("cubic-decay").unwrap();
        assert!((cubic.exact(0.0, 1.0, &sv(&[1.0])).unwrap()[0] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        let decay = by_name("linear-decay").unwrap();
        let j = (decay.exact_flow_jvp.as_ref().unwrap())(0.0, 1.0, &sv(&[0.3]), &sv(&[1.0]));
        assert!((j[0] - 0.1353352832366127).abs() < 1e-15);
    }

    #[test]
    fn expm_agrees_with_nalgebra() {
        let a = linear_system_matrix() * 1.7;
        let ours = expm(&a);
        let theirs = a.clone().exp();
        assert!((ours - theirs).abs().max() < 1e-13);
        assert_eq!(expm(&DMatrix::zeros(2, 2)), DMatrix::identity(2, 2));
    }

    #[test]
    fn oracle_examples() {
        let zero = oracle_check(&by_name("zero-1").unwrap(), 10, 1).unwrap();
        assert_eq!(zero.integral_residual, 0.0);
        // central differences of the identity only carry rounding error
        assert!(zero.jvp_relative_error <= 1e-9);
        let logistic = oracle_check(&by_name("logistic").unwrap(), 50, 2).unwrap();
        assert!(logistic.integral_residual <= 1e-9);
        let cubic = oracle_check(&by_name("cubic-decay").unwrap(), 50, 3).unwrap();
        assert!(cubic.jvp_relative_error <= 1e-6);
    }

    #[test]
    fn every_oracle_is_self_consistent() {
        for p in catalog().iter().filter(|p| p.has_oracle()) {
            let r = oracle_check(p, 50, 7).unwrap();
            assert!(r.passes(1e-9, 1e-6), "{}: {r:?}", p.name);
        }
        assert!(oracle_check(&by_name("reaction-diffusion-16").unwrap(), 1, 0).is_err());
    }

    #[test]
    fn galerkin_cubic_matches_quadrature_projection() {
        // P_k(u^3) against a fine midpoint-rule projection on (0, pi)
        let n = 4;
        let f = fields::reaction_diffusion(n);
        let u = [0.7, -0.2, 0.4, 0.1];
        let out = f.eval(0.0, &sv(&u)).unwrap();
        let pts = 20000;
        for k in 0..n {
            let mut acc = 0.0;
            for j in 0..pts {
                let x = (j as f64 + 0.5) * std::f64::consts::PI / pts as f64;
                let ux: f64 = (0..n).map(|m| u[m] * ((m + 1) as f64 * x).sin()).sum();
                acc += -ux.powi(3) * ((k + 1) as f64 * x).sin();
            }
            let proj = 2.0 / pts as f64 * acc;
            let kk = (k + 1) as f64;
            assert!((out[k] - (-kk * kk * u[k] + proj)).abs() < 1e-8, "mode {k}");
        }
    }

    #[test]
    fn fast_transforms_match_dense_sums() {
        let n = 16;
        let g = fields::Galerkin::new(n);
        let m = 2 * n;
        let coeffs: Vec<f64> = (0..n).map(|k| ((k * 7 % 5) as f64 - 2.0) / (k + 1) as f64).collect();
        let mut grid = vec![0.0; m];
        g.to_grid(&coeffs, &mut grid);
        let mut back = vec![0.0; n];
        g.project(&grid, &mut back);
        for j in 0..m {
            let xj = (j + 1) as f64 * std::f64::consts::PI / (m + 1) as f64;
            let direct: f64 = (0..n).map(|k| coeffs[k] * ((k + 1) as f64 * xj).sin()).sum();
            assert!((grid[j] - direct).abs() < 1e-13);
        }
        for k in 0..n {
            assert!((back[k] - coeffs[k]).abs() < 1e-13, "round trip mode {k}");
        }
    }

    #[test]
    fn catalog_jvps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in catalog() {
            for _ in 0..100 {
                let x = p.sample_state(&mut rng);
                let v = p.sample_state(&mut rng);
                let t = p.window.at(rng.random_range(0.0..1.0));
                let an = p.field.jvp(t, &x, &v).unwrap();
                let fd = p.field.fd_jvp(t, &x, &v, 1e-5).unwrap();
                assert!(an.dist(&fd) / an.norm().max(1.0) <= 1e-5, "{}", p.name);
            }
        }
    }

    #[test]
    fn ball_constants() {
        let l = by_name("logistic").unwrap();
        let (lc, mc) = (l.lipschitz_on_ball.as_ref().unwrap())(&sv(&[0.5]), 0.5);
        assert_eq!((lc, mc), (1.0, 0.25));
        let c = by_name("cubic-decay").unwrap();
        let (lc, mc) = (c.lipschitz_on_ball.as_ref().unwrap())(&sv(&[0.0]), 1.5);
        assert_eq!((lc, mc), (6.75, 3.375));
    }
}
