//! Constructive existence machinery: certified local-existence radius,
//! Picard fixed-point iteration for `x' = f(t, x)`, successive approximation
//! for linear Volterra equations, and the matching Gronwall bound.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::flow::{integrate, IntegratorConfig};
use crate::path::{DensePath, Segment};
use crate::types::{lerp, max_norm, StateVector, TimeWindow, VectorField};

/// Where the constants `L`, `M` came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantSource {
    Analytic,
    /// Sampled lower bounds inflated by the recorded safety factor.
    Estimated {
        safety: f64,
    },
}

/// Ball and time-window data for the local existence argument.
///
/// `l` bounds the Lipschitz quotient of `f` and `m` bounds `|f|` over
/// `[s0 - h, s0 + h] x {y : |y - center| <= radius + eps}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzData {
    pub l: f64,
    pub m: f64,
    pub radius: f64,
    pub eps: f64,
    pub h: f64,
    pub center: StateVector,
    pub s0: f64,
    pub source: ConstantSource,
}

impl LipschitzData {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l: f64,
        m: f64,
        radius: f64,
        eps: f64,
        h: f64,
        center: StateVector,
        s0: f64,
        source: ConstantSource,
    ) -> Result<Self> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !nonneg(l) || !nonneg(m) {
            return Err(Error::InvalidArgument(format!(
                "L and M must be finite and >= 0, got {l}, {m}"
            )));
        }
        if !pos(radius) || !pos(eps) || !pos(h) {
            return Err(Error::InvalidArgument(format!(
                "R, eps and h must be finite and > 0, got {radius}, {eps}, {h}"
            )));
        }
        if !s0.is_finite() {
            return Err(Error::NonFinite("s0"));
        }
        Ok(Self {
            l,
            m,
            radius,
            eps,
            h,
            center,
            s0,
            source,
        })
    }

    /// Radius of the ball on which `l` and `m` must hold.
    pub fn outer_radius(&self) -> f64 {
        self.radius + self.eps
    }
}

/// `min(eps / (2M + 1), 1 / (4L + 1), h)`: half-width of the time interval on
/// which the Picard operator contracts with factor 1/2 and maps the ball of
/// radius `R + eps` into itself.
pub fn certified_radius(data: &LipschitzData) -> f64 {
    (data.eps / (2.0 * data.m + 1.0))
        .min(1.0 / (4.0 * data.l + 1.0))
        .min(data.h)
}

/// Deterministic sampling for [`estimate_l_m`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingGrid {
    pub time_samples: usize,
    pub state_samples: usize,
    pub seed: u64,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self {
            time_samples: 11,
            state_samples: 201,
            seed: 0x5eed,
        }
    }
}

/// Sampled lower estimates of `L` and `M`, before the safety factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub l_est: f64,
    pub m_est: f64,
    pub safety: f64,
}

pub const DEFAULT_SAFETY: f64 = 1.25;

impl LipschitzEstimate {
    pub fn l_inflated(&self) -> f64 {
        self.safety * self.l_est
    }

    pub fn m_inflated(&self) -> f64 {
        self.safety * self.m_est
    }

    pub fn with_safety(mut self, safety: f64) -> Self {
        self.safety = safety;
        self
    }

    /// Builds ball data from the inflated estimates.
    pub fn to_data(&self, center: StateVector, radius: f64, eps: f64, h: f64, s0: f64) -> Result<LipschitzData> {
        LipschitzData::new(
            self.l_inflated(),
            self.m_inflated(),
            radius,
            eps,
            h,
            center,
            s0,
            ConstantSource::Estimated { safety: self.safety },
        )
    }
}

/// Sampled suprema of the difference quotient and of `|f|` over
/// `window x {|y - center| <= radius}` (max norm).
///
/// In one dimension the states form a uniform grid; in higher dimensions the
/// samples are the center, the `2n` axis extremes and seeded uniform points
/// of the ball. Both values are lower bounds of the true suprema.
pub fn estimate_l_m(
    field: &VectorField,
    window: TimeWindow,
    center: &StateVector,
    radius: f64,
    grid: &SamplingGrid,
) -> Result<LipschitzEstimate> {
    let n = field.dim();
    center.expect_dim(n)?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if grid.time_samples == 0 || grid.state_samples < 2 {
        return Err(Error::InvalidArgument(
            "sampling grid needs >= 1 time and >= 2 state samples".into(),
        ));
    }
    let points = ball_samples(center, radius, grid);
    let times: Vec<f64> = if grid.time_samples == 1 {
        vec![window.start()]
    } else {
        (0..grid.time_samples)
            .map(|k| window.at(k as f64 / (grid.time_samples - 1) as f64))
            .collect()
    };
    let mut l_est = 0.0_f64;
    let mut m_est = 0.0_f64;
    let mut values = vec![vec![0.0; n]; points.len()];
    for &tau in &times {
        for (p, v) in points.iter().zip(values.iter_mut()) {
            field.eval_into(tau, p, v)?;
            m_est = m_est.max(max_norm(v));
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let dy = dist(&points[i], &points[j]);
                if dy > 0.0 {
                    l_est = l_est.max(dist(&values[i], &values[j]) / dy);
                }
            }
        }
    }
    Ok(LipschitzEstimate {
        l_est,
        m_est,
        safety: DEFAULT_SAFETY,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn ball_samples(center: &StateVector, radius: f64, grid: &SamplingGrid) -> Vec<Vec<f64>> {
    let n = center.dim();
    let c = center.as_slice();
    if n == 1 {
        let k = grid.state_samples;
        return (0..k)
            .map(|i| vec![lerp(c[0] - radius, c[0] + radius, i as f64 / (k - 1) as f64)])
            .collect();
    }
    let mut pts = vec![c.to_vec()];
    for i in 0..n {
        for sign in [-1.0, 1.0] {
            let mut p = c.to_vec();
            p[i] += sign * radius;
            pts.push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    while pts.len() < grid.state_samples.max(2 * n + 2) {
        pts.push(c.iter().map(|ci| ci + radius * rng.random_range(-1.0..=1.0)).collect());
    }
    pts
}

/// Limits for [`picard_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PicardOptions {
    pub max_iters: usize,
    pub grid_points: usize,
    /// Sup-distance between successive iterates at which iteration stops.
    pub tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grid_points: 257,
            tol: 1e-12,
        }
    }
}

/// Record of one Picard run.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardCertificate {
    pub delta: f64,
    /// Interval `[s0 - delta, s0 + delta]` clipped to the problem window.
    pub interval: TimeWindow,
    /// `d_{k+1} / d_k` for successive sup-distances `d_k = |psi_k - psi_{k-1}|`.
    pub contraction_factors: Vec<f64>,
    pub ball_ok: bool,
    /// Largest `|psi_k(t) - center|` seen over all iterates and grid nodes.
    pub max_ball_distance: f64,
    pub iterations: usize,
    pub source: ConstantSource,
}

impl PicardCertificate {
    pub fn max_contraction(&self) -> f64 {
        self.contraction_factors.iter().fold(0.0_f64, |m, c| m.max(*c))
    }

    /// Ball bound held and every measured factor is at most 1/2.
    pub fn accepted(&self) -> bool {
        self.ball_ok && self.max_contraction() <= 0.5 + 1e-6
    }
}

/// Iterates `psi_{k+1}(t) = x + int_s^t f(tau, psi_k(tau)) dtau` from
/// `psi_0 = x` on a uniform grid over the certified interval.
///
/// Integrals use composite Simpson (with a three-point end correction at odd
/// nodes); the returned path is the cubic Hermite interpolant of the final
/// iterate with slopes `f(t, psi(t))`.
pub fn picard_solve(
    field: &VectorField,
    data: &LipschitzData,
    window: Option<TimeWindow>,
    s: f64,
    x: &StateVector,
    delta: f64,
    opts: &PicardOptions,
) -> Result<(DensePath, PicardCertificate)> {
    let n = field.dim();
    x.expect_dim(n)?;
    data.center.expect_dim(n)?;
    if !(delta > 0.0) || delta > data.h {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, h], got {delta}")));
    }
    if x.dist(&data.center) > data.radius {
        return Err(Error::InvalidArgument(format!(
            "initial value lies outside the ball of radius {} around the center",
            data.radius
        )));
    }
    if opts.grid_points < 3 || opts.max_iters == 0 {
        return Err(Error::InvalidArgument(
            "need >= 3 grid points and >= 1 iteration".into(),
        ));
    }
    let mut lo = data.s0 - delta;
    let mut hi = data.s0 + delta;
    if let Some(w) = window {
        lo = lo.max(w.start());
        hi = hi.min(w.end());
    }
    if !(lo < hi) {
        return Err(Error::InvalidArgument(
            "certified interval does not meet the window".into(),
        ));
    }
    if !(lo <= s && s <= hi) {
        return Err(Error::InvalidArgument(format!(
            "s = {s} outside the certified interval [{lo}, {hi}]"
        )));
    }
    let interval = TimeWindow::new(lo, hi)?;

    // Uniform pieces [lo, s] and [s, hi] so that s is a grid node.
    let cells = opts.grid_points - 1;
    let mut left_cells = ((s - lo) / (hi - lo) * cells as f64).round() as usize;
    if s > lo {
        left_cells = left_cells.max(2);
    } else {
        left_cells = 0;
    }
    let mut right_cells = cells.saturating_sub(left_cells);
    if s < hi {
        right_cells = right_cells.max(2);
    } else {
        right_cells = 0;
    }
    let left_nodes: Vec<f64> = (0..=left_cells)
        .map(|j| lerp(s, lo, j as f64 / left_cells.max(1) as f64))
        .collect();
    let right_nodes: Vec<f64> = (0..=right_cells)
        .map(|j| lerp(s, hi, j as f64 / right_cells.max(1) as f64))
        .collect();

    let limit = data.outer_radius();
    let mut psi_left = vec![x.as_slice().to_vec(); left_nodes.len()];
    let mut psi_right = vec![x.as_slice().to_vec(); right_nodes.len()];
    let mut factors = Vec::new();
    let mut prev_change: Option<f64> = None;
    let mut max_ball = x.dist(&data.center);
    let mut iterations = 0;
    let mut converged = false;
    let mut last_change = f64::INFINITY;

    while iterations < opts.max_iters {
        iterations += 1;
        let next_left = picard_sweep(field, &left_nodes, &psi_left, x.as_slice())?;
        let next_right = picard_sweep(field, &right_nodes, &psi_right, x.as_slice())?;
        let change = sup_dist(&next_left, &psi_left).max(sup_dist(&next_right, &psi_right));
        for p in next_left.iter().chain(&next_right) {
            max_ball = max_ball.max(dist(p, data.center.as_slice()));
        }
        if let Some(prev) = prev_change {
            if prev > 0.0 {
                factors.push(change / prev);
            }
        }
        prev_change = Some(change);
        psi_left = next_left;
        psi_right = next_right;
        last_change = change;
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            last_change,
        });
    }

    // Assemble ascending nodes.
    let mut times = Vec::with_capacity(left_nodes.len() + right_nodes.len());
    let mut states = Vec::with_capacity(times.capacity());
    for j in (1..left_nodes.len()).rev() {
        times.push(left_nodes[j]);
        states.push(psi_left[j].clone());
    }
    times.extend_from_slice(&right_nodes);
    states.extend(psi_right.iter().cloned());
    if right_nodes.is_empty() {
        times.push(s);
        states.push(x.as_slice().to_vec());
    }
    let mut slopes = vec![vec![0.0; n]; times.len()];
    for ((tau, y), d) in times.iter().zip(&states).zip(slopes.iter_mut()) {
        field.eval_into(*tau, y, d)?;
    }
    let segments = (0..times.len() - 1)
        .map(|k| {
            Segment::hermite(
                times[k],
                times[k + 1],
                &states[k],
                &slopes[k],
                &states[k + 1],
                &slopes[k + 1],
            )
        })
        .collect();
    let path = DensePath::from_segments(interval, n, segments, Vec::new());

    let certificate = PicardCertificate {
        delta,
        interval,
        contraction_factors: factors,
        ball_ok: max_ball <= limit,
        max_ball_distance: max_ball,
        iterations,
        source: data.source,
    };
    Ok((path, certificate))
}

/// Sup-norm distance between `path` and the integrator's solution through
/// `(s, x)`, at `samples` uniform times of the path's window. Times before
/// `s` are reached by integrating the time-reversed field.
pub fn reference_distance(
    field: &VectorField,
    path: &DensePath,
    s: f64,
    x: &StateVector,
    samples: usize,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let w = path.window();
    w.check(s)?;
    let n = field.dim();
    let forward = integrate(
        n,
        |tau, y, dy| field.eval_into(tau, y, dy),
        s,
        w.end(),
        x.as_slice(),
        cfg,
    )?
    .dense;
    let reversed = |tau: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        field.eval_into(-tau, y, dy)?;
        dy.iter_mut().for_each(|d| *d = -*d);
        Ok(())
    };
    let backward = integrate(n, reversed, -s, -w.start(), x.as_slice(), cfg)?.dense;
    let mut worst = 0.0_f64;
    for k in 0..=samples.max(1) {
        let tau = w.at(k as f64 / samples.max(1) as f64);
        let reference = if tau >= s {
            forward.evaluate(tau)?
        } else {
            backward.evaluate(-tau)?
        };
        worst = worst.max(path.evaluate(tau)?.dist(&reference));
    }
    Ok(worst)
}

fn sup_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (p, q)| m.max(dist(p, q)))
}

/// One application of the Picard operator on nodes starting at the base point.
fn picard_sweep(field: &VectorField, nodes: &[f64], psi: &[Vec<f64>], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if nodes.len() < 2 {
        return Ok(psi.to_vec());
    }
    let n = x.len();
    let mut g = vec![vec![0.0; n]; nodes.len()];
    for ((tau, y), out) in nodes.iter().zip(psi).zip(g.iter_mut()) {
        field.eval_into(*tau, y, out)?;
    }
    let h = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
    let integral = cumulative_simpson(&g, h);
    Ok(integral
        .into_iter()
        .map(|iv| iv.iter().zip(x).map(|(i, xi)| xi + i).collect())
        .collect())
}

/// Running integrals `int_{node 0}^{node j} g` on a uniform grid with signed
/// spacing `h`: composite Simpson at even nodes, the three-point rule
/// `h/12 (5 g_j + 8 g_{j+1} - g_{j+2})` at odd nodes. Needs >= 3 nodes; two
/// nodes fall back to the trapezoid rule.
pub(crate) fn cumulative_simpson(g: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let m = g.len();
    let n = g.first().map_or(0, Vec::len);
    let mut acc = vec![vec![0.0; n]; m];
    if m < 2 {
        return acc;
    }
    if m == 2 {
        for i in 0..n {
            acc[1][i] = 0.5 * h * (g[0][i] + g[1][i]);
        }
        return acc;
    }
    let mut j = 0;
    while j + 2 < m {
        for i in 0..n {
            acc[j + 1][i] = acc[j][i] + h / 12.0 * (5.0 * g[j][i] + 8.0 * g[j + 1][i] - g[j + 2][i]);
            acc[j + 2][i] = acc[j][i] + h / 3.0 * (g[j][i] + 4.0 * g[j + 1][i] + g[j + 2][i]);
        }
        j += 2;
    }
    if j + 1 < m {
        // odd number of cells: close the last one with the backward rule
        for i in 0..n {
            acc[j + 1][i] = acc[j][i] + h / 12.0 * (-g[j - 1][i] + 8.0 * g[j][i] + 5.0 * g[j + 1][i]);
        }
    }
    acc
}

/// Operator norm induced by the max norm (largest absolute row sum).
pub fn induced_max_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Options for [`linear_volterra_solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolterraOptions {
    /// Grid points per axis of the triangle `{(s, t) : s <= t}`.
    pub points: usize,
    pub max_iters: usize,
    pub exec: Execution,
}

impl Default for VolterraOptions {
    fn default() -> Self {
        Self {
            points: 65,
            max_iters: 500,
            exec: Execution::default(),
        }
    }
}

/// Grid solution of `y(s, t) = phi(s, t) + int_s^t A(s, tau) y(s, tau) dtau`.
///
/// Each slice `s = s_i` is stored on the half-step grid `s_i + k H / 2`,
/// where `H` is the coarse spacing, so every coarse node `t_j` is an even
/// node of the slice and is reached by plain composite Simpson.
#[derive(Debug, Clone)]
pub struct VolterraSolution {
    window: TimeWindow,
    points: usize,
    dim: usize,
    slices: Vec<Vec<Vec<f64>>>,
    iterations: Vec<usize>,
}

impl VolterraSolution {
    pub fn points(&self) -> usize {
        self.points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coarse grid node `i` (both axes share it).
    pub fn node(&self, i: usize) -> f64 {
        self.window.at(i as f64 / (self.points - 1) as f64)
    }

    /// `y(s_i, t_j)` for `i <= j`.
    pub fn value_at(&self, i: usize, j: usize) -> Result<StateVector> {
        if i > j || j >= self.points {
            return Err(Error::InvalidArgument(format!(
                "grid index ({i}, {j}) outside the triangle"
            )));
        }
        StateVector::new(self.slices[i][2 * (j - i)].clone())
    }

    /// Interpolated `y(s, t)`: quadratic in `t` on each Simpson panel of a
    /// slice, linear in `s` between neighbouring slices where both cover `t`.
    pub fn eval(&self, s: f64, t: f64) -> Result<StateVector> {
        self.window.check(s)?;
        self.window.check(t)?;
        if s > t {
            return Err(Error::InvalidArgument(format!("need s <= t, got {s} > {t}")));
        }
        let big_h = self.window.length() / (self.points - 1) as f64;
        if big_h == 0.0 {
            return self.value_at(0, 0);
        }
        let pos = ((s - self.window.start()) / big_h).clamp(0.0, (self.points - 1) as f64);
        let i = (pos.floor() as usize).min(self.points - 1);
        let frac = pos - i as f64;
        let lower = self.slice_eval(i, t);
        if frac == 0.0 || i + 1 >= self.points || t < self.node(i + 1) {
            return StateVector::new(lower);
        }
        let upper = self.slice_eval(i + 1, t);
        StateVector::new(lower.iter().zip(&upper).map(|(a, b)| a + frac * (b - a)).collect())
    }

    fn slice_eval(&self, i: usize, t: f64) -> Vec<f64> {
        let slice = &self.slices[i];
        if slice.len() == 1 {
            return slice[0].clone();
        }
        let s_i = self.node(i);
        let end = self.window.end();
        let cells = slice.len() - 1;
        let h = (end - s_i) / cells as f64;
        let u = ((t - s_i) / h).clamp(0.0, cells as f64);
        // Simpson panel [2p, 2p + 2]
        let p = ((u / 2.0).floor() as usize).min(cells / 2 - 1);
        let r = u - 2.0 * p as f64;
        let (y0, y1, y2) = (&slice[2 * p], &slice[2 * p + 1], &slice[2 * p + 2]);
        let l0 = 0.5 * (r - 1.0) * (r - 2.0);
        let l1 = -r * (r - 2.0);
        let l2 = 0.5 * r * (r - 1.0);
        (0..self.dim).map(|d| l0 * y0[d] + l1 * y1[d] + l2 * y2[d]).collect()
    }

    /// Sup norm over every stored node.
    pub fn sup_norm(&self) -> f64 {
        self.slices.iter().flatten().fold(0.0_f64, |m, y| m.max(max_norm(y)))
    }

    /// Iterations used per slice.
    pub fn iterations(&self) -> &[usize] {
        &self.iterations
    }

    pub fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }
}

enum Stop {
    Tolerance(f64),
    Count(usize),
}

/// Successive approximation `y_{k+1} = phi + int A y_k` from `y_0 = phi`,
/// per `s`-slice, until the sup change of a slice is at most `tol`.
///
/// Slices are independent and run through `opts.exec`.
pub fn linear_volterra_solve<A, P>(
    a: A,
    phi: P,
    window: TimeWindow,
    tol: f64,
    opts: &VolterraOptions,
) -> Result<VolterraSolution>
where
    A: Fn(f64, f64) -> DMatrix<f64> + Sync + Send,
    P: Fn(f64, f64) -> StateVector + Sync + Send,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    volterra(a, phi, window, Stop::Tolerance(tol), opts)
}

/// Exactly `iterations` successive approximations (the `iterations`-th Picard
/// iterate), without a convergence test.
pub fn linear_volterra_iterate<A, P>(
    a: A,
    phi: P,
    window: TimeWindow,
    iterations: usize,
    opts: &VolterraOptions,
) -> Result<VolterraSolution>
where
    A: Fn(f64, f64) -> DMatrix<f64> + Sync + Send,
    P: Fn(f64, f64) -> StateVector + Sync + Send,
{
    volterra(a, phi, window, Stop::Count(iterations), opts)
}

fn volterra<A, P>(a: A, phi: P, window: TimeWindow, stop: Stop, opts: &VolterraOptions) -> Result<VolterraSolution>
where
    A: Fn(f64, f64) -> DMatrix<f64> + Sync + Send,
    P: Fn(f64, f64) -> StateVector + Sync + Send,
{
    if opts.points < 2 {
        return Err(Error::InvalidArgument(
            "Volterra grid needs >= 2 points per axis".into(),
        ));
    }
    let points = opts.points;
    let dim = phi(window.start(), window.start()).dim();
    let node = |i: usize| window.at(i as f64 / (points - 1) as f64);

    let solve_slice = |i: usize| -> Result<(Vec<Vec<f64>>, usize)> {
        let s_i = node(i);
        let cells = 2 * (points - 1 - i);
        if cells == 0 {
            let y = phi(s_i, s_i);
            y.expect_dim(dim)?;
            return Ok((vec![y.into_vec()], 0));
        }
        let taus: Vec<f64> = (0..=cells)
            .map(|k| lerp(s_i, window.end(), k as f64 / cells as f64))
            .collect();
        let h = (window.end() - s_i) / cells as f64;
        let mats: Vec<DMatrix<f64>> = taus.iter().map(|&tau| a(s_i, tau)).collect();
        let base: Vec<Vec<f64>> = taus
            .iter()
            .map(|&tau| {
                let y = phi(s_i, tau);
                y.expect_dim(dim).map(|_| y.into_vec())
            })
            .collect::<Result<_>>()?;
        for m in &mats {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.nrows(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("Volterra kernel"));
            }
        }
        let mut y = base.clone();
        let mut g = vec![vec![0.0; dim]; taus.len()];
        let mut iters = 0;
        loop {
            match stop {
                Stop::Count(c) if iters >= c => break,
                Stop::Tolerance(_) if iters >= opts.max_iters => {
                    return Err(Error::NonConvergence {
                        iterations: iters,
                        last_change: f64::NAN,
                    });
                }
                _ => {}
            }
            for ((m, yk), gk) in mats.iter().zip(&y).zip(g.iter_mut()) {
                for r in 0..dim {
                    gk[r] = (0..dim).map(|c| m[(r, c)] * yk[c]).sum();
                }
            }
            let integral = cumulative_simpson(&g, h);
            let next: Vec<Vec<f64>> = base
                .iter()
                .zip(&integral)
                .map(|(b, iv)| b.iter().zip(iv).map(|(p, q)| p + q).collect())
                .collect();
            let change = sup_dist(&next, &y);
            y = next;
            iters += 1;
            if !change.is_finite() {
                return Err(Error::NonFinite("Volterra iterate"));
            }
            if let Stop::Tolerance(tol) = stop {
                if change <= tol {
                    break;
                }
            }
        }
        Ok((y, iters))
    };

    let results = exec::map_range(opts.exec, points, solve_slice);
    let mut slices = Vec::with_capacity(points);
    let mut iterations = Vec::with_capacity(points);
    for r in results {
        let (y, it) = r?;
        slices.push(y);
        iterations.push(it);
    }
    Ok(VolterraSolution {
        window,
        points,
        dim,
        slices,
        iterations,
    })
}

/// `sup_phi * exp(sup_a * horizon)`, the a-priori bound on solutions of the
/// linear Volterra equation.
pub fn gronwall_bound(sup_phi: f64, sup_a: f64, horizon: f64) -> f64 {
    sup_phi * (sup_a * horizon).exp()
}

/// Smallest `n` with `(a T)^n / n! * e^{a T} * c <= tol`: an upper bound on
/// the successive approximations needed for accuracy `tol` when the first
/// correction is bounded by `c`.
pub fn series_iteration_bound(sup_a: f64, horizon: f64, c: f64, tol: f64) -> usize {
    let at = sup_a * horizon;
    let growth = at.exp() * c;
    let mut term = 1.0;
    let mut n = 0usize;
    while term * growth > tol && n < 10_000 {
        n += 1;
        term *= at / n as f64;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(x: &[f64]) -> StateVector {
        StateVector::from_slice(x).unwrap()
    }

    fn data(l: f64, m: f64, eps: f64, h: f64) -> LipschitzData {
        LipschitzData::new(l, m, 1.0, eps, h, sv(&[0.0]), 0.0, ConstantSource::Analytic).unwrap()
    }

    fn linear(a: f64) -> VectorField {
        VectorField::new(1, move |_, x, out| out[0] = a * x[0])
    }

    #[test]
    fn certified_radius_examples() {
        assert_eq!(certified_radius(&data(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(certified_radius(&data(1.0, 3.0, 2.0, 5.0)), 0.2);
        assert_eq!(certified_radius(&data(100.0, 0.1, 10.0, 0.05)), 1.0 / 401.0);
    }

    #[test]
    fn invalid_ball_data_rejected() {
        assert!(LipschitzData::new(-1.0, 0.0, 1.0, 1.0, 1.0, sv(&[0.0]), 0.0, ConstantSource::Analytic).is_err());
        assert!(LipschitzData::new(1.0, 0.0, 0.0, 1.0, 1.0, sv(&[0.0]), 0.0, ConstantSource::Analytic).is_err());
    }

    proptest! {
        #[test]
        fn certified_radius_is_monotone(l in 0.0..50.0f64, m in 0.0..50.0f64, eps in 0.01..10.0f64,
                                        h in 0.01..10.0f64, bump in 0.0..5.0f64) {
            let base = certified_radius(&data(l, m, eps, h));
            prop_assert!(base <= h);
            prop_assert!(certified_radius(&data(l + bump, m, eps, h)) <= base);
            prop_assert!(certified_radius(&data(l, m + bump, eps, h)) <= base);
            prop_assert!(certified_radius(&data(l, m, eps + bump, h)) >= base);
            prop_assert!(certified_radius(&data(l, m, eps, h + bump)) >= base);
        }
    }

    #[test]
    fn estimates_on_scalar_fields() {
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let zero = VectorField::new(1, |_, _, out| out[0] = 0.0);
        let e = estimate_l_m(&zero, w, &sv(&[0.0]), 1.0, &SamplingGrid::default()).unwrap();
        assert_eq!((e.l_est, e.m_est), (0.0, 0.0));

        let e = estimate_l_m(&linear(2.0), w, &sv(&[0.0]), 1.0, &SamplingGrid::default()).unwrap();
        assert!((e.l_est - 2.0).abs() < 1e-12 && (e.m_est - 2.0).abs() < 1e-12);
        assert_eq!(e.l_inflated(), 2.5);

        let cubic = VectorField::new(1, |_, x, out| out[0] = -x[0].powi(3));
        let coarse = estimate_l_m(
            &cubic,
            w,
            &sv(&[0.0]),
            1.0,
            &SamplingGrid {
                state_samples: 21,
                ..Default::default()
            },
        )
        .unwrap();
        let fine = estimate_l_m(
            &cubic,
            w,
            &sv(&[0.0]),
            1.0,
            &SamplingGrid {
                state_samples: 401,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(coarse.l_est <= fine.l_est && fine.l_est <= 3.0);
        assert!((fine.l_est - 3.0).abs() < 2e-2);
        assert!((fine.m_est - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_reports_nonfinite_field() {
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let recip = VectorField::new(1, |_, x, out| out[0] = 1.0 / x[0]);
        let err = estimate_l_m(
            &recip,
            w,
            &sv(&[0.0]),
            1.0,
            &SamplingGrid {
                state_samples: 3,
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn picard_constant_field_converges_in_two_sweeps() {
        let c = VectorField::new(1, |_, _, out| out[0] = 0.7);
        let d = LipschitzData::new(0.0, 0.7, 1.0, 1.0, 1.0, sv(&[0.0]), 0.0, ConstantSource::Analytic).unwrap();
        let delta = certified_radius(&d);
        let (path, cert) = picard_solve(&c, &d, None, 0.0, &sv(&[0.2]), delta, &PicardOptions::default()).unwrap();
        assert_eq!(cert.iterations, 2);
        assert_eq!(cert.contraction_factors, vec![0.0]);
        for k in 0..=10 {
            let t = -delta + 2.0 * delta * k as f64 / 10.0;
            assert!((path.evaluate(t).unwrap()[0] - (0.2 + 0.7 * t)).abs() < 1e-14);
        }
    }

    #[test]
    fn picard_zero_field_single_iteration() {
        let z = VectorField::new(1, |_, _, out| out[0] = 0.0);
        let d = LipschitzData::new(0.0, 0.0, 1.0, 1.0, 1.0, sv(&[0.0]), 0.0, ConstantSource::Analytic).unwrap();
        let (path, cert) = picard_solve(&z, &d, None, 0.0, &sv(&[0.5]), 1.0, &PicardOptions::default()).unwrap();
        assert_eq!(cert.iterations, 1);
        assert_eq!(cert.max_contraction(), 0.0);
        assert!(cert.accepted());
        assert_eq!(path.evaluate(0.9).unwrap()[0], 0.5);
    }

    #[test]
    fn picard_linear_growth_matches_exponential() {
        // f = x, ball around 1 of radius 0.5 + 0.5: L = 1, M = 2, inflated by 1.25
        let d = LipschitzData::new(1.25, 2.5, 0.5, 0.5, 1.0, sv(&[1.0]), 0.0, ConstantSource::Analytic).unwrap();
        let delta = certified_radius(&d);
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let (path, cert) = picard_solve(
            &linear(1.0),
            &d,
            Some(w),
            0.0,
            &sv(&[1.0]),
            delta,
            &PicardOptions::default(),
        )
        .unwrap();
        assert!(cert.accepted(), "{cert:?}");
        assert_eq!(cert.interval, TimeWindow::new(0.0, delta).unwrap());
        for k in 0..=100 {
            let t = delta * k as f64 / 100.0;
            assert!((path.evaluate(t).unwrap()[0] - t.exp()).abs() <= 1e-8);
        }
    }

    #[test]
    fn picard_two_sided_interval() {
        let d = LipschitzData::new(1.0, 2.0, 0.5, 0.5, 1.0, sv(&[1.0]), 0.0, ConstantSource::Analytic).unwrap();
        let delta = certified_radius(&d);
        let s = 0.3 * delta;
        let (path, cert) =
            picard_solve(&linear(1.0), &d, None, s, &sv(&[1.0]), delta, &PicardOptions::default()).unwrap();
        assert!(cert.accepted());
        for k in 0..=50 {
            let t = -delta + 2.0 * delta * k as f64 / 50.0;
            assert!((path.evaluate(t).unwrap()[0] - (t - s).exp()).abs() <= 1e-10);
        }
        let cfg = IntegratorConfig::with_tol(1e-12, 1e-12).unwrap();
        let gap = reference_distance(&linear(1.0), &path, s, &sv(&[1.0]), 64, &cfg).unwrap();
        assert!(gap <= 1e-10, "{gap}");
    }

    #[test]
    fn picard_flags_ball_violation() {
        // claim a tiny M so delta is too long for the true dynamics
        let d = LipschitzData::new(0.0, 0.0, 0.1, 0.01, 1.0, sv(&[1.0]), 0.0, ConstantSource::Analytic).unwrap();
        let (_, cert) = picard_solve(
            &linear(1.0),
            &d,
            None,
            0.0,
            &sv(&[1.0]),
            1.0,
            &PicardOptions {
                max_iters: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!cert.ball_ok);
        assert!(!cert.accepted());
    }

    #[test]
    fn picard_rejects_point_outside_ball() {
        let d = LipschitzData::new(1.0, 1.0, 0.5, 0.5, 1.0, sv(&[0.0]), 0.0, ConstantSource::Analytic).unwrap();
        assert!(picard_solve(&linear(1.0), &d, None, 0.0, &sv(&[0.9]), 0.1, &PicardOptions::default()).is_err());
    }

    #[test]
    fn cumulative_rule_is_exact_for_quadratics() {
        let h = 0.1;
        let g: Vec<Vec<f64>> = (0..8).map(|j| vec![(j as f64 * h).powi(2)]).collect();
        let acc = cumulative_simpson(&g, h);
        for (j, a) in acc.iter().enumerate() {
            let t = j as f64 * h;
            assert!((a[0] - t.powi(3) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn volterra_zero_kernel_returns_phi() {
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let sol = linear_volterra_solve(
            |_, _| DMatrix::zeros(1, 1),
            |s, t| sv(&[(s - 2.0 * t).sin()]),
            w,
            1e-12,
            &VolterraOptions::default(),
        )
        .unwrap();
        for i in 0..65 {
            for j in i..65 {
                let (s, t) = (sol.node(i), sol.node(j));
                assert_eq!(sol.value_at(i, j).unwrap()[0], (s - 2.0 * t).sin());
            }
        }
    }

    #[test]
    fn volterra_constant_kernel_is_exponential() {
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        for a in [-1.5, 0.5, 1.0] {
            let tol = 1e-8;
            let sol = linear_volterra_solve(
                move |_, _| DMatrix::from_element(1, 1, a),
                |_, _| sv(&[1.0]),
                w,
                tol,
                &VolterraOptions::default(),
            )
            .unwrap();
            for i in 0..65 {
                for j in i..65 {
                    let exact = (a * (sol.node(j) - sol.node(i))).exp();
                    assert!((sol.value_at(i, j).unwrap()[0] - exact).abs() <= tol);
                }
            }
            let bound = series_iteration_bound(a.abs(), 1.0, a.abs(), tol);
            assert!(
                sol.max_iterations() <= bound + 1,
                "{} > {}",
                sol.max_iterations(),
                bound
            );
            let mid = sol.eval(0.31, 0.77).unwrap()[0];
            assert!((mid - (a * 0.46f64).exp()).abs() < 1e-4);
        }
    }

    #[test]
    fn volterra_iterates_are_partial_sums() {
        let w = TimeWindow::new(0.0, 1.0).unwrap();
        let a = 0.8;
        for n in 0..6 {
            let sol = linear_volterra_iterate(
                move |_, _| DMatrix::from_element(1, 1, a),
                |_, _| sv(&[1.0]),
                w,
                n,
                &VolterraOptions::default(),
            )
            .unwrap();
            for i in (0..65).step_by(8) {
                for j in (i..65).step_by(4) {
                    let x = a * (sol.node(j) - sol.node(i));
                    let mut term = 1.0;
                    let mut partial = 1.0;
                    for k in 1..=n {
                        term *= x / k as f64;
                        partial += term;
                    }
                    let err = (sol.value_at(i, j).unwrap()[0] - partial).abs();
                    // exact through n = 3 (Simpson integrates cubics); O(h^4) beyond
                    assert!(err < if n <= 3 { 1e-13 } else { 1e-10 }, "n={n}: {err:e}");
                }
            }
        }
    }

    #[test]
    fn gronwall_examples() {
        assert_eq!(gronwall_bound(1.0, 0.0, 17.0), 1.0);
        assert!((gronwall_bound(2.0, 1.0, 1.0) - 5.43656365691809).abs() < 1e-12);
        assert_eq!(gronwall_bound(0.0, 3.0, 2.0), 0.0);
    }

    #[test]
    fn induced_norm_is_row_sum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.5]);
        assert_eq!(induced_max_norm(&m), 3.0);
    }
}
