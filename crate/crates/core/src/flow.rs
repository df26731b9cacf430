//! Flow map `X_{s,t}^x` via an embedded Dormand–Prince 5(4) pair with PI step
//! control and its fourth-order continuous extension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{DensePath, Segment};
use crate::types::{lerp, max_norm, StateVector, TimeWindow, VectorField};

/// Tolerances and limits for [`evolve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
    /// Initial step hint; `None` selects one automatically.
    pub initial_step: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_steps: 200_000,
            initial_step: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tol(abs_tol: f64, rel_tol: f64) -> Result<Self> {
        let cfg = Self {
            abs_tol,
            rel_tol,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (1e-14..=1e-2).contains(&v);
        if !in_range(self.abs_tol) || !in_range(self.rel_tol) {
            return Err(Error::InvalidArgument(format!(
                "tolerances must lie in [1e-14, 1e-2], got abs {} rel {}",
                self.abs_tol, self.rel_tol
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "initial step must be positive, got {h}"
                )));
            }
        }
        Ok(())
    }

    /// `abs_tol + rel_tol * scale`
    pub fn tolerance_at(&self, scale: f64) -> f64 {
        self.abs_tol + self.rel_tol * scale
    }
}

/// Approximation of `X_{s,t}^x` together with its dense output.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub value: StateVector,
    pub dense: DensePath,
    pub steps_taken: usize,
    pub rejected_steps: usize,
    /// Sum of the absolute local error estimates of the accepted steps.
    pub est_error: f64,
}

/// Integrates `x' = f(t, x)` from `(s, x)` to time `t >= s`.
pub fn evolve(field: &VectorField, s: f64, t: f64, x: &StateVector, cfg: &IntegratorConfig) -> Result<FlowResult> {
    x.expect_dim(field.dim())?;
    let out = integrate(
        field.dim(),
        |tau, y, dy| field.eval_into(tau, y, dy),
        s,
        t,
        x.as_slice(),
        cfg,
    )?;
    Ok(FlowResult {
        value: StateVector::from_vec_unchecked(out.end),
        dense: out.dense,
        steps_taken: out.accepted,
        rejected_steps: out.rejected,
        est_error: out.est_error,
    })
}

/// `|X_{t2,t3}(X_{t1,t2} x) - X_{t1,t3} x|` in the max norm.
pub fn flow_compose_residual(
    field: &VectorField,
    x: &StateVector,
    t1: f64,
    t2: f64,
    t3: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    if !(t1 <= t2 && t2 <= t3) {
        return Err(Error::InvalidArgument(format!(
            "composition times must be ordered, got {t1}, {t2}, {t3}"
        )));
    }
    let mid = evolve(field, t1, t2, x, cfg)?.value;
    let two_legs = evolve(field, t2, t3, &mid, cfg)?.value;
    let direct = evolve(field, t1, t3, x, cfg)?.value;
    Ok(two_legs.dist(&direct))
}

/// Continuity modulus of the flow: `(dx + M ds) e^{L horizon} + M dt`.
///
/// Bounds `|X_{s,t}^x - X_{u,tau}^y|` when `dx = |x - y|`, `ds = |s - u|`,
/// `dt = |t - tau|` and `L`, `M` are the Lipschitz constant and sup of `|f|`
/// on a ball containing both trajectories.
pub fn continuity_modulus_bound(l: f64, m: f64, dx: f64, ds: f64, dt: f64, horizon: f64) -> f64 {
    (dx + m * ds) * (l * horizon).exp() + m * dt
}

// Dormand–Prince 5(4) coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// PI controller
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const EXPO: f64 = 0.2 - 0.75 * BETA;

pub(crate) struct Integration {
    pub end: Vec<f64>,
    pub dense: DensePath,
    pub accepted: usize,
    pub rejected: usize,
    pub est_error: f64,
}

/// Core stepping loop shared by [`evolve`] and the augmented sensitivity
/// system. `rhs` reports non-finite evaluations as errors; inside a trial step
/// those are treated as a rejection.
pub(crate) fn integrate<F>(n: usize, rhs: F, s: f64, t: f64, x: &[f64], cfg: &IntegratorConfig) -> Result<Integration>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    if !s.is_finite() || !t.is_finite() {
        return Err(Error::NonFinite("integration endpoints"));
    }
    if s > t {
        return Err(Error::InvalidArgument(format!(
            "integration requires s <= t, got {s} > {t}"
        )));
    }
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    let window = TimeWindow::new(s, t)?;
    if s == t {
        let x0 = StateVector::from_slice(x)?;
        return Ok(Integration {
            end: x.to_vec(),
            dense: DensePath::constant(window, &x0),
            accepted: 0,
            rejected: 0,
            est_error: 0.0,
        });
    }

    let span = t - s;
    let h_min = 1e-13 * span;
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut y = x.to_vec();
    let mut y_new = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut err = vec![0.0; n];

    rhs(s, &y, &mut k[0])?;
    let mut h = match cfg.initial_step {
        Some(h0) => h0.min(span),
        None => initial_step(&rhs, s, &y, &k[0], span, cfg, &mut stage, &mut err),
    };

    let mut t_cur = s;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut est_error = 0.0;
    let mut fac_old = 1e-4_f64;
    let mut last_rejected = false;
    let mut segments = Vec::new();
    let mut nodes = Vec::new();

    loop {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                t: t_cur,
            });
        }
        if h < h_min {
            return Err(Error::BlowupSuspected { t: t_cur, step: h });
        }
        // Snap the step end to the grid s + theta (t - s).
        let theta_new = (t_cur + h - s) / span;
        let last = theta_new >= 1.0 - 1e-12;
        let t_new = if last { t } else { lerp(s, t, theta_new) };
        let h_step = t_new - t_cur;

        let trial = dopri_step(&rhs, t_cur, h_step, &y, &mut k, &mut stage, &mut y_new, &mut err);
        let ratio = match trial {
            Ok(()) => scaled_error(&err, &y, &y_new, cfg),
            Err(Error::NonFinite(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };

        if ratio <= 1.0 {
            let segment = dense_segment(t_cur, t_new, h_step, &y, &y_new, &k);
            // k[6] = f(t_new, y_new) was computed in the step.
            est_error += max_norm(&err);
            accepted += 1;
            segments.push(segment);
            if !last {
                nodes.push(t_new);
            }
            let fac11 = ratio.powf(EXPO);
            let mut fac = fac11 / fac_old.powf(BETA);
            fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_next = h_step / fac;
            if last_rejected {
                h_next = h_next.min(h_step);
            }
            fac_old = ratio.max(1e-4);
            last_rejected = false;
            y.copy_from_slice(&y_new);
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
            t_cur = t_new;
            if last {
                break;
            }
            h = h_next;
        } else {
            rejected += 1;
            last_rejected = true;
            h = if ratio.is_finite() {
                h_step / (1.0 / FAC_MIN).min(ratio.powf(EXPO) / SAFETY)
            } else {
                h_step * FAC_MIN
            };
        }
    }

    Ok(Integration {
        end: y,
        dense: DensePath::from_segments(window, n, segments, nodes),
        accepted,
        rejected,
        est_error,
    })
}

#[allow(clippy::too_many_arguments)]
fn dopri_step<F>(
    rhs: &F,
    t: f64,
    h: f64,
    y: &[f64],
    k: &mut [Vec<f64>; 7],
    stage: &mut [f64],
    y_new: &mut [f64],
    err: &mut [f64],
) -> Result<()>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len();
    for i in 0..n {
        stage[i] = y[i] + h * A21 * k[0][i];
    }
    rhs(t + C2 * h, stage, &mut k[1])?;
    for i in 0..n {
        stage[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
    }
    rhs(t + C3 * h, stage, &mut k[2])?;
    for i in 0..n {
        stage[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
    }
    rhs(t + C4 * h, stage, &mut k[3])?;
    for i in 0..n {
        stage[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
    }
    rhs(t + C5 * h, stage, &mut k[4])?;
    for i in 0..n {
        stage[i] = y[i] + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
    }
    rhs(t + h, stage, &mut k[5])?;
    for i in 0..n {
        y_new[i] = y[i] + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
    }
    if y_new.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trial state"));
    }
    rhs(t + h, y_new, &mut k[6])?;
    for i in 0..n {
        err[i] = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
    }
    Ok(())
}

fn scaled_error(err: &[f64], y: &[f64], y_new: &[f64], cfg: &IntegratorConfig) -> f64 {
    err.iter().zip(y.iter().zip(y_new)).fold(0.0_f64, |m, (e, (a, b))| {
        m.max(e.abs() / cfg.tolerance_at(a.abs().max(b.abs())))
    })
}

/// Power-basis form of the Dormand–Prince continuous extension
/// `y0 + th r2 + th(1-th) r3 + th²(1-th) r4 + th²(1-th)² r5`.
fn dense_segment(t0: f64, t1: f64, h: f64, y: &[f64], y_new: &[f64], k: &[Vec<f64>; 7]) -> Segment {
    let n = y.len();
    let mut coeffs = vec![0.0; 5 * n];
    for i in 0..n {
        let r2 = y_new[i] - y[i];
        let r3 = h * k[0][i] - r2;
        let r4 = r2 - h * k[6][i] - r3;
        let r5 = h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
        coeffs[i] = y[i];
        coeffs[n + i] = r2 + r3;
        coeffs[2 * n + i] = -r3 + r4 + r5;
        coeffs[3 * n + i] = -r4 - 2.0 * r5;
        coeffs[4 * n + i] = r5;
    }
    Segment::new(t0, t1, coeffs, y_new.to_vec())
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    rhs: &F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    cfg: &IntegratorConfig,
    y1: &mut [f64],
    f1: &mut [f64],
) -> f64
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let scale = |i: usize| cfg.tolerance_at(y0[i].abs());
    let n = y0.len();
    let dnf = (0..n).fold(0.0_f64, |m, i| m.max((f0[i] / scale(i)).abs()));
    let dny = (0..n).fold(0.0_f64, |m, i| m.max((y0[i] / scale(i)).abs()));
    let mut h = if dnf <= 1e-5 || dny <= 1e-5 {
        1e-6
    } else {
        0.01 * dny / dnf
    };
    h = h.min(span);
    for i in 0..n {
        y1[i] = y0[i] + h * f0[i];
    }
    let der2 = match rhs(t0 + h, y1, f1) {
        Ok(()) => (0..n).fold(0.0_f64, |m, i| m.max(((f1[i] - f0[i]) / scale(i)).abs())) / h,
        Err(_) => return (h * 1e-3).max(1e-13 * span * 10.0),
    };
    let der12 = der2.max(dnf);
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(0.2)
    };
    (100.0 * h).min(h1).min(span)
}
