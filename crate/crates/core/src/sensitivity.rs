//! Derivatives of the flow with respect to the initial value, the initial
//! time and the current time.
//!
//! Directional derivatives `(dX_{s,t}^x/dx) v` come from the variational
//! equation `w' = f_x(tau, X_{s,tau}^x) w`, `w(s) = v`, integrated together
//! with the state as one system of dimension `2n`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::flow::{evolve, integrate, IntegratorConfig};
use crate::path::DensePath;
use crate::quadrature::{self, QuadSpec};
use crate::types::{StateVector, VectorField};

/// `(dX_{s,t}^x/dx) v` and the variational trajectory `w` on `[s, t]`.
#[derive(Debug, Clone)]
pub struct SensitivityResult {
    pub jvp_value: StateVector,
    pub path: DensePath,
    pub est_error: f64,
}

/// Forward sensitivity of the flow in direction `v`.
pub fn flow_jvp(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    v: &StateVector,
    cfg: &IntegratorConfig,
) -> Result<SensitivityResult> {
    let n = field.dim();
    x.expect_dim(n)?;
    v.expect_dim(n)?;
    let mut z0 = Vec::with_capacity(2 * n);
    z0.extend_from_slice(x.as_slice());
    z0.extend_from_slice(v.as_slice());

    let rhs = |tau: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        let (state, w) = z.split_at(n);
        let (dstate, dw) = dz.split_at_mut(n);
        field.eval_into(tau, state, dstate)?;
        let mut scratch = [0.0; 48];
        if 3 * n <= scratch.len() {
            field.jvp_into(tau, state, w, dw, &mut scratch[..3 * n])
        } else {
            let mut scratch = vec![0.0; 3 * n];
            field.jvp_into(tau, state, w, dw, &mut scratch)
        }
    };
    let out = integrate(2 * n, rhs, s, t, &z0, cfg)?;
    Ok(SensitivityResult {
        jvp_value: StateVector::new(out.end[n..].to_vec())?,
        path: out.dense.project(n..2 * n)?,
        est_error: out.est_error,
    })
}

/// Full Jacobian `dX_{s,t}^x/dx` from `n` unit-direction sensitivities.
pub fn flow_jacobian(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let n = field.dim();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = flow_jvp(field, s, t, x, &StateVector::new(e)?, cfg)?.jvp_value;
        for i in 0..n {
            jac[(i, j)] = col[i];
        }
    }
    Ok(jac)
}

/// `|w(t) - v - int_s^t f_x(tau, X(tau)) w(tau) dtau|`.
///
/// `X` comes from a separate [`evolve`] call and is read from its dense
/// output; `w` from `result.path`. The integral uses adaptive panel
/// quadrature at `quad.abs_tol`.
pub fn variational_residual(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    v: &StateVector,
    result: &SensitivityResult,
    cfg: &IntegratorConfig,
    quad: &QuadSpec,
) -> Result<f64> {
    let integral = transported_integral(field, s, t, x, &result.path, cfg, quad)?;
    let mut worst = 0.0_f64;
    for i in 0..field.dim() {
        worst = worst.max((result.jvp_value[i] - v[i] - integral[i]).abs());
    }
    Ok(worst)
}

/// `int_s^t f_x(tau, X_{s,tau}^x) w(tau) dtau` with `X` read from dense output.
fn transported_integral(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    w: &DensePath,
    cfg: &IntegratorConfig,
    quad: &QuadSpec,
) -> Result<Vec<f64>> {
    let n = field.dim();
    let state = evolve(field, s, t, x, cfg)?.dense;
    let integrand = |tau: f64| -> Result<Vec<f64>> {
        let mut xs = vec![0.0; n];
        let mut ws = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut scratch = vec![0.0; 3 * n];
        state.evaluate_into(tau, &mut xs)?;
        w.evaluate_into(tau, &mut ws)?;
        field.jvp_into(tau, &xs, &ws, &mut out, &mut scratch)?;
        Ok(out)
    };
    Ok(quadrature::integrate(integrand, n, s, t, &[], quad)?.total)
}

/// `d/ds X_{s,t}^x = -(dX_{s,t}^x/dx) f(s, x)`.
pub fn d_initial_time(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    let fx = field.eval(s, x)?;
    Ok(flow_jvp(field, s, t, x, &fx, cfg)?.jvp_value.scale(-1.0))
}

/// `d/dt X_{s,t}^x = f(t, X_{s,t}^x)`.
pub fn d_current_time(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    let end = evolve(field, s, t, x, cfg)?.value;
    field.eval(t, &end)
}

/// Residual of the integral equation satisfied by the initial-time derivative,
/// `u(t) = -f(s, x) + int_s^t f_x(tau, X_{s,tau}^x) u(tau) dtau`, where
/// `u(tau) = d/ds X_{s,tau}^x` is supplied along the path as
/// `-(dX_{s,tau}^x/dx) f(s, x)`.
pub fn d_initial_time_volterra_check(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    cfg: &IntegratorConfig,
    quad: &QuadSpec,
) -> Result<f64> {
    let n = field.dim();
    let fx = field.eval(s, x)?;
    let sens = flow_jvp(field, s, t, x, &fx, cfg)?;
    let lhs = sens.jvp_value.scale(-1.0);
    // the path of u is -w; linearity lets us integrate w and negate
    let integral = transported_integral(field, s, t, x, &sens.path, cfg, quad)?;
    let mut worst = 0.0_f64;
    for i in 0..n {
        let rhs = -fx[i] - integral[i];
        worst = worst.max((lhs[i] - rhs).abs());
    }
    Ok(worst)
}

/// Central difference of the flow in the initial value, step `h` along `v`.
pub fn fd_flow_jvp(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    v: &StateVector,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "difference step must be positive, got {h}"
        )));
    }
    let plus = evolve(field, s, t, &x.axpy(h, v), cfg)?.value;
    let minus = evolve(field, s, t, &x.axpy(-h, v), cfg)?.value;
    Ok(plus.sub(&minus).scale(0.5 / h))
}

/// Central difference of the flow in the initial time.
pub fn fd_initial_time(
    field: &VectorField,
    s: f64,
    t: f64,
    x: &StateVector,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    if !(h > 0.0) || s + h > t {
        return Err(Error::InvalidArgument(format!(
            "difference step {h} does not fit in [{s}, {t}]"
        )));
    }
    let later = evolve(field, s + h, t, x, cfg)?.value;
    let earlier = evolve(field, s - h, t, x, cfg)?.value;
    Ok(later.sub(&earlier).scale(0.5 / h))
}
