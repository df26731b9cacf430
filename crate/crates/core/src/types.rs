//! Problem data: time windows, states, norms and vector fields.

use std::fmt;
use std::ops::Index;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed time interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    start: f64,
    end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::NonFinite("time window"));
        }
        if start > end {
            return Err(Error::InvalidArgument(format!(
                "window start {start} exceeds end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    /// `start + theta * (end - start)`; bit-exact at `theta = 0` and `theta = 1`.
    pub fn at(&self, theta: f64) -> f64 {
        lerp(self.start, self.end, theta)
    }

    pub(crate) fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutsideWindow {
                t,
                start: self.start,
                end: self.end,
            })
        }
    }
}

/// `a + theta * (b - a)` with exact endpoints.
pub(crate) fn lerp(a: f64, b: f64, theta: f64) -> f64 {
    if theta == 1.0 {
        b
    } else {
        a + theta * (b - a)
    }
}

/// Finite state vector of fixed dimension `n >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("state dimension must be >= 1".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        Ok(Self(coords))
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        Self::new(coords.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    /// Wraps values that are already known to be finite.
    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|c| c.is_finite()));
        Self(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        max_norm(&self.0)
    }

    pub fn sub(&self, other: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, alpha: f64) -> StateVector {
        StateVector(self.0.iter().map(|a| alpha * a).collect())
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&other.0).map(|(a, b)| a + alpha * b).collect())
    }

    /// Max-norm distance.
    pub fn dist(&self, other: &StateVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim() == dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: dim,
                found: self.dim(),
            })
        }
    }
}

impl Index<usize> for StateVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

impl<'de> Deserialize<'de> for StateVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let coords = Vec::<f64>::deserialize(d)?;
        StateVector::new(coords).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn max_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
}

/// Norm used for reporting and tolerance checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormSpec {
    #[default]
    Max,
    Euclidean,
    WeightedEuclidean {
        weights: Vec<f64>,
    },
}

impl NormSpec {
    pub fn weighted(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(
                "norm weights must be finite and strictly positive".into(),
            ));
        }
        Ok(NormSpec::WeightedEuclidean { weights })
    }

    pub fn norm(&self, x: &[f64]) -> Result<f64> {
        match self {
            NormSpec::Max => Ok(max_norm(x)),
            NormSpec::Euclidean => Ok(x.iter().map(|c| c * c).sum::<f64>().sqrt()),
            NormSpec::WeightedEuclidean { weights } => {
                if weights.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: weights.len(),
                        found: x.len(),
                    });
                }
                Ok(x.iter().zip(weights).map(|(c, w)| w * c * c).sum::<f64>().sqrt())
            }
        }
    }
}

/// Declared regularity of a vector field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    Continuous,
    ContinuouslyDifferentiableInState,
}

type EvalFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type JvpFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Time-dependent right-hand side `f(t, x)` with an optional Jacobian action
/// `v -> (df/dx)(t, x) v`.
///
/// Closures write into the provided output slice. Fields without an analytic
/// Jacobian action fall back to a central difference whenever a solver needs
/// one.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: Arc<EvalFn>,
    jvp: Option<Arc<JvpFn>>,
    smoothness: Smoothness,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("has_jvp", &self.jvp.is_some())
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dim >= 1, "vector field dimension must be >= 1");
        Self {
            dim,
            eval: Arc::new(eval),
            jvp: None,
            smoothness: Smoothness::Continuous,
        }
    }

    /// Attaches an analytic Jacobian action and marks the field C¹ in x.
    pub fn with_jvp<J>(mut self, jvp: J) -> Self
    where
        J: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.jvp = Some(Arc::new(jvp));
        self.smoothness = Smoothness::ContinuouslyDifferentiableInState;
        self
    }

    pub fn with_smoothness(mut self, smoothness: Smoothness) -> Self {
        self.smoothness = smoothness;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_jvp(&self) -> bool {
        self.jvp.is_some()
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    /// `f(t, x)`.
    pub fn eval(&self, t: f64, x: &StateVector) -> Result<StateVector> {
        x.expect_dim(self.dim)?;
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, x.as_slice(), &mut out)?;
        Ok(StateVector(out))
    }

    /// `(df/dx)(t, x) v` from the analytic Jacobian action.
    pub fn jvp(&self, t: f64, x: &StateVector, v: &StateVector) -> Result<StateVector> {
        let jvp = self.jvp.as_ref().ok_or(Error::MissingJvp)?;
        x.expect_dim(self.dim)?;
        v.expect_dim(self.dim)?;
        let mut out = vec![0.0; self.dim];
        jvp(t, x.as_slice(), v.as_slice(), &mut out);
        check_finite(&out, "field Jacobian action")?;
        Ok(StateVector(out))
    }

    /// `(f(t, x + h v) - f(t, x - h v)) / (2h)`.
    pub fn fd_jvp(&self, t: f64, x: &StateVector, v: &StateVector, h: f64) -> Result<StateVector> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "difference step must be positive, got {h}"
            )));
        }
        x.expect_dim(self.dim)?;
        v.expect_dim(self.dim)?;
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; 2 * self.dim];
        self.central_difference(t, x.as_slice(), v.as_slice(), h, &mut out, &mut scratch)?;
        Ok(StateVector(out))
    }

    /// Jacobian matrix assembled from `dim` unit-direction actions.
    pub fn jacobian(&self, t: f64, x: &StateVector) -> Result<DMatrix<f64>> {
        x.expect_dim(self.dim)?;
        let n = self.dim;
        let mut jac = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        let mut scratch = vec![0.0; 3 * n];
        for j in 0..n {
            e[j] = 1.0;
            self.jvp_into(t, x.as_slice(), &e, &mut col, &mut scratch)?;
            for i in 0..n {
                jac[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        Ok(jac)
    }

    pub(crate) fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.eval)(t, x, out);
        check_finite(out, "field value")
    }

    /// Analytic action when available, otherwise a central difference with a
    /// state-space step of `eps^(1/3) * max(1, |x|)`. `scratch` needs `3 * dim`.
    pub(crate) fn jvp_into(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        if let Some(jvp) = &self.jvp {
            jvp(t, x, v, out);
            return check_finite(out, "field Jacobian action");
        }
        let vn = max_norm(v);
        if vn == 0.0 {
            out.fill(0.0);
            return Ok(());
        }
        let step = f64::EPSILON.cbrt() * max_norm(x).max(1.0);
        let (unit, rest) = scratch.split_at_mut(self.dim);
        for (u, vi) in unit.iter_mut().zip(v) {
            *u = vi / vn;
        }
        self.central_difference(t, x, unit, step, out, rest)?;
        for o in out.iter_mut() {
            *o *= vn;
        }
        Ok(())
    }

    fn central_difference(
        &self,
        t: f64,
        x: &[f64],
        v: &[f64],
        h: f64,
        out: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<()> {
        let n = self.dim;
        let (probe, fm) = scratch[..2 * n].split_at_mut(n);
        for i in 0..n {
            probe[i] = x[i] - h * v[i];
        }
        self.eval_into(t, probe, fm)?;
        for i in 0..n {
            probe[i] = x[i] + h * v[i];
        }
        self.eval_into(t, probe, out)?;
        for i in 0..n {
            out[i] = (out[i] - fm[i]) / (2.0 * h);
        }
        check_finite(out, "finite-difference Jacobian action")
    }
}

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
