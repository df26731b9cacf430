//! Continuously evaluable trajectories with derivative access.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::types::{StateVector, TimeWindow};

/// One polynomial piece `p(theta) = sum_k c_k theta^k` on `[t0, t1]`,
/// `theta = (t - t0) / (t1 - t0)`.
#[derive(Debug, Clone)]
pub(crate) struct Segment {
    t0: f64,
    t1: f64,
    /// Power-basis coefficients, `dim` values per degree, lowest degree first.
    coeffs: Vec<f64>,
    /// Exact right endpoint value.
    end: Vec<f64>,
}

impl Segment {
    pub(crate) fn new(t0: f64, t1: f64, coeffs: Vec<f64>, end: Vec<f64>) -> Self {
        debug_assert!(t1 > t0);
        debug_assert_eq!(coeffs.len() % end.len(), 0);
        Self { t0, t1, coeffs, end }
    }

    /// Cubic Hermite piece matching values and time derivatives at both ends.
    pub(crate) fn hermite(t0: f64, t1: f64, y0: &[f64], d0: &[f64], y1: &[f64], d1: &[f64]) -> Self {
        let n = y0.len();
        let h = t1 - t0;
        let mut coeffs = vec![0.0; 4 * n];
        for i in 0..n {
            let dy = y1[i] - y0[i];
            coeffs[i] = y0[i];
            coeffs[n + i] = h * d0[i];
            coeffs[2 * n + i] = 3.0 * dy - h * (2.0 * d0[i] + d1[i]);
            coeffs[3 * n + i] = -2.0 * dy + h * (d0[i] + d1[i]);
        }
        Self::new(t0, t1, coeffs, y1.to_vec())
    }

    fn dim(&self) -> usize {
        self.end.len()
    }

    fn degree(&self) -> usize {
        self.coeffs.len() / self.dim() - 1
    }

    fn value(&self, t: f64, out: &mut [f64]) {
        let n = self.dim();
        if t == self.t1 {
            out.copy_from_slice(&self.end);
            return;
        }
        let theta = (t - self.t0) / (self.t1 - self.t0);
        let deg = self.degree();
        out.copy_from_slice(&self.coeffs[deg * n..(deg + 1) * n]);
        for k in (0..deg).rev() {
            for i in 0..n {
                out[i] = out[i] * theta + self.coeffs[k * n + i];
            }
        }
    }

    fn derivative(&self, t: f64, out: &mut [f64]) {
        let n = self.dim();
        let h = self.t1 - self.t0;
        let theta = (t - self.t0) / h;
        let deg = self.degree();
        if deg == 0 {
            out.fill(0.0);
            return;
        }
        for i in 0..n {
            out[i] = deg as f64 * self.coeffs[deg * n + i];
        }
        for k in (1..deg).rev() {
            for i in 0..n {
                out[i] = out[i] * theta + k as f64 * self.coeffs[k * n + i];
            }
        }
        for o in out.iter_mut() {
            *o /= h;
        }
    }

    fn project(&self, range: std::ops::Range<usize>) -> Segment {
        let n = self.dim();
        let m = range.len();
        let deg = self.degree();
        let mut coeffs = Vec::with_capacity((deg + 1) * m);
        for k in 0..=deg {
            coeffs.extend_from_slice(&self.coeffs[k * n + range.start..k * n + range.end]);
        }
        Segment::new(self.t0, self.t1, coeffs, self.end[range].to_vec())
    }
}

type PathFn = dyn Fn(f64, &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Repr {
    Constant(Vec<f64>),
    Piecewise(Arc<Vec<Segment>>),
    Analytic {
        value: Arc<PathFn>,
        derivative: Arc<PathFn>,
    },
}

/// A trajectory on a [`TimeWindow`] with value and time-derivative access.
///
/// `breakpoints` lists interior times where the path may lose smoothness;
/// quadrature over quantities built from the path never straddles them.
#[derive(Clone)]
pub struct DensePath {
    window: TimeWindow,
    dim: usize,
    breakpoints: Vec<f64>,
    repr: Repr,
}

impl fmt::Debug for DensePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.repr {
            Repr::Constant(_) => "constant",
            Repr::Piecewise(_) => "piecewise",
            Repr::Analytic { .. } => "analytic",
        };
        f.debug_struct("DensePath")
            .field("window", &self.window)
            .field("dim", &self.dim)
            .field("breakpoints", &self.breakpoints.len())
            .field("kind", &kind)
            .finish()
    }
}

impl DensePath {
    pub fn constant(window: TimeWindow, x: &StateVector) -> Self {
        Self {
            window,
            dim: x.dim(),
            breakpoints: Vec::new(),
            repr: Repr::Constant(x.as_slice().to_vec()),
        }
    }

    /// Path given by closures for value and derivative.
    pub fn from_fn<V, D>(window: TimeWindow, dim: usize, breakpoints: Vec<f64>, value: V, derivative: D) -> Result<Self>
    where
        V: Fn(f64, &mut [f64]) + Send + Sync + 'static,
        D: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        let breakpoints = normalize_breakpoints(&window, breakpoints)?;
        Ok(Self {
            window,
            dim,
            breakpoints,
            repr: Repr::Analytic {
                value: Arc::new(value),
                derivative: Arc::new(derivative),
            },
        })
    }

    /// Piecewise cubic Hermite interpolant through `(times[k], states[k])`
    /// with slopes `derivatives[k]`; C¹ at the nodes, which become breakpoints.
    pub fn hermite(times: &[f64], states: &[StateVector], derivatives: &[StateVector]) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument(
                "Hermite extension needs at least two nodes".into(),
            ));
        }
        if states.len() != times.len() || derivatives.len() != times.len() {
            return Err(Error::InvalidArgument(
                "node, state and derivative counts differ".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("node times must be strictly increasing".into()));
        }
        let dim = states[0].dim();
        for s in states.iter().chain(derivatives) {
            s.expect_dim(dim)?;
        }
        let segments = (0..times.len() - 1)
            .map(|k| {
                Segment::hermite(
                    times[k],
                    times[k + 1],
                    states[k].as_slice(),
                    derivatives[k].as_slice(),
                    states[k + 1].as_slice(),
                    derivatives[k + 1].as_slice(),
                )
            })
            .collect();
        let window = TimeWindow::new(times[0], times[times.len() - 1])?;
        Ok(Self {
            window,
            dim,
            breakpoints: times[1..times.len() - 1].to_vec(),
            repr: Repr::Piecewise(Arc::new(segments)),
        })
    }

    pub(crate) fn from_segments(window: TimeWindow, dim: usize, segments: Vec<Segment>, breakpoints: Vec<f64>) -> Self {
        debug_assert!(!segments.is_empty());
        Self {
            window,
            dim,
            breakpoints,
            repr: Repr::Piecewise(Arc::new(segments)),
        }
    }

    /// Joins paths on adjacent windows. The junctions become breakpoints.
    pub fn concat(paths: &[DensePath]) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let dim = first.dim;
        let mut segments = Vec::new();
        let mut breakpoints = Vec::new();
        for (k, p) in paths.iter().enumerate() {
            if p.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.dim,
                });
            }
            if k > 0 {
                let prev = paths[k - 1].window.end();
                if p.window.start() != prev {
                    return Err(Error::InvalidArgument(format!(
                        "windows are not adjacent at {prev} / {}",
                        p.window.start()
                    )));
                }
                breakpoints.push(prev);
            }
            breakpoints.extend_from_slice(&p.breakpoints);
            match &p.repr {
                Repr::Piecewise(segs) => segments.extend(segs.iter().cloned()),
                Repr::Constant(x) if p.window.length() > 0.0 => {
                    let seg = Segment::new(p.window.start(), p.window.end(), x.clone(), x.clone());
                    segments.push(seg);
                }
                Repr::Constant(_) => {}
                Repr::Analytic { .. } => {
                    return Err(Error::InvalidArgument(
                        "only piecewise-polynomial paths can be concatenated".into(),
                    ))
                }
            }
        }
        let window = TimeWindow::new(first.window.start(), paths[paths.len() - 1].window.end())?;
        if segments.is_empty() {
            return Ok(first.clone());
        }
        breakpoints.retain(|b| window.start() < *b && *b < window.end());
        breakpoints.dedup();
        Ok(Self::from_segments(window, dim, segments, breakpoints))
    }

    /// Restricts to the coordinates in `range`.
    pub fn project(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.dim || range.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "coordinate range {range:?} invalid for dimension {}",
                self.dim
            )));
        }
        let repr = match &self.repr {
            Repr::Constant(x) => Repr::Constant(x[range.clone()].to_vec()),
            Repr::Piecewise(segs) => Repr::Piecewise(Arc::new(segs.iter().map(|s| s.project(range.clone())).collect())),
            Repr::Analytic { value, derivative } => {
                let (v, d) = (value.clone(), derivative.clone());
                let (r1, r2) = (range.clone(), range.clone());
                let n = self.dim;
                Repr::Analytic {
                    value: Arc::new(move |t, out: &mut [f64]| {
                        let mut full = vec![0.0; n];
                        v(t, &mut full);
                        out.copy_from_slice(&full[r1.clone()]);
                    }),
                    derivative: Arc::new(move |t, out: &mut [f64]| {
                        let mut full = vec![0.0; n];
                        d(t, &mut full);
                        out.copy_from_slice(&full[r2.clone()]);
                    }),
                }
            }
        };
        Ok(Self {
            window: self.window,
            dim: range.len(),
            breakpoints: self.breakpoints.clone(),
            repr,
        })
    }

    pub fn window(&self) -> TimeWindow {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn evaluate(&self, t: f64) -> Result<StateVector> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, &mut out)?;
        StateVector::new(out)
    }

    pub fn derivative(&self, t: f64) -> Result<StateVector> {
        let mut out = vec![0.0; self.dim];
        self.derivative_into(t, &mut out)?;
        StateVector::new(out)
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.window.check(t)?;
        match &self.repr {
            Repr::Constant(x) => out.copy_from_slice(x),
            Repr::Piecewise(segs) => segs[locate(segs, t)].value(t, out),
            Repr::Analytic { value, .. } => value(t, out),
        }
        Ok(())
    }

    pub fn derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        self.window.check(t)?;
        match &self.repr {
            Repr::Constant(_) => out.fill(0.0),
            Repr::Piecewise(segs) => segs[locate(segs, t)].derivative(t, out),
            Repr::Analytic { derivative, .. } => derivative(t, out),
        }
        Ok(())
    }

    /// Segment end times for piecewise paths (integrator step nodes).
    pub fn nodes(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Piecewise(segs) => std::iter::once(segs[0].t0).chain(segs.iter().map(|s| s.t1)).collect(),
            _ => vec![self.window.start(), self.window.end()],
        }
    }
}

fn locate(segs: &[Segment], t: f64) -> usize {
    segs.partition_point(|s| s.t1 < t).min(segs.len() - 1)
}

fn normalize_breakpoints(window: &TimeWindow, mut bps: Vec<f64>) -> Result<Vec<f64>> {
    if bps.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("breakpoints"));
    }
    bps.retain(|b| window.start() < *b && *b < window.end());
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    Ok(bps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(x: &[f64]) -> StateVector {
        StateVector::from_slice(x).unwrap()
    }

    #[test]
    fn hermite_two_equal_nodes_is_constant() {
        let p = DensePath::hermite(&[0.0, 1.0], &[sv(&[2.0]), sv(&[2.0])], &[sv(&[0.0]), sv(&[0.0])]).unwrap();
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            assert_eq!(p.evaluate(t).unwrap()[0], 2.0);
            assert_eq!(p.derivative(t).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn hermite_rejects_single_node() {
        assert!(DensePath::hermite(&[0.0], &[sv(&[1.0])], &[sv(&[0.0])]).is_err());
    }

    #[test]
    fn outside_window_is_error() {
        let p = DensePath::constant(TimeWindow::new(0.0, 1.0).unwrap(), &sv(&[1.0]));
        assert!(matches!(p.evaluate(1.5), Err(Error::OutsideWindow { .. })));
    }

    #[test]
    fn hermite_reproduces_cubics() {
        // p(t) = t^3 - 2t: Hermite interpolation is exact for cubics.
        let ts = [0.0, 0.4, 1.0];
        let ys: Vec<_> = ts.iter().map(|t: &f64| sv(&[t.powi(3) - 2.0 * t])).collect();
        let ds: Vec<_> = ts.iter().map(|t: &f64| sv(&[3.0 * t * t - 2.0])).collect();
        let p = DensePath::hermite(&ts, &ys, &ds).unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            assert!((p.evaluate(t).unwrap()[0] - (t.powi(3) - 2.0 * t)).abs() < 1e-14);
            assert!((p.derivative(t).unwrap()[0] - (3.0 * t * t - 2.0)).abs() < 1e-13);
        }
        assert_eq!(p.breakpoints(), &[0.4]);
    }

    #[test]
    fn concat_and_project() {
        let a = DensePath::hermite(
            &[0.0, 1.0],
            &[sv(&[0.0, 1.0]), sv(&[1.0, 1.0])],
            &[sv(&[1.0, 0.0]), sv(&[1.0, 0.0])],
        )
        .unwrap();
        let b = DensePath::hermite(
            &[1.0, 2.0],
            &[sv(&[1.0, 1.0]), sv(&[3.0, 1.0])],
            &[sv(&[2.0, 0.0]), sv(&[2.0, 0.0])],
        )
        .unwrap();
        let c = DensePath::concat(&[a, b]).unwrap();
        assert_eq!(c.breakpoints(), &[1.0]);
        assert_eq!(c.evaluate(2.0).unwrap()[0], 3.0);
        let second = c.project(1..2).unwrap();
        assert_eq!(second.evaluate(1.7).unwrap()[0], 1.0);
        assert!(c.project(1..3).is_err());
    }

    proptest! {
        #[test]
        fn hermite_is_continuous_and_consistent(
            vals in proptest::collection::vec(-5.0..5.0f64, 6),
            slopes in proptest::collection::vec(-5.0..5.0f64, 6),
        ) {
            let ts: Vec<f64> = (0..6).map(|k| k as f64 * 0.2).collect();
            let ys: Vec<_> = vals.iter().map(|v| sv(&[*v])).collect();
            let ds: Vec<_> = slopes.iter().map(|v| sv(&[*v])).collect();
            let p = DensePath::hermite(&ts, &ys, &ds).unwrap();
            for (k, t) in ts.iter().enumerate() {
                prop_assert_eq!(p.evaluate(*t).unwrap()[0], vals[k]);
                // one-sided values on either side of each node agree
                if k > 0 && k < 5 {
                    let l = p.evaluate(t - 1e-12).unwrap()[0];
                    let r = p.evaluate(t + 1e-12).unwrap()[0];
                    prop_assert!((l - r).abs() <= 1e-10);
                }
            }
            // derivative vs central difference away from nodes
            let h = 1e-5;
            for t in [0.1, 0.33, 0.5, 0.71, 0.9] {
                let fd = (p.evaluate(t + h).unwrap()[0] - p.evaluate(t - h).unwrap()[0]) / (2.0 * h);
                prop_assert!((fd - p.derivative(t).unwrap()[0]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
