//! Composite Gauss–Legendre quadrature with adaptive panel bisection for
//! vector-valued integrands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::types::{lerp, max_norm};

/// Panel quadrature settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadSpec {
    /// Absolute tolerance for the whole interval, distributed over panels by length.
    pub abs_tol: f64,
    /// Gauss–Legendre points per panel.
    pub points: usize,
    /// Uniform panels before any refinement.
    pub initial_panels: usize,
    pub max_panels: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            points: 5,
            initial_panels: 1,
            max_panels: 1 << 14,
            exec: Execution::default(),
        }
    }
}

impl QuadSpec {
    pub fn with_tol(abs_tol: f64) -> Self {
        Self {
            abs_tol,
            ..Self::default()
        }
    }

    pub fn panels(mut self, initial_panels: usize) -> Self {
        self.initial_panels = initial_panels;
        self
    }

    pub fn exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "quadrature tolerance must be positive, got {}",
                self.abs_tol
            )));
        }
        if !(1..=64).contains(&self.points) {
            return Err(Error::InvalidArgument(format!(
                "unsupported Gauss-Legendre order {}",
                self.points
            )));
        }
        if self.initial_panels == 0 || self.max_panels < self.initial_panels {
            return Err(Error::InvalidArgument(
                "panel counts must satisfy 1 <= initial <= max".into(),
            ));
        }
        Ok(())
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, ascending nodes.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess followed by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// One accepted panel and its integral.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub start: f64,
    pub end: f64,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QuadOutcome {
    /// Accepted panels in ascending time order.
    pub panels: Vec<Panel>,
    /// Left-to-right sum of the panel values.
    pub total: Vec<f64>,
    /// Sum of the panel value norms.
    pub abs_total: f64,
    pub evaluations: usize,
}

struct Pending {
    a: f64,
    b: f64,
    whole: Option<Vec<f64>>,
}

/// Integrates `f` over `[a, b]`.
///
/// The interval is split at `breakpoints`, then each panel is bisected until
/// the Gauss–Legendre value on the panel and the sum over its halves agree to
/// within the panel's share of `spec.abs_tol`. Nodes of one refinement level
/// are evaluated through `spec.exec`; the final sum is taken in ascending
/// panel order so results do not depend on scheduling.
pub fn integrate<F>(f: F, dim: usize, a: f64, b: f64, breakpoints: &[f64], spec: &QuadSpec) -> Result<QuadOutcome>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync + Send,
{
    spec.validate()?;
    if !(a <= b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "invalid quadrature interval [{a}, {b}]"
        )));
    }
    if a == b {
        return Ok(QuadOutcome {
            panels: Vec::new(),
            total: vec![0.0; dim],
            abs_total: 0.0,
            evaluations: 0,
        });
    }
    let (nodes, weights) = gauss_legendre(spec.points);
    let length = b - a;

    let mut cuts: Vec<f64> = (0..=spec.initial_panels)
        .map(|k| lerp(a, b, k as f64 / spec.initial_panels as f64))
        .collect();
    cuts.extend(breakpoints.iter().copied().filter(|t| a < *t && *t < b));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut active: Vec<Pending> = cuts
        .windows(2)
        .map(|w| Pending {
            a: w[0],
            b: w[1],
            whole: None,
        })
        .collect();
    let mut accepted: Vec<Panel> = Vec::new();
    let mut evaluations = 0usize;

    let rule = |lo: f64, hi: f64| -> Result<Vec<f64>> {
        let half = 0.5 * (hi - lo);
        let mid = lo + half;
        let mut acc = vec![0.0; dim];
        for (x, w) in nodes.iter().zip(&weights) {
            let v = f(mid + half * x)?;
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            for (s, vi) in acc.iter_mut().zip(&v) {
                *s += w * half * vi;
            }
        }
        Ok(acc)
    };

    while !active.is_empty() {
        if accepted.len() + active.len() > spec.max_panels {
            return Err(Error::QuadratureLimit { limit: spec.max_panels });
        }
        let results = exec::map(spec.exec, &active, |p| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let mid = 0.5 * (p.a + p.b);
            let whole = match &p.whole {
                Some(w) => w.clone(),
                None => rule(p.a, p.b)?,
            };
            Ok((whole, rule(p.a, mid)?, rule(mid, p.b)?))
        });
        let mut next = Vec::new();
        for (p, r) in active.iter().zip(results) {
            let (whole, left, right) = r?;
            evaluations += spec.points * if p.whole.is_some() { 2 } else { 3 };
            let split: Vec<f64> = left.iter().zip(&right).map(|(l, r)| l + r).collect();
            let diff = whole.iter().zip(&split).fold(0.0_f64, |m, (w, s)| m.max((w - s).abs()));
            let share = spec.abs_tol * (p.b - p.a) / length;
            let mid = 0.5 * (p.a + p.b);
            if diff <= share || !(p.a < mid && mid < p.b) {
                accepted.push(Panel {
                    start: p.a,
                    end: p.b,
                    value: split,
                });
            } else {
                next.push(Pending {
                    a: p.a,
                    b: mid,
                    whole: Some(left),
                });
                next.push(Pending {
                    a: mid,
                    b: p.b,
                    whole: Some(right),
                });
            }
        }
        active = next;
    }

    accepted.sort_by(|x, y| x.start.total_cmp(&y.start));
    let mut total = vec![0.0; dim];
    let mut abs_total = 0.0;
    for p in &accepted {
        for (t, v) in total.iter_mut().zip(&p.value) {
            *t += v;
        }
        abs_total += max_norm(&p.value);
    }
    Ok(QuadOutcome {
        panels: accepted,
        total,
        abs_total,
        evaluations,
    })
}
