//! Properties that must hold on every catalog problem, including the
//! Galerkin systems that have no closed-form flow.

use agflow::agformula::{ag_reconstruct, perturbed_solution, DefectSpec};
use agflow::flow::{evolve, flow_compose_residual, IntegratorConfig};
use agflow::picard::{certified_radius, ConstantSource, LipschitzData};
use agflow::problems::{catalog, CatalogProblem};
use agflow::quadrature::QuadSpec;
use agflow::sensitivity::{d_initial_time_volterra_check, flow_jvp, variational_residual};
use agflow::types::{StateVector, TimeWindow};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sampled `[s, t]`, shortened on the large Galerkin systems to keep the
/// suite fast; the properties are local in time anyway.
fn interval(p: &CatalogProblem, r: &mut ChaCha8Rng) -> (f64, f64) {
    let (s, t) = p.sample_interval(r);
    if p.dim() > 16 {
        (s, s + (t - s).min(0.02))
    } else {
        (s, t)
    }
}

#[test]
fn jacobian_actions_are_linear() {
    for p in catalog() {
        let mut r = rng(11);
        for _ in 0..20 {
            let t = p.window.at(r.random_range(0.0..1.0));
            let x = p.sample_state(&mut r);
            let u = p.sample_state(&mut r);
            let v = p.sample_state(&mut r);
            let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            let ju = p.field.jvp(t, &x, &u).unwrap();
            let jv = p.field.jvp(t, &x, &v).unwrap();
            let lhs = p.field.jvp(t, &x, &u.scale(a).add(&v.scale(b))).unwrap();
            let rhs = ju.scale(a).add(&jv.scale(b));
            // round-off scale of the two sides, not of a possibly cancelled sum
            let scale = lhs
                .norm()
                .max(a.abs() * ju.norm() + b.abs() * jv.norm())
                .max(f64::MIN_POSITIVE);
            assert!(
                lhs.dist(&rhs) <= 1e-12 * scale,
                "{}: {:e}",
                p.name,
                lhs.dist(&rhs) / scale
            );
        }
    }
}

#[test]
fn flows_compose() {
    let cfg = IntegratorConfig::default();
    for p in catalog() {
        let samples = if p.dim() > 16 { 10 } else { 50 };
        let mut r = rng(12);
        for _ in 0..samples {
            let x = p.sample_state(&mut r);
            let (t1, t3) = interval(&p, &mut r);
            let t2 = r.random_range(t1..=t3);
            let full = evolve(&p.field, t1, t3, &x, &cfg).unwrap().value;
            let res = flow_compose_residual(&p.field, &x, t1, t2, t3, &cfg).unwrap();
            assert!(
                res <= 100.0 * (cfg.abs_tol + cfg.rel_tol * full.norm()),
                "{}: {res:e}",
                p.name
            );
        }
    }
}

#[test]
fn variational_residuals_are_within_tolerance() {
    let quad = QuadSpec::with_tol(1e-10);
    for p in catalog() {
        // On the 256-mode system the residual tracks the dense-output error
        // of w times |f_x| ~ 6.5e4, roughly 80 abs_tol, so the integrator has
        // to run well below quad_tol for the bound to be attainable.
        let cfg = if p.dim() > 64 {
            IntegratorConfig::with_tol(1e-12, 1e-12).unwrap()
        } else {
            IntegratorConfig::default()
        };
        let mut r = rng(13);
        for _ in 0..3 {
            let x = p.sample_state(&mut r);
            let v = p.sample_state(&mut r);
            let (s, t) = interval(&p, &mut r);
            let sens = flow_jvp(&p.field, s, t, &x, &v, &cfg).unwrap();
            let res = variational_residual(&p.field, s, t, &x, &v, &sens, &cfg, &quad).unwrap();
            assert!(res <= 10.0 * (quad.abs_tol + cfg.abs_tol), "{}: {res:e}", p.name);
            if p.dim() <= 16 {
                let vc = d_initial_time_volterra_check(&p.field, s, t, &x, &cfg, &quad).unwrap();
                assert!(vc <= 1e-7, "{}: {vc:e}", p.name);
            }
        }
    }
}

#[test]
fn identity_holds_on_galerkin_systems() {
    let integ = IntegratorConfig::with_tol(1e-10, 1e-10).unwrap();
    let path_cfg = IntegratorConfig::with_tol(1e-12, 1e-12).unwrap();
    let quad = QuadSpec::with_tol(1e-9);
    for p in catalog().into_iter().filter(|p| !p.has_oracle()) {
        let window = TimeWindow::new(p.window.start(), p.window.at(if p.dim() > 16 { 0.05 } else { 0.25 })).unwrap();
        let defects = if p.dim() > 16 {
            vec![DefectSpec::Sine {
                amplitude: 0.1,
                frequency: 1.0,
            }]
        } else {
            DefectSpec::suite(window)
        };
        let mut r = rng(14);
        let y0 = p.sample_state(&mut r);
        for d in defects {
            let pp = perturbed_solution(&p.field, &d, window, &y0, &path_cfg).unwrap();
            let t = window.end();
            let s = if p.dim() > 16 { t - 5e-4 } else { window.at(0.6) };
            let dec = ag_reconstruct(&p.field, &pp, s, t, &integ, &quad).unwrap();
            let yt = pp.path.evaluate(t).unwrap();
            let bound = 50.0 * (integ.abs_tol + quad.abs_tol) * (1.0 + yt.norm());
            assert!(
                dec.residual <= bound,
                "{} {}: {:e} > {bound:e}",
                p.name,
                d.id(),
                dec.residual
            );
        }
    }
}

fn data(l: f64, m: f64, eps: f64, h: f64) -> LipschitzData {
    LipschitzData::new(l, m, 1.0, eps, h, StateVector::zeros(1), 0.0, ConstantSource::Analytic).unwrap()
}

proptest! {
    #[test]
    fn certified_radius_is_monotone(
        l in 0.0f64..50.0, m in 0.0f64..50.0, eps in 1e-3f64..5.0, h in 1e-3f64..5.0,
        dl in 0.0f64..10.0, dm in 0.0f64..10.0, de in 0.0f64..5.0, dh in 0.0f64..5.0,
    ) {
        let base = certified_radius(&data(l, m, eps, h));
        prop_assert!(base > 0.0 && base <= h);
        prop_assert!(certified_radius(&data(l + dl, m, eps, h)) <= base);
        prop_assert!(certified_radius(&data(l, m + dm, eps, h)) <= base);
        prop_assert!(certified_radius(&data(l, m, eps + de, h)) >= base);
        prop_assert!(certified_radius(&data(l, m, eps, h + dh)) >= base);
    }
}
