use std::f64::consts::PI;

use num_complex::Complex64;
use semilab_core::measure::{incoming_support_check, liouville_residual, mu_eval, MeasureSetup, Observable};
use semilab_core::potential_flow::{EnergySpec, Potential, PotentialPair};
use semilab_core::source::{Profile, SourceManifold};

fn free_1d(eps: f64) -> MeasureSetup {
    let e = EnergySpec::new(1.0, Complex64::new(0.0, eps), 0.01).unwrap();
    let src = SourceManifold::point(vec![0.0], 1.0).unwrap();
    MeasureSetup::new(PotentialPair::free(1), e, src, Profile::gaussian(1.0, 1.0).unwrap())
}

/// Composite Simpson on [0, t_end] with `m` (even) panels.
fn simpson<F: Fn(f64) -> f64>(f: F, t_end: f64, m: usize) -> f64 {
    let h = t_end / m as f64;
    let mut s = f(0.0) + f(t_end);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    s * h / 3.0
}

/// Reduced ray integral for the free line: both momenta, `|S^(1)|^2 = 2 pi / e`.
fn free_oracle(q: &Observable, eps: f64) -> f64 {
    let s2 = 2.0 * PI * (-1.0f64).exp();
    let gauss = |x: f64, xi: f64| -> f64 {
        q.terms
            .iter()
            .map(|t| {
                let d = [x - t.center[0], xi - t.center[1]];
                let p = &t.inverse_covariance;
                let m = d[0] * (p[0] * d[0] + p[1] * d[1]) + d[1] * (p[2] * d[0] + p[3] * d[1]);
                t.coefficient * (-0.5 * m).exp()
            })
            .sum()
    };
    let plus = simpson(|t| gauss(2.0 * t, 1.0) * (-2.0 * eps * t).exp(), 120.0, 400_000);
    let minus = simpson(|t| gauss(-2.0 * t, -1.0) * (-2.0 * eps * t).exp(), 120.0, 400_000);
    0.5 * s2 * (plus + minus)
}

fn ray_bumps() -> Observable {
    Observable::new(1)
        .with_bump(&[2.0], &[1.0], 0.5, 0.2, 1.0)
        .unwrap()
        .with_bump(&[-3.0], &[-1.0], 0.7, 0.3, 0.5)
        .unwrap()
        .with_bump(&[5.0], &[0.9], 1.0, 0.25, 2.0)
        .unwrap()
}

#[test]
fn free_line_matches_scalar_oracle() {
    let setup = free_1d(0.2);
    let q = ray_bumps();
    let got = mu_eval(&q, &setup, 1e-12).unwrap();
    let want = free_oracle(&q, 0.2);
    assert!((got.value - want).abs() <= 1e-8 * want, "{} vs {}", got.value, want);
    assert!(got.tail_bound <= 1e-12);
}

#[test]
fn mirror_symmetric_branches_agree() {
    let setup = free_1d(0.2);
    let q = Observable::new(1)
        .with_bump(&[3.0], &[1.0], 0.5, 0.2, 1.0)
        .unwrap()
        .with_bump(&[-3.0], &[-1.0], 0.5, 0.2, 1.0)
        .unwrap();
    let quad = setup.quadrature().unwrap();
    let ev = mu_eval(&q, &setup, 1e-13).unwrap();
    let (p, m) = (ev.branch_value(&quad, 1), ev.branch_value(&quad, -1));
    assert!((p - m).abs() <= 1e-10 * p.abs());
}

#[test]
fn off_shell_observable_has_zero_mass() {
    let setup = free_1d(0.2);
    let q = Observable::new(1).with_bump(&[1.0], &[2.0], 0.3, 0.05, 1.0).unwrap();
    assert!(q.misses_shell(&setup.pot, 1.0));
    assert_eq!(mu_eval(&q, &setup, 1e-12).unwrap().value, 0.0);
}

#[test]
fn free_liouville_identity() {
    let setup = free_1d(0.2);
    let q = Observable::new(1).with_bump(&[0.5], &[1.0], 0.5, 0.3, 1.0).unwrap();
    let r = liouville_residual(&q, &setup, 1e-12).unwrap();
    assert!(r.rhs > 0.1);
    assert!(r.residual.abs() <= 1e-6, "{r:?}");
}

#[test]
fn incoming_bump_carries_no_mass() {
    let setup = free_1d(0.2);
    let q = Observable::new(1).with_bump(&[-10.0], &[1.0], 0.5, 0.2, 1.0).unwrap();
    assert_eq!(incoming_support_check(&q, &setup, 5.0, 0.5, 1e-12).unwrap(), 0.0);
    let out = Observable::new(1).with_bump(&[10.0], &[1.0], 0.5, 0.2, 1.0).unwrap();
    assert!(mu_eval(&out, &setup, 1e-12).unwrap().value > 0.0);
}

#[test]
fn circle_liouville_self_consistent() {
    let v2 = Potential::zero(2).with_gaussian(0.5, &[1.5, 0.5], 0.5).unwrap();
    let pot = PotentialPair::new(Potential::zero(2), v2, 1.0).unwrap();
    let e = EnergySpec::new(1.0, Complex64::new(0.0, 0.1), 0.01).unwrap();
    let src = SourceManifold::circle([0.0, 0.0], 1.0, 1.0).unwrap();
    let setup = MeasureSetup::new(pot, e, src, Profile::gaussian(1.0, 1.0).unwrap());
    let q = Observable::new(2)
        .with_bump(&[1.2, 0.3], &[0.9, 0.3], 0.4, 0.3, 1.0)
        .unwrap();
    let r = liouville_residual(&q, &setup, 1e-10).unwrap();
    assert!(r.rhs > 0.0);
    assert!(r.residual.abs() <= 1e-4 * r.rhs.abs().max(1.0), "{r:?}");
}
