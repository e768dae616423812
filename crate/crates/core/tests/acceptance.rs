//! Acceptance run: one PASS/FAIL line per criterion.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use semilab_core::helmholtz::{solve_outgoing, DiscreteField, Grid, Layer, SolverConfig};
use semilab_core::measure::{liouville_residual, mu_eval, MeasureSetup, Observable};
use semilab_core::potential_flow::*;
use semilab_core::source::{sigma_quadrature, synthesize_source, weighted_norm_fit, Profile, SourceManifold};
use semilab_core::wigner::{incoming_mass, weyl_pairing, weyl_pairing_direct, IncomingRegion};
use semilab_core::wkb::{bkw_error, critical_point_and_hessian, InitialProfile, WkbConfig, WkbSetup};
use semilab_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// `[a, b, ...]` in scientific notation.
fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn gaussian_source() -> (SourceManifold, Profile) {
    (SourceManifold::point(vec![0.0], 1.0).unwrap(), Profile::gaussian(1.0, 1.0).unwrap())
}

/// Solve on `|x| <= 10` with spacing `h / 4` and an absorbing layer.
fn solve_1d(pot: &PotentialPair, h: f64) -> Result<DiscreteField> {
    let (src, prof) = gaussian_source();
    let e = EnergySpec::new(1.0, c(0.0, 0.2), h)?;
    let grid = Grid::new(1, 10.0, h / 4.0, Some(Layer { width: 1.5, strength: 120.0 }))?;
    let s = synthesize_source(&src, &prof, h, &grid)?;
    solve_outgoing(pot, &e, &s, &grid, &SolverConfig::default_for(h))
}

fn mu(pot: &PotentialPair, q: &Observable) -> Result<f64> {
    let (src, prof) = gaussian_source();
    let e = EnergySpec::new(1.0, c(0.0, 0.2), 0.01)?;
    Ok(mu_eval(q, &MeasureSetup::new(pot.clone(), e, src, prof), 1e-12)?.value)
}

fn outgoing_bumps(a: f64, b: f64) -> Observable {
    Observable::new(1)
        .with_bump(&[a], &[1.0], 0.5, 0.2, 1.0)
        .unwrap()
        .with_bump(&[-b], &[-1.0], 0.5, 0.2, 1.0)
        .unwrap()
        .with_bump(&[a + 2.0], &[1.0], 0.5, 0.2, 1.0)
        .unwrap()
        .with_bump(&[-b - 2.0], &[-1.0], 0.5, 0.2, 1.0)
        .unwrap()
}

fn scattering() -> PotentialPair {
    let v1 = Potential::zero(1).with_gaussian(0.3, &[1.5], 0.5).unwrap();
    PotentialPair::new(v1, Potential::zero(1), 1.0).unwrap()
}

/// Relative pairing errors over `hs`; pass when the last is within `tol`
/// and the sequence decreases.
fn convergence(pot: &PotentialPair, q: &Observable, hs: &[f64], tol: f64) -> Result<Outcome> {
    let m = mu(pot, q)?;
    let mut errs = vec![];
    for &h in hs {
        let u = solve_1d(pot, h)?;
        errs.push((weyl_pairing(q, &u)? - m).abs() / m);
    }
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let last = *errs.last().unwrap();
    outcome(last <= tol && monotone, format!("mu={m:.6e} rel={}", sci(&errs)))
}

fn criterion_1() -> Result<Outcome> {
    convergence(&PotentialPair::free(1), &outgoing_bumps(3.0, 2.0), &[1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0], 0.05)
}

fn criterion_2() -> Result<Outcome> {
    convergence(&scattering(), &outgoing_bumps(3.0, 2.0), &[1.0 / 128.0, 1.0 / 256.0, 1.0 / 512.0], 0.10)
}

fn criterion_3() -> Result<Outcome> {
    let (src, prof) = gaussian_source();
    let e = EnergySpec::new(1.0, c(0.0, 0.2), 0.01)?;
    let setup = MeasureSetup::new(PotentialPair::free(1), e, src, prof);
    let q = Observable::new(1).with_bump(&[0.5], &[1.0], 0.5, 0.3, 1.0)?;
    let r1 = liouville_residual(&q, &setup, 1e-12)?;

    let v2 = Potential::zero(2).with_gaussian(0.5, &[1.5, 0.5], 0.5)?;
    let pot = PotentialPair::new(Potential::zero(2), v2, 1.0)?;
    let e = EnergySpec::new(1.0, c(0.0, 0.1), 0.01)?;
    let setup = MeasureSetup::new(pot, e, SourceManifold::circle([0.0, 0.0], 1.0, 1.0)?, prof);
    let q = Observable::new(2).with_bump(&[1.2, 0.3], &[0.9, 0.3], 0.4, 0.3, 1.0)?;
    let r2 = liouville_residual(&q, &setup, 1e-10)?;
    let rel2 = r2.residual.abs() / r2.rhs.abs().max(1.0);
    outcome(
        r1.residual.abs() <= 1e-6 && rel2 <= 1e-4,
        format!("free 1D residual={:.3e}, circle relative residual={rel2:.3e}", r1.residual.abs()),
    )
}

fn criterion_4() -> Result<Outcome> {
    let pot = PotentialPair::free(1);
    let off = Observable::new(1).with_bump(&[0.0], &[0.0], 0.5, 0.1, 1.0)?;
    let on = Observable::new(1).with_bump(&[3.0], &[1.0], 0.5, 0.1, 1.0)?;
    let mut ratios = vec![];
    for h in [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0] {
        let u = solve_1d(&pot, h)?;
        ratios.push(weyl_pairing(&off, &u)?.abs() / weyl_pairing(&on, &u)?.abs());
    }
    let factors: Vec<f64> = ratios.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = ratios[2] <= 1e-2 && factors.iter().all(|&f| f >= 1.5);
    outcome(pass, format!("off/on={} halving factors={factors:.2?}", sci(&ratios)))
}

fn criterion_5() -> Result<Outcome> {
    let region = IncomingRegion::new(1.0, 0.5, 0.0)?;
    let mut fr = vec![];
    for pot in [PotentialPair::free(1), scattering()] {
        let u = solve_1d(&pot, 1.0 / 256.0)?;
        fr.push(incoming_mass(&u, &region, None)? / u.norm_sqr());
    }
    outcome(fr.iter().all(|&f| f <= 1e-2), format!("incoming fraction free={:.3e} scattering={:.3e}", fr[0], fr[1]))
}

fn criterion_6() -> Result<Outcome> {
    let prof = Profile::gaussian(1.0, 1.0)?;
    let point = SourceManifold::point(vec![0.0], 1.0)?;
    let circle = SourceManifold::circle([0.0, 0.0], 1.0, 1.0)?;
    let h1 = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
    let h2 = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
    let mut slopes = vec![];
    for delta in [0.0, 1.0] {
        slopes.push(weighted_norm_fit(&point, &prof, delta, &h1)?.slope);
        slopes.push(weighted_norm_fit(&circle, &prof, delta, &h2)?.slope);
    }
    let pass = slopes.iter().all(|s| (s - 0.5).abs() <= 0.05);
    outcome(pass, format!("slopes (point d0, circle d0, point d1, circle d1)={slopes:.4?}"))
}

fn criterion_7() -> Result<Outcome> {
    let v1 = Potential::zero(2)
        .with_gaussian(0.4, &[0.5, 0.0], 0.7)?
        .with_gaussian(-0.6, &[-0.4, 0.6], 1.1)?;
    let v2 = Potential::zero(2).with_gaussian(0.3, &[0.0, -0.5], 0.9)?;
    let pot = PotentialPair::new(v1, v2, 1.0)?;
    let classify = ClassifyParams {
        t_max: 50.0,
        r_escape: 10.0,
        gamma: 0.1,
        tol: 1e-12,
    };
    let cfg = SamplerConfig::new(vec![-2.0, -2.0], vec![2.0, 2.0], 100, 2024, classify);
    let samples = sample_energy_shell(&pot, 1.0, &cfg)?;
    let times: Vec<f64> = (0..=500).map(|i| i as f64 * 0.1).collect();
    let (mut drift, mut reversal) = (0.0f64, 0.0f64);
    for w in &samples {
        let tr = trajectory(&pot, w, &times, 1e-12)?;
        drift = drift.max(tr.max_energy_drift(&pot));
        let end = tr.states.last().unwrap();
        let back = flow(&pot, &end.reversed(), 50.0, 1e-12)?;
        reversal = reversal.max(back.distance(&w.reversed()));
    }
    outcome(
        drift <= 1e-8 && reversal <= 1e-7,
        format!("{} samples, energy drift={drift:.3e}, reversal error={reversal:.3e}", samples.len()),
    )
}

fn criterion_8() -> Result<Outcome> {
    let gamma = 0.3;
    let v1 = Potential::zero(1).with_gaussian(-2.0, &[0.0], 1.0)?;
    let v2 = Potential::zero(1).with_gaussian(0.5, &[0.0], 2.0)?;
    let pot = PotentialPair::new(v1, v2.clone(), 1.0)?;
    let w0 = PhasePoint::new(vec![0.0], vec![1.5f64.sqrt()]);
    let meets = v2.value(&w0.x) > gamma;
    let fit = fit_damping_decay(&pot, &[w0], 40.0, 3.0, 1e-10)?;
    outcome(
        meets && fit.delta > 0.0 && fit.residual <= 0.05,
        format!("delta={:.4e} C={:.4e} envelope residual={:.3e}", fit.delta, fit.c, fit.residual),
    )
}

fn criterion_9() -> Result<Outcome> {
    let src = SourceManifold::point(vec![0.0], 1.0)?;
    let mut setup = WkbSetup {
        pot: PotentialPair::free(1),
        e0: 1.0,
        e1: c(0.0, 0.2),
        profile: InitialProfile::normalized(vec![0.0], 4.0)?,
        xi0: 1.0,
        half_extent: 32.0,
        coarse: 0.1,
        cfg: WkbConfig::default(),
    };
    let t = semilab_core::source::tau0(&src, &setup.pot, setup.e0)?;
    let hs = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0, 1.0 / 512.0];
    let free = bkw_error(&setup, &hs, t)?;
    setup.pot = PotentialPair::new(Potential::zero(1).with_gaussian(-0.4, &[0.5], 1.0)?, Potential::zero(1), 1.0)?;
    let well = bkw_error(&setup, &hs, t)?;
    let free_max = free.errors.iter().cloned().fold(0.0, f64::max);
    outcome(
        free_max <= 1e-6 && well.order >= 1.0,
        format!("t={t}, free max error={free_max:.3e}, well errors={} order={:.3}", sci(&well.errors), well.order),
    )
}

/// `(ratio - 1) / t` for each `t`, plus the pass test: fitted `C` bounds
/// every deviation and successive estimates agree within 30%.
fn hessian_series(ratio_at: impl Fn(f64) -> Result<f64>) -> Result<(bool, Vec<f64>, f64)> {
    let ts = [0.2, 0.1, 0.05, 0.025];
    let mut dev = vec![];
    for &t in &ts {
        dev.push(ratio_at(t)? - 1.0);
    }
    let cs: Vec<f64> = dev.iter().zip(&ts).map(|(d, t)| d / t).collect();
    // Least-squares C through the origin.
    let c_fit = dev.iter().zip(&ts).map(|(d, t)| d * t).sum::<f64>() / ts.iter().map(|t| t * t).sum::<f64>();
    let bounded = dev.iter().zip(&ts).all(|(d, t)| d.abs() <= 1.3 * c_fit.abs() * t);
    let stable = cs.windows(2).all(|w| (w[1] - w[0]).abs() <= 0.3 * w[0].abs());
    Ok((bounded && stable, cs, c_fit))
}

fn criterion_10() -> Result<Outcome> {
    let cfg = WkbConfig::default();
    let v1 = Potential::zero(1).with_gaussian(0.3, &[0.7], 1.0)?;
    let pot1 = PotentialPair::new(v1, Potential::zero(1), 1.0)?;
    let p1 = SourceManifold::point(vec![0.0], 1.0)?;
    let a = hessian_series(|t| {
        let k = (1.0 - pot1.v1(&[0.0])).sqrt();
        Ok(critical_point_and_hessian(&p1, &pot1, 1.0, &[2.0 * t * k], &cfg)?.asymptotic_ratio)
    })?;

    let v2d = Potential::zero(2).with_gaussian(0.3, &[0.7, 0.2], 1.0)?;
    let pot2 = PotentialPair::new(v2d, Potential::zero(2), 1.0)?;
    let p2 = SourceManifold::point(vec![0.0, 0.0], 1.0)?;
    let b = hessian_series(|t| {
        let k = (1.0 - pot2.v1(&[0.0, 0.0])).sqrt();
        let x = [2.0 * t * k * 0.6f64.cos(), 2.0 * t * k * 0.6f64.sin()];
        Ok(critical_point_and_hessian(&p2, &pot2, 1.0, &x, &cfg)?.asymptotic_ratio)
    })?;

    let vc = Potential::zero(2).with_gaussian(0.3, &[2.7, 0.2], 1.0)?;
    let potc = PotentialPair::new(vc, Potential::zero(2), 1.0)?;
    let circle = SourceManifold::circle([0.0, 0.0], 2.0, 1.0)?;
    let cc = hessian_series(|t| {
        let z = [2.0 * 0.3f64.cos(), 2.0 * 0.3f64.sin()];
        let k = (1.0 - potc.v1(&z)).sqrt();
        let r = 2.0 + 2.0 * t * k;
        Ok(critical_point_and_hessian(&circle, &potc, 1.0, &[r * 0.3f64.cos(), r * 0.3f64.sin()], &cfg)?.asymptotic_ratio)
    })?;
    outcome(
        a.0 && b.0 && cc.0,
        format!(
            "C(t) point n=1 {:.4?} fit {:.4}; point n=2 {:.4?} fit {:.4}; circle {:.4?} fit {:.4}",
            a.1, a.2, b.1, b.2, cc.1, cc.2
        ),
    )
}

fn moyal_field(n: usize) -> Result<DiscreteField> {
    let h = 1.0 / 16.0;
    let grid = Grid::new(n, 0.5, h / 4.0, None)?;
    Ok(DiscreteField::from_fn(&grid, h, |x| {
        let p1: f64 = x.iter().map(|v| (v - 0.1) * (v - 0.1)).sum();
        let p2: f64 = x.iter().map(|v| (v + 0.15) * (v + 0.15)).sum();
        let ph1: f64 = x.iter().sum::<f64>() / h;
        let ph2: f64 = -0.6 * x.iter().sum::<f64>() / h;
        Complex64::from_polar((-p1 / (2.0 * 0.07 * 0.07)).exp(), ph1) + Complex64::from_polar(0.7 * (-p2 / (2.0 * 0.06 * 0.06)).exp(), ph2)
    }))
}

fn criterion_11() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut sizes = vec![];
    for n in [1, 2] {
        let u = moyal_field(n)?;
        sizes.push(u.grid.npts);
        // Both observables stay inside the momentum window pi h / (2 dx).
        let q = if n == 1 {
            Observable::new(1)
                .with_bump(&[0.05], &[0.8], 0.2, 0.5, 1.0)?
                .with_bump(&[-0.1], &[-0.5], 0.15, 0.4, -0.7)?
        } else {
            Observable::new(2).with_bump(&[0.0, 0.05], &[0.7, 0.5], 0.2, 0.5, 1.0)?
        };
        let a = weyl_pairing(&q, &u)?;
        let b = weyl_pairing_direct(&q, &u)?;
        worst = worst.max((a - b).abs() / (u.norm_sqr() * q.sup_abs()));
    }
    outcome(worst <= 1e-6, format!("nodes per axis {sizes:?}, worst |lattice - direct| / (|u|^2 sup|q|)={worst:.3e}"))
}

fn criterion_12() -> Result<Outcome> {
    let two = sigma_quadrature(&SourceManifold::point(vec![0.0], 1.0)?, &PotentialPair::free(1), 1.0, 0)?.total();
    let r = 1.7;
    let circ = sigma_quadrature(&SourceManifold::circle([0.3, -0.2], r, 1.0)?, &PotentialPair::free(2), 1.0, 0)?.total();
    let e0 = 2.5;
    let mom = sigma_quadrature(&SourceManifold::point(vec![0.0, 0.0], 1.0)?, &PotentialPair::free(2), e0, 0)?.total();
    let errs = [(two - 2.0).abs(), (circ - 4.0 * PI * r).abs(), (mom - 2.0 * PI * e0.sqrt()).abs()];
    outcome(errs.iter().all(|&e| e <= 1e-8), format!("errors (two-point, circle, momentum circle)={}", sci(&errs)))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 12] = [
        ("1D measure convergence", criterion_1),
        ("scattering convergence", criterion_2),
        ("Liouville residual", criterion_3),
        ("energy-shell localization", criterion_4),
        ("incoming-region vanishing", criterion_5),
        ("source norm scaling", criterion_6),
        ("flow invariants", criterion_7),
        ("damping decay", criterion_8),
        ("WKB accuracy", criterion_9),
        ("Hessian asymptotics", criterion_10),
        ("Moyal identity", criterion_11),
        ("sigma totals", criterion_12),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {:>2} {}: {name}: {detail} [{secs:.1} s]", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of 12 passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
