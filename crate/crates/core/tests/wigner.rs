use std::f64::consts::PI;

use num_complex::Complex64;
use semilab_core::helmholtz::{DiscreteField, Grid};
use semilab_core::measure::Observable;
use semilab_core::wigner::{incoming_mass, weyl_pairing, weyl_pairing_direct, wigner_transform, IncomingRegion};

/// Sum of two packets on a 64^n grid with h = 1/16, dx = h/4.
fn moyal_field(n: usize) -> DiscreteField {
    let h = 1.0 / 16.0;
    let grid = Grid::new(n, 0.5, h / 4.0, None).unwrap();
    assert!(grid.npts <= 65);
    DiscreteField::from_fn(&grid, h, |x| {
        let p1: f64 = x.iter().map(|v| (v - 0.1) * (v - 0.1)).sum();
        let p2: f64 = x.iter().map(|v| (v + 0.15) * (v + 0.15)).sum();
        let ph1: f64 = x.iter().map(|v| 1.0 * v).sum::<f64>() / h;
        let ph2: f64 = x.iter().map(|v| -0.6 * v).sum::<f64>() / h;
        Complex64::from_polar((-p1 / (2.0 * 0.07 * 0.07)).exp(), ph1)
            + Complex64::from_polar(0.7 * (-p2 / (2.0 * 0.06 * 0.06)).exp(), ph2)
    })
}

#[test]
fn moyal_identity_1d() {
    let u = moyal_field(1);
    let q = Observable::new(1)
        .with_bump(&[0.05], &[0.8], 0.2, 0.5, 1.0)
        .unwrap()
        .with_bump(&[-0.1], &[-0.5], 0.15, 0.4, -0.7)
        .unwrap();
    let a = weyl_pairing(&q, &u).unwrap();
    let b = weyl_pairing_direct(&q, &u).unwrap();
    assert!((a - b).abs() <= 1e-6 * u.norm_sqr() * q.sup_abs(), "{a} vs {b}");
}

#[test]
fn moyal_identity_2d() {
    let u = moyal_field(2);
    let q = Observable::new(2).with_bump(&[0.0, 0.05], &[0.7, 0.5], 0.2, 0.5, 1.0).unwrap();
    let a = weyl_pairing(&q, &u).unwrap();
    let b = weyl_pairing_direct(&q, &u).unwrap();
    assert!((a - b).abs() <= 1e-6 * u.norm_sqr() * q.sup_abs(), "{a} vs {b}");
}

#[test]
fn coherent_state_gaussian_pairing() {
    let h = 1.0 / 32.0;
    let (x0, xi0) = (0.2, 1.0);
    let grid = Grid::new(1, 2.0, h / 4.0, None).unwrap();
    let u = DiscreteField::from_fn(&grid, h, |x| {
        let a = (PI * h).powf(-0.25) * (-(x[0] - x0).powi(2) / (2.0 * h)).exp();
        Complex64::from_polar(a, xi0 * x[0] / h)
    });
    let (a, b, sx, sk) = (0.3, 0.9, 0.25, 0.3);
    let q = Observable::new(1).with_bump(&[a], &[b], sx, sk, 1.0).unwrap();
    // W has variance h/2 per axis; convolve with the bump.
    let conv = |s: f64, d: f64| (s * s / (s * s + h / 2.0)).sqrt() * (-d * d / (2.0 * (s * s + h / 2.0))).exp();
    let want = conv(sx, x0 - a) * conv(sk, xi0 - b);
    let got = weyl_pairing(&q, &u).unwrap();
    assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
}

#[test]
fn flat_observable_gives_the_norm() {
    let u = moyal_field(1);
    let q = Observable::new(1).with_bump(&[0.0], &[0.0], 40.0, 40.0, 1.0).unwrap();
    // The momentum window is too small for this bump; pair over the lattice instead.
    assert!(weyl_pairing(&q, &u).is_err());
    let w = wigner_transform(&u).unwrap();
    assert!((w.total() - u.norm_sqr()).abs() <= 1e-6 * u.norm_sqr());
}

#[test]
fn even_real_field_has_even_wigner() {
    let h = 1.0 / 16.0;
    let grid = Grid::new(1, 1.0, h / 4.0, None).unwrap();
    let u = DiscreteField::from_fn(&grid, h, |x| Complex64::new((-x[0] * x[0] / 0.02).exp(), 0.0));
    let q = Observable::new(1)
        .with_bump(&[0.1], &[0.5], 0.2, 0.3, 1.0)
        .unwrap()
        .with_bump(&[0.1], &[-0.5], 0.2, 0.3, -1.0)
        .unwrap();
    assert!(weyl_pairing(&q, &u).unwrap().abs() <= 1e-12);
}

#[test]
fn conjugation_swaps_incoming_and_outgoing() {
    let h = 1.0 / 16.0;
    let grid = Grid::new(1, 4.0, h / 4.0, None).unwrap();
    let u = DiscreteField::from_fn(&grid, h, |x| Complex64::from_polar((-(x[0] - 2.0).powi(2) / 0.1).exp(), x[0] / h));
    let region = IncomingRegion::new(1.0, 0.5, 0.0).unwrap();
    let inc = incoming_mass(&u, &region, None).unwrap();
    let swapped = incoming_mass(&u.conj(), &region, None).unwrap();
    assert!(inc <= 1e-8 * u.norm_sqr(), "{inc} {swapped} {}", u.norm_sqr());
    assert!(swapped >= 0.9 * u.norm_sqr());
}
