use std::f64::consts::PI;

use semilab_core::helmholtz::Grid;
use semilab_core::potential_flow::{Potential, PotentialPair};
use semilab_core::source::*;
use semilab_core::Error;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let m = m + m % 2;
    let dx = (b - a) / m as f64;
    let mut acc = f(a) + f(b);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * dx);
    }
    acc * dx / 3.0
}

fn well_at_origin(n: usize, depth: f64) -> PotentialPair {
    let v1 = Potential::zero(n).with_gaussian(-depth, &vec![0.0; n], 1.0).unwrap();
    PotentialPair::new(v1, Potential::zero(n), 1.0).unwrap()
}

#[test]
fn fiber_examples() {
    let free1 = PotentialPair::free(1);
    let point = SourceManifold::point(vec![0.0], 1.0).unwrap();
    let fib = normal_energy_fiber(&point, &free1, 1.0, &[0.0], 8).unwrap();
    let mut xis: Vec<f64> = fib.iter().map(|p| p.xi[0]).collect();
    xis.sort_by(f64::total_cmp);
    assert_eq!(xis, vec![-1.0, 1.0]);

    let free2 = PotentialPair::free(2);
    let circle = SourceManifold::circle([0.0, 0.0], 1.5, 1.0).unwrap();
    let fib = normal_energy_fiber(&circle, &free2, 1.0, &[1.5, 0.0], 8).unwrap();
    assert_eq!(fib.len(), 2);
    assert!(fib.iter().any(|p| (p.xi[0] - 1.0).abs() < 1e-15 && p.xi[1].abs() < 1e-15));
    assert!(fib.iter().any(|p| (p.xi[0] + 1.0).abs() < 1e-15 && p.xi[1].abs() < 1e-15));

    let pot = well_at_origin(2, 0.25);
    let point2 = SourceManifold::point(vec![0.0, 0.0], 1.0).unwrap();
    let fib = normal_energy_fiber(&point2, &pot, 1.0, &[0.0, 0.0], 37).unwrap();
    assert_eq!(fib.len(), 37);
    for p in &fib {
        let k2: f64 = p.xi.iter().map(|v| v * v).sum();
        assert!((k2 - 1.25).abs() < 1e-12);
    }

    assert!(matches!(
        normal_energy_fiber(&point, &well_at_origin(1, -2.0), 1.0, &[0.0], 8),
        Err(Error::EmptyShell(_))
    ));
}

#[test]
fn sigma_totals_and_refinement() {
    let free1 = PotentialPair::free(1);
    let free2 = PotentialPair::free(2);
    let point = SourceManifold::point(vec![0.0], 1.0).unwrap();
    assert_eq!(sigma_quadrature(&point, &free1, 1.0, 0).unwrap().total(), 2.0);

    let r = 1.3;
    let circle = SourceManifold::circle([0.2, -0.1], r, 1.0).unwrap();
    for level in 0..3 {
        let t = sigma_quadrature(&circle, &free2, 1.0, level).unwrap().total();
        assert!((t - 4.0 * PI * r).abs() < 1e-10);
    }

    let point2 = SourceManifold::point(vec![0.0, 0.0], 1.0).unwrap();
    let t = sigma_quadrature(&point2, &free2, 2.0, 1).unwrap().total();
    assert!((t - 2.0 * PI * 2f64.sqrt()).abs() < 1e-10);

    // Total length of a segment is unaffected by the amplitude cutoff.
    let seg = SourceManifold::segment([-1.0, 0.0], [1.0, 1.0], 1.0).unwrap();
    let a = sigma_quadrature(&seg, &free2, 1.0, 0).unwrap().total();
    let b = sigma_quadrature(&seg, &free2, 1.0, 1).unwrap().total();
    assert!((a - 2.0 * 5f64.sqrt()).abs() < 1e-10);
    assert!((a - b).abs() <= 1e-6 * a);
}

#[test]
fn sigma_total_is_chart_independent() {
    let pot = PotentialPair::free(2);
    let a = SourceManifold::circle([0.0, 0.0], 2.0, 1.0).unwrap();
    let b = a.clone().with_chart(CircleChart::Warped { eps: 0.4 }).unwrap();
    let ta = sigma_quadrature(&a, &pot, 1.0, 0).unwrap().total();
    let tb = sigma_quadrature(&b, &pot, 1.0, 0).unwrap().total();
    assert!((ta - tb).abs() < 1e-8, "{ta} vs {tb}");
}

#[test]
fn bundle_nodes_satisfy_residual_bounds() {
    let v1 = Potential::zero(2).with_gaussian(-0.3, &[0.5, 0.2], 0.8).unwrap();
    let pot = PotentialPair::new(v1, Potential::zero(2), 1.0).unwrap();
    let sources = [
        SourceManifold::point(vec![0.1, 0.0], 1.0).unwrap(),
        SourceManifold::circle([0.0, 0.0], 1.0, 1.0).unwrap(),
        SourceManifold::circle([0.0, 0.0], 1.0, 1.0)
            .unwrap()
            .with_chart(CircleChart::Warped { eps: 0.3 })
            .unwrap(),
        SourceManifold::segment([-1.0, -0.5], [1.0, 0.5], 1.0).unwrap(),
    ];
    for s in &sources {
        let q = sigma_quadrature(s, &pot, 1.0, 0).unwrap();
        assert!(q.weights.iter().all(|w| *w > 0.0));
        for p in &q.nodes {
            assert!(p.orthogonality_residual() <= 1e-10);
            assert!(p.shell_residual(&pot, 1.0) <= 1e-10);
        }
    }
}

#[test]
fn profile_transform_matches_quadrature() {
    let prof = Profile::gaussian(1.3, 0.7).unwrap();
    for xi in [0.0, 0.5, 1.0, 2.5] {
        let num = simpson(|y| prof.s(&[y]) * (y * xi).cos(), -12.0, 12.0, 4000);
        assert!((num - prof.s_hat(&[xi])).abs() < 1e-6);
    }
    // Separable in two dimensions.
    let one = simpson(|y| prof.s(&[y]) / prof.scale * (0.8 * y).cos(), -12.0, 12.0, 4000);
    let two = prof.scale * one * simpson(|y| prof.s(&[y]) / prof.scale * (0.3 * y).cos(), -12.0, 12.0, 4000);
    assert!((two - prof.s_hat(&[0.8, 0.3])).abs() < 1e-6);
}

#[test]
fn point_source_is_the_scaled_profile() {
    let h = 1.0 / 32.0;
    let prof = Profile::gaussian(1.0, 1.0).unwrap();
    let src = SourceManifold::point(vec![0.3, -0.2], 2.0).unwrap();
    let grid = Grid::new(2, 0.6, h / 4.0, None).unwrap();
    let s = synthesize_source(&src, &prof, h, &grid).unwrap();
    let pref = h.powf(-0.5);
    let mut best = (0, 0.0);
    for (i, v) in s.values.iter().enumerate() {
        let x = grid.point(i);
        let y = [(x[0] - 0.3) / h, (x[1] + 0.2) / h];
        assert!((v.re - pref * 2.0 * prof.s(&y)).abs() < 1e-12);
        if v.norm() > best.1 {
            best = (i, v.norm());
        }
    }
    let peak = grid.point(best.0);
    assert!((peak[0] - 0.3).abs() <= grid.dx && (peak[1] + 0.2).abs() <= grid.dx);

    let coarse = Grid::new(2, 0.6, h / 2.0, None).unwrap();
    assert!(matches!(synthesize_source(&src, &prof, h, &coarse), Err(Error::Resolution(_))));
}

#[test]
fn circle_source_matches_angular_quadrature() {
    let h = 1.0 / 16.0;
    let r = 1.0;
    let prof = Profile::gaussian(1.0, 1.0).unwrap();
    let src = SourceManifold::circle([0.0, 0.0], r, 1.5).unwrap();
    let grid = Grid::new(2, 1.4, h / 4.0, None).unwrap();
    let s = synthesize_source(&src, &prof, h, &grid).unwrap();
    let oracle = |x: &[f64]| {
        let g = |th: f64| {
            let y = [(x[0] - r * th.cos()) / h, (x[1] - r * th.sin()) / h];
            1.5 * prof.s(&y) * r
        };
        simpson(g, 0.0, 2.0 * PI, 200_000) / h
    };
    for idx in [grid.len() / 2 + 3 * grid.npts / 4, 5 * grid.npts + 7, grid.len() / 3] {
        let x = grid.point(idx);
        let want = oracle(&x);
        assert!((s.values[idx].re - want).abs() < 1e-6, "{x:?}: {} vs {want}", s.values[idx].re);
    }

    // Linear in the amplitude.
    let src2 = SourceManifold::circle([0.0, 0.0], r, 3.0).unwrap();
    let s2 = synthesize_source(&src2, &prof, h, &grid).unwrap();
    for (a, b) in s.values.iter().zip(&s2.values) {
        assert!((2.0 * a - b).norm() <= 1e-12 * (1.0 + b.norm()));
    }
}

#[test]
fn point_source_norm_scales_like_sqrt_h() {
    let prof = Profile::gaussian(1.0, 1.0).unwrap();
    let src = SourceManifold::point(vec![0.0], 1.0).unwrap();
    let hs = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
    let fit = weighted_norm_fit(&src, &prof, 0.0, &hs).unwrap();
    assert!((fit.slope - 0.5).abs() < 0.05, "{fit:?}");

    let doubled = Profile::gaussian(2.0, 1.0).unwrap();
    let fit2 = weighted_norm_fit(&src, &doubled, 0.0, &hs).unwrap();
    assert!((fit2.slope - fit.slope).abs() < 1e-12);
    assert!((fit2.intercept - fit.intercept - 2f64.ln()).abs() < 1e-12);

    assert!(matches!(weighted_norm_fit(&src, &prof, 0.0, &hs[..3]), Err(Error::InvalidInput(_))));
}

#[test]
fn tube_change_of_variables_in_one_dimension() {
    let pot = PotentialPair::free(1);
    let src = SourceManifold::point(vec![0.0], 1.0).unwrap();
    let f = SpatialBump::isotropic(vec![0.5], 0.05, 1.0);
    let c = verify_tubular_change_of_variables(&src, &pot, 1.0, &f, 0.5, 0).unwrap();
    assert!(c.relerr <= 1e-6, "{c:?}");

    let zero = SpatialBump::isotropic(vec![0.5], 0.05, 0.0);
    let c = verify_tubular_change_of_variables(&src, &pot, 1.0, &zero, 0.5, 0).unwrap();
    assert_eq!((c.lhs, c.rhs, c.relerr), (0.0, 0.0, 0.0));

    let leaking = SpatialBump::isotropic(vec![0.1], 0.2, 1.0);
    assert!(verify_tubular_change_of_variables(&src, &pot, 1.0, &leaking, 0.5, 0).is_err());
}

#[test]
fn thin_tube_error_is_linear_in_the_width() {
    let pot = PotentialPair::free(2);
    let r = 1.0;
    let src = SourceManifold::circle([0.0, 0.0], r, 1.0).unwrap();
    let mut cs = vec![];
    for t_max in [0.1, 0.05] {
        // Centered mid-tube on the outward side. The tangential width keeps
        // the ellipse away from the curved outer boundary of the tube.
        let sr = t_max / 7.0;
        let st = (t_max / 40.0f64).sqrt();
        let f = SpatialBump {
            center: vec![r + t_max, 0.0],
            precision: vec![1.0 / (sr * sr), 0.0, 0.0, 1.0 / (st * st)],
            coefficient: 1.0,
        };
        let c = verify_tubular_change_of_variables(&src, &pot, 1.0, &f, t_max, 3).unwrap();
        cs.push(c.relerr / t_max);
    }
    assert!((cs[0] / cs[1] - 1.0).abs() < 0.3, "{cs:?}");
}

#[test]
fn tube_width_examples() {
    let free1 = PotentialPair::free(1);
    let point = SourceManifold::point(vec![0.0], 1.0).unwrap();
    assert_eq!(tau0(&point, &free1, 1.0).unwrap(), 0.5);

    let free2 = PotentialPair::free(2);
    let circle = SourceManifold::circle([0.0, 0.0], 1.0, 1.0).unwrap();
    assert_eq!(tau0(&circle, &free2, 1.0).unwrap(), 0.125);
    let d = tube_diagnostics(&circle, &free2, 1.0, 0.375).unwrap();
    assert!(d.injective && d.sandwich_ok);
    assert!(d.gamma_min > 0.0 && d.gamma_min <= d.gamma_max);
}
