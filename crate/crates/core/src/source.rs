//! The source manifold, the normal energy bundle over it and the
//! oscillating source term `S_h`.
//!
//! `N_E Gamma` is the set of `(z, xi)` with `z` on the manifold, `xi`
//! normal to it and `|xi| = sqrt(E0 - V1(z))`. Its canonical measure keeps
//! the base displacement and the part of the momentum displacement that is
//! orthogonal to both the tangent space and `xi`. In the cases handled here
//! this gives: counting measure for a point on the line, arclength per
//! branch for a curve in the plane, and the round measure of radius `|xi|`
//! on the momentum circle over a point in the plane.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::helmholtz::{weighted_norm, DiscreteField, Grid};
use crate::par;
use crate::potential_flow::{eval_hamiltonian, flow, PhasePoint, PotentialPair};
use crate::quad::gauss_legendre;
use crate::stats::{fit_line, LineFit};

/// Alternative parametrizations of the circle, used to test that the
/// bundle measure does not depend on the chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CircleChart {
    /// `theta = u`.
    Angle,
    /// `theta = u + eps sin u` with `|eps| < 1`.
    Warped { eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    Point { z: Vec<f64> },
    Circle { center: [f64; 2], radius: f64, chart: CircleChart },
    /// Open segment; the amplitude vanishes to second order at the ends.
    Segment { a: [f64; 2], b: [f64; 2] },
    /// Reserved for three dimensions, not implemented.
    Sphere { center: [f64; 3], radius: f64 },
}

/// The manifold `Gamma` with a constant amplitude (multiplied by a smooth
/// cutoff for segments).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceManifold {
    pub n: usize,
    pub kind: ManifoldKind,
    pub amplitude: f64,
}

/// A point of `Gamma` produced by a chart, with unit tangent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub z: Vec<f64>,
    pub tangent: Vec<Vec<f64>>,
    /// `|dz/du|` (1 for points).
    pub jacobian: f64,
    pub amplitude: f64,
}

impl SourceManifold {
    pub fn point(z: Vec<f64>, amplitude: f64) -> Result<Self> {
        let n = z.len();
        if n == 0 || n > 2 {
            return Err(Error::Unsupported(format!("point sources in dimension {n}")));
        }
        Ok(Self {
            n,
            kind: ManifoldKind::Point { z },
            amplitude,
        })
    }

    pub fn circle(center: [f64; 2], radius: f64, amplitude: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidInput("circle radius must be positive".into()));
        }
        Ok(Self {
            n: 2,
            kind: ManifoldKind::Circle {
                center,
                radius,
                chart: CircleChart::Angle,
            },
            amplitude,
        })
    }

    pub fn segment(a: [f64; 2], b: [f64; 2], amplitude: f64) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidInput("segment endpoints coincide".into()));
        }
        Ok(Self {
            n: 2,
            kind: ManifoldKind::Segment { a, b },
            amplitude,
        })
    }

    pub fn with_chart(mut self, chart: CircleChart) -> Result<Self> {
        match &mut self.kind {
            ManifoldKind::Circle { chart: c, .. } => {
                if let CircleChart::Warped { eps } = chart {
                    if eps.abs() >= 1.0 {
                        return Err(Error::InvalidInput("warped chart needs |eps| < 1".into()));
                    }
                }
                *c = chart;
                Ok(self)
            }
            _ => Err(Error::InvalidInput("charts can only be changed on circles".into())),
        }
    }

    /// Intrinsic dimension `d`.
    pub fn d(&self) -> usize {
        match self.kind {
            ManifoldKind::Point { .. } => 0,
            ManifoldKind::Circle { .. } | ManifoldKind::Segment { .. } => 1,
            ManifoldKind::Sphere { .. } => 2,
        }
    }

    fn unsupported(&self) -> Error {
        Error::Unsupported("sphere sources are reserved and not implemented".into())
    }

    /// Radius of a ball around the origin containing `Gamma`.
    pub fn bounding_radius(&self) -> f64 {
        match &self.kind {
            ManifoldKind::Point { z } => norm(z),
            ManifoldKind::Circle { center, radius, .. } => norm(center) + radius,
            ManifoldKind::Segment { a, b } => norm(a).max(norm(b)),
            ManifoldKind::Sphere { center, radius } => norm(center) + radius,
        }
    }

    /// Chart evaluation at parameter `u`.
    pub fn chart(&self, u: f64) -> Result<ChartPoint> {
        match &self.kind {
            ManifoldKind::Point { z } => Ok(ChartPoint {
                z: z.clone(),
                tangent: vec![],
                jacobian: 1.0,
                amplitude: self.amplitude,
            }),
            ManifoldKind::Circle { center, radius, chart } => {
                let (theta, dtheta) = match chart {
                    CircleChart::Angle => (u, 1.0),
                    CircleChart::Warped { eps } => (u + eps * u.sin(), 1.0 + eps * u.cos()),
                };
                let (s, c) = theta.sin_cos();
                Ok(ChartPoint {
                    z: vec![center[0] + radius * c, center[1] + radius * s],
                    tangent: vec![vec![-s, c]],
                    jacobian: radius * dtheta,
                    amplitude: self.amplitude,
                })
            }
            ManifoldKind::Segment { a, b } => {
                let d = [b[0] - a[0], b[1] - a[1]];
                let len = norm(&d);
                let cut = (4.0 * u * (1.0 - u)).max(0.0).powi(3);
                Ok(ChartPoint {
                    z: vec![a[0] + u * d[0], a[1] + u * d[1]],
                    tangent: vec![vec![d[0] / len, d[1] / len]],
                    jacobian: len,
                    amplitude: self.amplitude * cut,
                })
            }
            ManifoldKind::Sphere { .. } => Err(self.unsupported()),
        }
    }

    /// Unit normal for codimension-one manifolds (outward for circles).
    fn unit_normal(&self, z: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            ManifoldKind::Circle { center, .. } => {
                let v = [z[0] - center[0], z[1] - center[1]];
                let r = norm(&v);
                Some(vec![v[0] / r, v[1] / r])
            }
            ManifoldKind::Segment { a, b } => {
                let d = [b[0] - a[0], b[1] - a[1]];
                let len = norm(&d);
                Some(vec![-d[1] / len, d[0] / len])
            }
            ManifoldKind::Point { z } if z.len() == 1 => Some(vec![1.0]),
            _ => None,
        }
    }

    /// Nearest point of `Gamma` (of its closure for segments) to `x`.
    pub fn closest_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            ManifoldKind::Point { z } => Ok(z.clone()),
            ManifoldKind::Circle { center, radius, .. } => {
                let v = [x[0] - center[0], x[1] - center[1]];
                let r = norm(&v);
                if r == 0.0 {
                    return Ok(vec![center[0] + radius, center[1]]);
                }
                Ok(vec![center[0] + radius * v[0] / r, center[1] + radius * v[1] / r])
            }
            ManifoldKind::Segment { a, b } => {
                let d = [b[0] - a[0], b[1] - a[1]];
                let s = (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1])).clamp(0.0, 1.0);
                Ok(vec![a[0] + s * d[0], a[1] + s * d[1]])
            }
            ManifoldKind::Sphere { .. } => Err(self.unsupported()),
        }
    }

    /// Euclidean distance from `x` to `Gamma`.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let z = self.closest_point(x)?;
        Ok(dist(x, &z))
    }

    /// Approximate phase-space distance from `(x, xi)` to `N_E Gamma`,
    /// measured at the foot point of `x`.
    pub fn phase_distance_to_bundle(&self, pot: &PotentialPair, e0: f64, x: &[f64], xi: &[f64]) -> f64 {
        let z = match self.closest_point(x) {
            Ok(z) => z,
            Err(_) => return f64::INFINITY,
        };
        let gap = e0 - pot.v1(&z);
        if gap <= 0.0 {
            return f64::INFINITY;
        }
        let k = gap.sqrt();
        let dx2 = dist(x, &z).powi(2);
        let dxi2 = match self.unit_normal(&z) {
            Some(nrm) if self.d() + 1 == self.n => {
                let plus: f64 = xi.iter().zip(&nrm).map(|(a, b)| (a - k * b).powi(2)).sum();
                let minus: f64 = xi.iter().zip(&nrm).map(|(a, b)| (a + k * b).powi(2)).sum();
                plus.min(minus)
            }
            _ => (norm(xi) - k).powi(2),
        };
        (dx2 + dxi2).sqrt()
    }

    /// Quadrature for `int_Gamma g dsigma` as `(chart point, weight)` with
    /// roughly `spacing` between nodes.
    pub fn surface_nodes(&self, spacing: f64) -> Result<Vec<(ChartPoint, f64)>> {
        match &self.kind {
            ManifoldKind::Point { .. } => Ok(vec![(self.chart(0.0)?, 1.0)]),
            ManifoldKind::Circle { radius, .. } => {
                let m = ((2.0 * PI * radius / spacing).ceil() as usize).max(16);
                let du = 2.0 * PI / m as f64;
                (0..m)
                    .map(|i| {
                        let cp = self.chart(i as f64 * du)?;
                        let w = cp.jacobian * du;
                        Ok((cp, w))
                    })
                    .collect()
            }
            ManifoldKind::Segment { a, b } => {
                // The amplitude vanishes at both ends, so the midpoint rule
                // converges quickly.
                let len = dist(a, b);
                let m = ((len / spacing).ceil() as usize).max(16);
                let du = 1.0 / m as f64;
                (0..m)
                    .map(|i| {
                        let cp = self.chart((i as f64 + 0.5) * du)?;
                        let w = cp.jacobian * du;
                        Ok((cp, w))
                    })
                    .collect()
            }
            ManifoldKind::Sphere { .. } => Err(self.unsupported()),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Gaussian profile `S(y) = scale * exp(-|y|^2 / (2 width^2))` with
/// transform `S^(xi) = int exp(-i <y, xi>) S(y) dy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub scale: f64,
    pub width: f64,
}

impl Profile {
    pub fn gaussian(scale: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidInput("profile width must be positive".into()));
        }
        Ok(Self { scale, width })
    }

    pub fn s(&self, y: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|v| v * v).sum();
        self.scale * (-r2 / (2.0 * self.width * self.width)).exp()
    }

    /// Closed-form transform; real because the profile is even.
    pub fn s_hat(&self, xi: &[f64]) -> f64 {
        let n = xi.len() as i32;
        let r2: f64 = xi.iter().map(|v| v * v).sum();
        let w2 = self.width * self.width;
        self.scale * (2.0 * PI * w2).powf(n as f64 / 2.0) * (-w2 * r2 / 2.0).exp()
    }

    /// Radius beyond which `S` is below `1e-18` of its peak.
    pub fn cutoff_radius(&self) -> f64 {
        self.width * (2.0 * 18.0 * 10f64.ln()).sqrt()
    }
}

/// A point of `N_E Gamma` with the tangent frame of `Gamma` at `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalBundlePoint {
    pub z: Vec<f64>,
    pub xi: Vec<f64>,
    /// `+1` / `-1` for the two normal directions of a codimension-one
    /// manifold (outward / inward on circles, sign of `xi` on the line);
    /// `0` for the continuous fiber over a point in the plane.
    pub branch: i8,
    pub tangent: Vec<Vec<f64>>,
    /// Amplitude `A(z)`.
    pub amplitude: f64,
}

impl NormalBundlePoint {
    pub fn phase_point(&self) -> PhasePoint {
        PhasePoint::new(self.z.clone(), self.xi.clone())
    }

    /// Largest `|<xi, tau>|` over the tangent frame.
    pub fn orthogonality_residual(&self) -> f64 {
        self.tangent
            .iter()
            .map(|t| t.iter().zip(&self.xi).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// `| |xi|^2 - (E0 - V1(z)) |`.
    pub fn shell_residual(&self, pot: &PotentialPair, e0: f64) -> f64 {
        (eval_hamiltonian(pot, &self.phase_point()) - e0).abs()
    }
}

/// Quadrature rule for the canonical measure on `N_E Gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalBundleQuadrature {
    pub nodes: Vec<NormalBundlePoint>,
    pub weights: Vec<f64>,
}

impl NormalBundleQuadrature {
    pub fn total(&self) -> f64 {
        crate::stats::pairwise_sum(&self.weights)
    }

    /// Rows `z.., xi.., weight`.
    pub fn to_csv(&self) -> String {
        let n = self.nodes.first().map(|p| p.z.len()).unwrap_or(0);
        let mut out = String::new();
        for i in 0..n {
            out.push_str(&format!("z{i},"));
        }
        for i in 0..n {
            out.push_str(&format!("xi{i},"));
        }
        out.push_str("weight\n");
        for (p, w) in self.nodes.iter().zip(&self.weights) {
            for v in p.z.iter().chain(&p.xi) {
                out.push_str(&format!("{v:.16e},"));
            }
            out.push_str(&format!("{w:.16e}\n"));
        }
        out
    }
}

fn fiber_at(source: &SourceManifold, pot: &PotentialPair, e0: f64, cp: &ChartPoint, resolution: usize) -> Result<Vec<NormalBundlePoint>> {
    let gap = e0 - pot.v1(&cp.z);
    if gap <= 0.0 {
        return Err(Error::EmptyShell(format!("V1(z) = {} is not below E0 = {e0} at z = {:?}", pot.v1(&cp.z), cp.z)));
    }
    let k = gap.sqrt();
    let mk = |xi: Vec<f64>, branch: i8| NormalBundlePoint {
        z: cp.z.clone(),
        xi,
        branch,
        tangent: cp.tangent.clone(),
        amplitude: cp.amplitude,
    };
    if source.d() + 1 == source.n {
        let nrm = source.unit_normal(&cp.z).expect("codimension one has a normal");
        return Ok(vec![
            mk(nrm.iter().map(|v| k * v).collect(), 1),
            mk(nrm.iter().map(|v| -k * v).collect(), -1),
        ]);
    }
    // d = 0 in the plane: the whole momentum circle.
    let m = resolution.max(1);
    Ok((0..m)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / m as f64;
            mk(vec![k * a.cos(), k * a.sin()], 0)
        })
        .collect())
}

/// The fiber of `N_E Gamma` over `z`. Continuous fibers are sampled at
/// `resolution` equally spaced angles.
pub fn normal_energy_fiber(source: &SourceManifold, pot: &PotentialPair, e0: f64, z: &[f64], resolution: usize) -> Result<Vec<NormalBundlePoint>> {
    if z.len() != source.n {
        return Err(Error::InvalidInput("base point has the wrong dimension".into()));
    }
    let foot = source.closest_point(z)?;
    if dist(&foot, z) > 1e-9 {
        return Err(Error::InvalidInput(format!("{z:?} is not on the source manifold")));
    }
    let mut cp = match &source.kind {
        ManifoldKind::Point { .. } => source.chart(0.0)?,
        ManifoldKind::Circle { center, chart, .. } => {
            let theta = (z[1] - center[1]).atan2(z[0] - center[0]);
            let u = match chart {
                CircleChart::Angle => theta,
                CircleChart::Warped { eps } => invert_warp(theta, *eps),
            };
            source.chart(u)?
        }
        ManifoldKind::Segment { a, b } => {
            let d = [b[0] - a[0], b[1] - a[1]];
            let s = ((z[0] - a[0]) * d[0] + (z[1] - a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1]);
            source.chart(s)?
        }
        ManifoldKind::Sphere { .. } => return Err(source.unsupported()),
    };
    cp.z = z.to_vec();
    fiber_at(source, pot, e0, &cp, resolution)
}

fn invert_warp(theta: f64, eps: f64) -> f64 {
    let mut u = theta;
    for _ in 0..60 {
        let f = u + eps * u.sin() - theta;
        u -= f / (1.0 + eps * u.cos());
        if f.abs() < 1e-15 {
            break;
        }
    }
    u
}

/// Base node count of [`sigma_quadrature`] before refinement.
pub const SIGMA_BASE_NODES: usize = 64;

/// Quadrature for the canonical measure on `N_E Gamma`. Each refinement
/// level doubles the node count along every continuous direction.
pub fn sigma_quadrature(source: &SourceManifold, pot: &PotentialPair, e0: f64, refinement: u32) -> Result<NormalBundleQuadrature> {
    let m = SIGMA_BASE_NODES << refinement;
    let mut nodes = vec![];
    let mut weights = vec![];
    match &source.kind {
        ManifoldKind::Point { .. } => {
            let cp = source.chart(0.0)?;
            let fib = fiber_at(source, pot, e0, &cp, m)?;
            if source.n == 1 {
                // Counting measure on the two momenta.
                weights = vec![1.0; fib.len()];
            } else {
                let k = norm(&fib[0].xi);
                weights = vec![2.0 * PI * k / m as f64; fib.len()];
            }
            nodes = fib;
        }
        ManifoldKind::Circle { .. } => {
            let du = 2.0 * PI / m as f64;
            for i in 0..m {
                let cp = source.chart(i as f64 * du)?;
                for p in fiber_at(source, pot, e0, &cp, 1)? {
                    weights.push(cp.jacobian * du);
                    nodes.push(p);
                }
            }
        }
        ManifoldKind::Segment { .. } => {
            let (x, w) = gauss_legendre(m);
            for (xi, wi) in x.iter().zip(&w) {
                let u = 0.5 * (xi + 1.0);
                let cp = source.chart(u)?;
                for p in fiber_at(source, pot, e0, &cp, 1)? {
                    weights.push(cp.jacobian * 0.5 * wi);
                    nodes.push(p);
                }
            }
        }
        ManifoldKind::Sphere { .. } => return Err(source.unsupported()),
    }
    Ok(NormalBundleQuadrature { nodes, weights })
}

/// Grid samples of
/// `S_h(x) = h^{(1-n-d)/2} int_Gamma A(z) S((x - z) / h) dsigma(z)`.
pub fn synthesize_source(source: &SourceManifold, profile: &Profile, h: f64, grid: &Grid) -> Result<DiscreteField> {
    if grid.n != source.n {
        return Err(Error::InvalidInput("grid and source dimensions differ".into()));
    }
    grid.check_resolves(h)?;
    let d = source.d();
    let pref = h.powf((1.0 - source.n as f64 - d as f64) / 2.0);
    let cutoff = profile.cutoff_radius() * h;
    let nodes = source.surface_nodes(0.125 * h * profile.width)?;
    let values = match &source.kind {
        ManifoldKind::Point { z } => par::map_range(grid.len(), |i| {
            let x = grid.point(i);
            let y: Vec<f64> = x.iter().zip(z).map(|(a, b)| (a - b) / h).collect();
            Complex64::new(pref * source.amplitude * profile.s(&y), 0.0)
        }),
        ManifoldKind::Circle { center, radius, chart } => {
            // Angular window of the nodes that can contribute.
            let warped = !matches!(chart, CircleChart::Angle);
            let m = nodes.len();
            par::map_range(grid.len(), |i| {
                let x = grid.point(i);
                let rho = dist(&x, center);
                if (rho - radius).abs() > cutoff {
                    return Complex64::new(0.0, 0.0);
                }
                let mut acc = 0.0;
                let mut add = |j: usize| {
                    let (cp, w) = &nodes[j % m];
                    let y: Vec<f64> = x.iter().zip(&cp.z).map(|(a, b)| (a - b) / h).collect();
                    acc += w * cp.amplitude * profile.s(&y);
                };
                if warped || rho < 1e-12 {
                    (0..m).for_each(&mut add);
                } else {
                    let s = (cutoff / (2.0 * (radius * rho).sqrt())).min(1.0);
                    let half = 2.0 * s.asin();
                    let theta = (x[1] - center[1]).atan2(x[0] - center[0]).rem_euclid(2.0 * PI);
                    let du = 2.0 * PI / m as f64;
                    let lo = ((theta - half) / du).floor() as i64 - 1;
                    let hi = ((theta + half) / du).ceil() as i64 + 1;
                    if hi - lo >= m as i64 {
                        (0..m).for_each(&mut add);
                    } else {
                        for j in lo..=hi {
                            add(j.rem_euclid(m as i64) as usize);
                        }
                    }
                }
                Complex64::new(pref * acc, 0.0)
            })
        }
        ManifoldKind::Segment { .. } => par::map_range(grid.len(), |i| {
            let x = grid.point(i);
            match source.distance(&x) {
                Ok(dd) if dd > cutoff => return Complex64::new(0.0, 0.0),
                _ => {}
            }
            let mut acc = 0.0;
            for (cp, w) in &nodes {
                let y: Vec<f64> = x.iter().zip(&cp.z).map(|(a, b)| (a - b) / h).collect();
                let r2: f64 = y.iter().map(|v| v * v).sum();
                if r2.sqrt() * h <= cutoff {
                    acc += w * cp.amplitude * profile.s(&y);
                }
            }
            Complex64::new(pref * acc, 0.0)
        }),
        ManifoldKind::Sphere { .. } => return Err(source.unsupported()),
    };
    Ok(DiscreteField {
        values,
        grid: grid.clone(),
        h,
    })
}

/// Grid tightly enclosing the support of `S_h` with spacing `h / 4`.
pub fn source_grid(source: &SourceManifold, profile: &Profile, h: f64) -> Result<Grid> {
    let reach = source.bounding_radius() + profile.cutoff_radius() * h + h;
    Grid::new(source.n, reach, 0.25 * h, None)
}

/// Fit `log ||S_h||_{L^{2,delta}}` against `log h`.
pub fn weighted_norm_fit(source: &SourceManifold, profile: &Profile, delta: f64, h_list: &[f64]) -> Result<LineFit> {
    if h_list.len() < 4 {
        return Err(Error::InvalidInput("the norm fit needs at least four values of h".into()));
    }
    let mut lx = vec![];
    let mut ly = vec![];
    for &h in h_list {
        let grid = source_grid(source, profile, h)?;
        let s = synthesize_source(source, profile, h, &grid)?;
        lx.push(h.ln());
        ly.push(weighted_norm(&s, delta).ln());
    }
    Ok(fit_line(&lx, &ly))
}

/// Gaussian bump `c * exp(-(x - m)^T P (x - m) / 2)` in position space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBump {
    pub center: Vec<f64>,
    /// Row-major `n x n` symmetric positive definite precision matrix.
    pub precision: Vec<f64>,
    pub coefficient: f64,
}

impl SpatialBump {
    pub fn isotropic(center: Vec<f64>, width: f64, coefficient: f64) -> Self {
        let n = center.len();
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            p[i * n + i] = 1.0 / (width * width);
        }
        Self {
            center,
            precision: p,
            coefficient,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.center.len();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += (x[i] - self.center[i]) * self.precision[i * n + j] * (x[j] - self.center[j]);
            }
        }
        self.coefficient * (-0.5 * q).exp()
    }

    /// Half-width of an axis-aligned box outside which the bump is below
    /// `1e-16` of its peak.
    fn box_half_width(&self) -> Vec<f64> {
        let n = self.center.len();
        let p = nalgebra::DMatrix::from_row_slice(n, n, &self.precision);
        let cov = p.try_inverse().unwrap_or_else(|| nalgebra::DMatrix::identity(n, n));
        let r = (2.0 * 16.0 * 10f64.ln()).sqrt();
        (0..n).map(|i| r * cov[(i, i)].sqrt()).collect()
    }
}

/// Both sides of the tube change of variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubularCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub relerr: f64,
}

/// Compare `int f dx` with
/// `2^{n-d} int_0^{t_max} int f(x(t, z, xi)) t^{n-d-1} |xi| dsigma dt`.
pub fn verify_tubular_change_of_variables(
    source: &SourceManifold,
    pot: &PotentialPair,
    e0: f64,
    f: &SpatialBump,
    t_max: f64,
    refinement: u32,
) -> Result<TubularCheck> {
    let n = source.n;
    let d = source.d();
    if f.coefficient == 0.0 {
        return Ok(TubularCheck {
            lhs: 0.0,
            rhs: 0.0,
            relerr: 0.0,
        });
    }
    let quad = sigma_quadrature(source, pot, e0, refinement)?;
    let tol = 1e-12;
    // Support check on the tube boundary: at Gamma and at t = t_max.
    let peak = f.coefficient.abs();
    for node in &quad.nodes {
        let end = flow(pot, &node.phase_point(), t_max, tol)?;
        if f.eval(&node.z).abs() > 1e-10 * peak || f.eval(&end.x).abs() > 1e-10 * peak {
            return Err(Error::InvalidInput("test function leaks outside the tube".into()));
        }
    }
    // Left side by a tensor grid over the bump's box.
    let half = f.box_half_width();
    let pts_per_axis = if n == 1 { 4001 } else { 401 };
    let (gx, gw) = gauss_legendre(pts_per_axis.min(200));
    let panels = if n == 1 { 20 } else { 4 };
    let axis_nodes: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|k| {
            let a = f.center[k] - half[k];
            let w = 2.0 * half[k] / panels as f64;
            let mut v = vec![];
            for p in 0..panels {
                let lo = a + p as f64 * w;
                for (x, wt) in gx.iter().zip(&gw) {
                    v.push((lo + 0.5 * w * (x + 1.0), 0.5 * w * wt));
                }
            }
            v
        })
        .collect();
    let lhs = if n == 1 {
        axis_nodes[0].iter().map(|(x, w)| w * f.eval(&[*x])).sum::<f64>()
    } else {
        let rows = par::map_slice(&axis_nodes[0], |(x0, w0)| {
            axis_nodes[1].iter().map(|(x1, w1)| w0 * w1 * f.eval(&[*x0, *x1])).sum::<f64>()
        });
        crate::stats::pairwise_sum(&rows)
    };
    // Right side: Gauss-Legendre panels in t along every node's ray.
    let t_panels = 64usize << refinement;
    let (tx, tw) = gauss_legendre(8);
    let expo = (n - d) as i32 - 1;
    let contrib = par::map_range(quad.nodes.len(), |j| -> Result<f64> {
        let node = &quad.nodes[j];
        let k = norm(&node.xi);
        let mut st = crate::potential_flow::RayStepper::new(pot, &node.phase_point(), tol);
        let mut acc = 0.0;
        let dt = t_max / t_panels as f64;
        for p in 0..t_panels {
            let lo = p as f64 * dt;
            for (x, w) in tx.iter().zip(&tw) {
                let t = lo + 0.5 * dt * (x + 1.0);
                st.advance_to(t)?;
                acc += 0.5 * dt * w * f.eval(st.x()) * t.powi(expo);
            }
        }
        Ok(acc * k * quad.weights[j])
    });
    let mut parts = vec![];
    for c in contrib {
        parts.push(c?);
    }
    let rhs = 2f64.powi((n - d) as i32) * crate::stats::pairwise_sum(&parts);
    let relerr = (lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE);
    Ok(TubularCheck { lhs, rhs, relerr })
}

/// Diagnostics of the tube map on a test lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeDiagnostics {
    pub injective: bool,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub sandwich_ok: bool,
}

/// Check injectivity and the distance sandwich
/// `2 gamma_m t <= dist(x(t, z, xi), Gamma) <= 2 gamma_M t` for
/// `0 < t <= t_max` on a lattice of rays.
pub fn tube_diagnostics(source: &SourceManifold, pot: &PotentialPair, e0: f64, t_max: f64) -> Result<TubeDiagnostics> {
    // At refinement 0 every family has at most 128 nodes, which keeps the
    // pairwise injectivity test cheap. Subsampling would be unsafe: circle
    // nodes alternate between the two branches.
    let quad = sigma_quadrature(source, pot, e0, 0)?;
    let steps = 24usize;
    let tol = 1e-11;
    let kmin = quad.nodes.iter().map(|p| norm(&p.xi)).fold(f64::INFINITY, f64::min);
    let kmax = quad.nodes.iter().map(|p| norm(&p.xi)).fold(0.0, f64::max);
    let mut images: Vec<(usize, Vec<f64>)> = vec![];
    let mut gmin = f64::INFINITY;
    let mut gmax = 0.0f64;
    let mut foot_ok = true;
    for (j, node) in quad.nodes.iter().enumerate() {
        let mut st = crate::potential_flow::RayStepper::new(pot, &node.phase_point(), tol);
        for s in 1..=steps {
            let t = t_max * s as f64 / steps as f64;
            st.advance_to(t)?;
            let x = st.x().to_vec();
            let foot = source.closest_point(&x)?;
            let dd = dist(&x, &foot);
            let g = dd / (2.0 * t);
            gmin = gmin.min(g);
            gmax = gmax.max(g);
            if source.d() > 0 && dist(&foot, &node.z) > 0.5 * dd {
                foot_ok = false;
            }
            images.push((j, x));
        }
    }
    let mut distinct = true;
    'outer: for a in 0..images.len() {
        for b in (a + 1)..images.len() {
            if dist(&images[a].1, &images[b].1) < 1e-9 {
                distinct = false;
                break 'outer;
            }
        }
    }
    let sandwich_ok = gmin >= 0.5 * kmin && gmax <= 2.0 * kmax;
    Ok(TubeDiagnostics {
        injective: distinct && foot_ok,
        gamma_min: gmin,
        gamma_max: gmax,
        sandwich_ok,
    })
}

/// Largest dyadic `tau <= 0.5` such that the tube map is injective and
/// satisfies the distance sandwich on `(0, 3 tau]`.
pub fn tau0(source: &SourceManifold, pot: &PotentialPair, e0: f64) -> Result<f64> {
    let mut tau = 0.5;
    for _ in 0..30 {
        let diag = tube_diagnostics(source, pot, e0, 3.0 * tau)?;
        if diag.injective && diag.sandwich_ok {
            return Ok(tau);
        }
        tau *= 0.5;
    }
    Err(Error::InvalidInput("no admissible tube width found".into()))
}
