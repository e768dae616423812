//! Short-time WKB construction for `exp(-it(H_h - E_h)/h)` applied to
//! `f(x) e^{i<x, xi>/h}`, a split-step reference propagator, and the
//! stationary-point Hessian of the source phase.
//!
//! Characteristics are integrated with a fixed number of RK4 steps so that
//! everything computed from them is a smooth function of `(t, x, xi)` and can
//! be differentiated numerically.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::helmholtz::{DiscreteField, Grid};
use crate::ode::{rk4_fixed, System};
use crate::par;
use crate::potential_flow::{flow, EnergySpec, PhasePoint, PotentialPair, DEFAULT_TOL};
use crate::quad::gauss_legendre;
use crate::source::{ManifoldKind, SourceManifold};
use crate::stats::fit_order;

/// Characteristic equations with the variational matrices
/// `X = dx/dy`, `Xi = dxi/dy`, the action `int |xi|^2` and `int V2`.
/// State layout: `x, xi, X (row-major), Xi (row-major), action, damping`.
struct CharSystem<'a> {
    pot: &'a PotentialPair,
}

impl System for CharSystem<'_> {
    fn dim(&self) -> usize {
        let n = self.pot.n;
        2 * n + 2 * n * n + 2
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.pot.n;
        let nn = n * n;
        let x = &y[..n];
        let xi = &y[n..2 * n];
        let xm = &y[2 * n..2 * n + nn];
        let xim = &y[2 * n + nn..2 * n + 2 * nn];
        let mut g = [0.0; 2];
        let mut hs = [0.0; 4];
        self.pot.grad_v1(x, &mut g[..n]);
        self.pot.v1.hessian(x, &mut hs[..nn]);
        for i in 0..n {
            dy[i] = 2.0 * xi[i];
            dy[n + i] = -g[i];
        }
        for i in 0..nn {
            dy[2 * n + i] = 2.0 * xim[i];
        }
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += hs[i * n + k] * xm[k * n + j];
                }
                dy[2 * n + nn + i * n + j] = -acc;
            }
        }
        dy[2 * n + 2 * nn] = xi.iter().map(|v| v * v).sum();
        dy[2 * n + 2 * nn + 1] = self.pot.v2(x);
    }
}

/// Numerical settings of the characteristic solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WkbConfig {
    /// RK4 steps per characteristic, independent of its length.
    pub rk_steps: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for WkbConfig {
    fn default() -> Self {
        Self {
            rk_steps: 200,
            newton_tol: 1e-13,
            max_newton: 40,
        }
    }
}

/// End point of the characteristic from `(y, xi)` after time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristic {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    /// `dx/dy`, row-major.
    pub jac: Vec<f64>,
    /// `int_0^t |xi(s)|^2 ds`.
    pub action: f64,
    /// `int_0^t V2(x(s)) ds`.
    pub damping: f64,
}

impl Characteristic {
    pub fn det_jac(&self) -> f64 {
        det(&self.jac, self.y.len())
    }
}

fn det(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        _ => m[0] * m[3] - m[1] * m[2],
    }
}

fn solve_small(m: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    match b.len() {
        1 => (m[0] != 0.0).then(|| vec![b[0] / m[0]]),
        _ => {
            let d = m[0] * m[3] - m[1] * m[2];
            (d != 0.0).then(|| vec![(m[3] * b[0] - m[1] * b[1]) / d, (m[0] * b[1] - m[2] * b[0]) / d])
        }
    }
}

/// Integrate the characteristic from `(y, xi)` over `[0, t]`.
pub fn shoot(pot: &PotentialPair, y: &[f64], xi: &[f64], t: f64, cfg: &WkbConfig) -> Characteristic {
    let n = pot.n;
    let nn = n * n;
    let sys = CharSystem { pot };
    let mut s0 = vec![0.0; sys.dim()];
    s0[..n].copy_from_slice(y);
    s0[n..2 * n].copy_from_slice(xi);
    for i in 0..n {
        s0[2 * n + i * n + i] = 1.0;
    }
    let s = rk4_fixed(&sys, &s0, t, cfg.rk_steps);
    Characteristic {
        y: y.to_vec(),
        x: s[..n].to_vec(),
        xi: s[n..2 * n].to_vec(),
        jac: s[2 * n..2 * n + nn].to_vec(),
        action: s[2 * n + 2 * nn],
        damping: s[2 * n + 2 * nn + 1],
    }
}

/// Solve `xbar(t, y, xi) = x` for `y` by damped Newton, starting from
/// `guess` or `x - 2 t xi`.
pub fn backward_characteristic(
    pot: &PotentialPair,
    t: f64,
    x: &[f64],
    xi: &[f64],
    guess: Option<&[f64]>,
    cfg: &WkbConfig,
) -> Result<Characteristic> {
    let n = pot.n;
    if x.len() != n || xi.len() != n {
        return Err(Error::InvalidInput("point has the wrong dimension".into()));
    }
    let mut y: Vec<f64> = match guess {
        Some(g) => g.to_vec(),
        None => x.iter().zip(xi).map(|(a, b)| a - 2.0 * t * b).collect(),
    };
    let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut c = shoot(pot, &y, xi, t, cfg);
    let resid = |c: &Characteristic| c.x.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut r = resid(&c);
    for _ in 0..cfg.max_newton {
        if r <= cfg.newton_tol * scale {
            return Ok(c);
        }
        let rhs: Vec<f64> = c.x.iter().zip(x).map(|(a, b)| b - a).collect();
        let step = solve_small(&c.jac, &rhs)
            .ok_or_else(|| Error::NewtonDivergence(format!("singular flow Jacobian at t = {t}")))?;
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = y.iter().zip(&step).map(|(a, b)| a + lambda * b).collect();
            let ct = shoot(pot, &trial, xi, t, cfg);
            let rt = resid(&ct);
            if rt < r || lambda < 1e-4 {
                y = trial;
                c = ct;
                r = rt;
                break;
            }
            lambda *= 0.5;
        }
    }
    if r <= 1e3 * cfg.newton_tol * scale {
        return Ok(c);
    }
    Err(Error::NewtonDivergence(format!(
        "no backward characteristic through {x:?} at t = {t} (residual {r:e})"
    )))
}

/// Phase data at `(t, x, xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseEval {
    pub phi: f64,
    /// `ybar(t, x, xi)`, equal to `d_xi phi`.
    pub ybar: Vec<f64>,
    /// `d_x phi`, the momentum at the end of the characteristic.
    pub grad: Vec<f64>,
    /// `det dxbar/dy`; `int_0^t Delta phi = log(det) / 2` along the
    /// characteristic.
    pub det_jac: f64,
    pub damping: f64,
}

/// `p_E(x, xi) = |xi|^2 + V1(x) - e0`.
pub fn p_e(pot: &PotentialPair, e0: f64, x: &[f64], xi: &[f64]) -> f64 {
    xi.iter().map(|v| v * v).sum::<f64>() + pot.v1(x) - e0
}

/// Phase, backward point and transport data by the action formula
/// `phi = <ybar, xi> + 2 int |xi~|^2 - t p_E(ybar, xi)`.
pub fn eikonal_phase_full(
    pot: &PotentialPair,
    e0: f64,
    t: f64,
    x: &[f64],
    xi: &[f64],
    guess: Option<&[f64]>,
    cfg: &WkbConfig,
) -> Result<PhaseEval> {
    if t == 0.0 {
        return Ok(PhaseEval {
            phi: x.iter().zip(xi).map(|(a, b)| a * b).sum(),
            ybar: x.to_vec(),
            grad: xi.to_vec(),
            det_jac: 1.0,
            damping: 0.0,
        });
    }
    let c = backward_characteristic(pot, t, x, xi, guess, cfg)?;
    let yxi: f64 = c.y.iter().zip(xi).map(|(a, b)| a * b).sum();
    let det_jac = c.det_jac();
    if !(det_jac > 0.0) {
        return Err(Error::NewtonDivergence(format!("caustic reached at t = {t}")));
    }
    Ok(PhaseEval {
        phi: yxi + 2.0 * c.action - t * p_e(pot, e0, &c.y, xi),
        ybar: c.y,
        grad: c.xi,
        det_jac,
        damping: c.damping,
    })
}

pub fn eikonal_phase(pot: &PotentialPair, e0: f64, t: f64, x: &[f64], xi: &[f64]) -> Result<f64> {
    Ok(eikonal_phase_full(pot, e0, t, x, xi, None, &WkbConfig::default())?.phi)
}

/// `Delta_x phi` by central differences of `d_x phi` with spacing
/// `1e-4 <x>`.
pub fn laplacian_phase_fd(pot: &PotentialPair, e0: f64, t: f64, x: &[f64], xi: &[f64], cfg: &WkbConfig) -> Result<f64> {
    let n = x.len();
    let bracket = (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let d = 1e-4 * bracket;
    let mut acc = 0.0;
    for k in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += d;
        xm[k] -= d;
        let gp = eikonal_phase_full(pot, e0, t, &xp, xi, None, cfg)?.grad[k];
        let gm = eikonal_phase_full(pot, e0, t, &xm, xi, None, cfg)?.grad[k];
        acc += (gp - gm) / (2.0 * d);
    }
    Ok(acc)
}

/// Initial amplitude `f(x)`: a Gaussian `scale exp(-|x - c|^2 / (2 w^2))`
/// normalized in `L^2` when `scale` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialProfile {
    pub center: Vec<f64>,
    pub width: f64,
    pub scale: f64,
}

impl InitialProfile {
    pub fn normalized(center: Vec<f64>, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidInput("profile width must be positive".into()));
        }
        let n = center.len() as f64;
        let scale = (PI * width * width).powf(-n / 4.0);
        Ok(Self { center, width, scale })
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        let r2: f64 = y.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        self.scale * (-r2 / (2.0 * self.width * self.width)).exp()
    }

    /// Distance from the center beyond which the profile is below `1e-17`
    /// of its peak.
    pub fn reach(&self) -> f64 {
        self.width * (2.0 * 17.0 * 10f64.ln()).sqrt()
    }
}

/// `a0(t, x, xi) = f(ybar) exp(i E1 t - int V2 - int Delta phi)`.
pub fn amplitude0(pot: &PotentialPair, e: &EnergySpec, f: &InitialProfile, t: f64, x: &[f64], xi: &[f64], cfg: &WkbConfig) -> Result<Complex64> {
    amplitude0_near(pot, e, f, t, x, xi, None, cfg)
}

fn amplitude0_near(pot: &PotentialPair, e: &EnergySpec, f: &InitialProfile, t: f64, x: &[f64], xi: &[f64], guess: Option<&[f64]>, cfg: &WkbConfig) -> Result<Complex64> {
    let p = eikonal_phase_full(pot, e.e0, t, x, xi, guess, cfg)?;
    Ok(a0_from(e, f, t, &p))
}

fn a0_from(e: &EnergySpec, f: &InitialProfile, t: f64, p: &PhaseEval) -> Complex64 {
    let fy = f.eval(&p.ybar);
    let damp = (-p.damping).exp() / p.det_jac.sqrt();
    fy * damp * (Complex64::i() * e.e1 * t).exp()
}

/// Fourth-order Laplacian of `a0(s, ., xi)` at `x` with spacing `d`.
/// `y` is the known backward point of `x` and seeds the Newton solves.
#[allow(clippy::too_many_arguments)]
fn laplacian_a0(pot: &PotentialPair, e: &EnergySpec, f: &InitialProfile, s: f64, x: &[f64], y: &[f64], xi: &[f64], d: f64, cfg: &WkbConfig) -> Result<Complex64> {
    let c0 = amplitude0_near(pot, e, f, s, x, xi, Some(y), cfg)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..x.len() {
        let at = |off: f64| -> Result<Complex64> {
            let mut xx = x.to_vec();
            xx[k] += off;
            amplitude0_near(pot, e, f, s, &xx, xi, Some(y), cfg)
        };
        let (p1, m1, p2, m2) = (at(d)?, at(-d)?, at(2.0 * d)?, at(-2.0 * d)?);
        acc += (-p2 + 16.0 * p1 - 30.0 * c0 + 16.0 * m1 - m2) / (12.0 * d * d);
    }
    Ok(acc)
}

/// Spacing of the finite-difference Laplacian of `a0`.
pub const A0_LAPLACIAN_STEP: f64 = 1e-2;

/// `a1(t, x, xi) = i int_0^t Delta a0(s, x~(s)) eta(s, t) ds` by
/// Gauss-Legendre quadrature in `s`.
pub fn amplitude1(pot: &PotentialPair, e: &EnergySpec, f: &InitialProfile, t: f64, x: &[f64], xi: &[f64], cfg: &WkbConfig) -> Result<Complex64> {
    if t == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let end = eikonal_phase_full(pot, e.e0, t, x, xi, None, cfg)?;
    let (gx, gw) = gauss_legendre(12);
    let mut acc = Complex64::new(0.0, 0.0);
    for (u, w) in gx.iter().zip(&gw) {
        let s = 0.5 * t * (u + 1.0);
        let mid = shoot(pot, &end.ybar, xi, s, cfg);
        let lap = laplacian_a0(pot, e, f, s, &mid.x, &end.ybar, xi, A0_LAPLACIAN_STEP, cfg)?;
        // eta(s, t) = e^{i E1 (t - s)} e^{-(D(t) - D(s))} (det X(s) / det X(t))^{1/2}
        let eta = (Complex64::i() * e.e1 * (t - s)).exp() * (mid.damping - end.damping).exp() * (mid.det_jac() / end.det_jac).sqrt();
        acc += 0.5 * t * w * lap * eta;
    }
    Ok(Complex64::i() * acc)
}

/// Half-width of the interval around the profile center outside which the
/// WKB wave is set to zero.
fn wave_reach(f: &InitialProfile, xi: &[f64], t: f64) -> f64 {
    f.reach() + 4.0 * t * (xi[0].abs() + 1.0)
}

/// `a1(t, ., xi)` tabulated on a uniform lattice and interpolated by cubic
/// Lagrange polynomials. It does not depend on `h`, so one table serves a
/// whole `h` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct A1Table {
    pub x0: f64,
    pub spacing: f64,
    pub values: Vec<Complex64>,
}

impl A1Table {
    #[allow(clippy::too_many_arguments)]
    pub fn build(pot: &PotentialPair, e: &EnergySpec, f: &InitialProfile, xi: &[f64], t: f64, lo: f64, hi: f64, spacing: f64, cfg: &WkbConfig) -> Result<Self> {
        if pot.n != 1 || !(spacing > 0.0) || !(hi > lo) {
            return Err(Error::InvalidInput("a1 tables need n = 1, spacing > 0 and lo < hi".into()));
        }
        let reach = wave_reach(f, xi, t);
        let x0 = lo - 2.0 * spacing;
        let m = ((hi - lo) / spacing).ceil() as usize + 5;
        let tab = par::map_range(m, |i| {
            let x = x0 + i as f64 * spacing;
            if (x - f.center[0]).abs() <= reach + spacing * 3.0 {
                amplitude1(pot, e, f, t, &[x], xi, cfg)
            } else {
                Ok(Complex64::new(0.0, 0.0))
            }
        });
        let values = tab.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self { x0, spacing, values })
    }

    pub fn eval(&self, x: f64) -> Complex64 {
        let s = (x - self.x0) / self.spacing;
        let i = (s.floor().max(0.0) as usize).clamp(1, self.values.len() - 3);
        let u = s - i as f64;
        let v = &self.values;
        // Cubic Lagrange through nodes -1, 0, 1, 2.
        let l0 = -u * (u - 1.0) * (u - 2.0) / 6.0;
        let l1 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
        let l2 = -(u + 1.0) * u * (u - 2.0) / 2.0;
        let l3 = (u + 1.0) * u * (u - 1.0) / 6.0;
        v[i - 1] * l0 + v[i] * l1 + v[i + 1] * l2 + v[i + 2] * l3
    }
}

/// The WKB wave `(a0 + h a1) e^{i phi / h}` on a one-dimensional grid, with
/// `a1` read from `table`.
#[allow(clippy::too_many_arguments)]
pub fn wkb_wave(pot: &PotentialPair, e: &EnergySpec, f: &InitialProfile, xi: &[f64], t: f64, grid: &Grid, table: &A1Table, cfg: &WkbConfig) -> Result<DiscreteField> {
    if grid.n != 1 || pot.n != 1 {
        return Err(Error::Unsupported("WKB waves are sampled on one-dimensional grids".into()));
    }
    let h = e.h;
    let reach = wave_reach(f, xi, t);
    let active = |x: f64| (x - f.center[0]).abs() <= reach;
    // Neighbouring nodes have nearby backward points, so each chunk is
    // swept in order and reuses the previous solution as its Newton start.
    const CHUNK: usize = 512;
    let chunks = grid.len().div_ceil(CHUNK);
    let swept = par::map_range(chunks, |c| -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(CHUNK);
        let mut prev = None;
        for i in c * CHUNK..((c + 1) * CHUNK).min(grid.len()) {
            let x = grid.axis(i);
            if !active(x) {
                out.push(Complex64::new(0.0, 0.0));
                prev = None;
                continue;
            }
            // First-order guess from the neighbour: dy = dx / (dx/dy).
            let guess = prev.map(|(xp, yp, jac): (f64, f64, f64)| [yp + (x - xp) / jac]);
            let p = eikonal_phase_full(pot, e.e0, t, &[x], xi, guess.as_ref().map(|g| &g[..]), cfg)?;
            out.push((a0_from(e, f, t, &p) + h * table.eval(x)) * Complex64::from_polar(1.0, p.phi / h));
            prev = Some((x, p.ybar[0], p.det_jac));
        }
        Ok(out)
    });
    let mut vals = Vec::with_capacity(grid.len());
    for c in swept {
        vals.extend(c?);
    }
    Ok(DiscreteField {
        values: vals,
        grid: grid.clone(),
        h,
    })
}

/// Operator splitting used by [`reference_propagator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitScheme {
    /// Second order: half potential, kinetic, half potential.
    Strang,
    /// Fourth order: the symmetric triple jump of Strang steps.
    TripleJump,
}

/// Periodic grid for the propagator: `npts` a power of two with
/// `dx <= h / 2`, nodes at `-L + j dx`.
pub fn propagator_grid(half_extent: f64, h: f64) -> Result<Grid> {
    if !(half_extent > 0.0 && h > 0.0) {
        return Err(Error::InvalidInput("propagator grid needs L > 0 and h > 0".into()));
    }
    let npts = ((2.0 * half_extent / (0.5 * h)).ceil() as usize).next_power_of_two();
    Ok(Grid {
        n: 1,
        half_extent,
        dx: 2.0 * half_extent / npts as f64,
        npts,
        layer: None,
    })
}

/// Result of [`reference_propagator`].
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub field: DiscreteField,
    pub steps: usize,
    /// `||u_{2N} - u_N|| / ||u_{2N}||` for the accepted step count.
    pub halving_change: f64,
    /// Largest relative norm increase over one step (0 when the norm never
    /// grows).
    pub norm_growth: f64,
}

struct SplitStepper {
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    wave2: Vec<f64>,
    /// `(V1 - i h V2 - E_h) / h` per node.
    pot_over_h: Vec<Complex64>,
    h: f64,
}

impl SplitStepper {
    fn potential_step(&self, u: &mut [Complex64], dt: f64) {
        for (v, p) in u.iter_mut().zip(&self.pot_over_h) {
            *v *= (-Complex64::i() * dt * p).exp();
        }
    }

    fn kinetic_step(&self, u: &mut [Complex64], dt: f64, scratch: &mut [Complex64]) {
        self.fft.process_with_scratch(u, scratch);
        let inv = 1.0 / u.len() as f64;
        for (v, k2) in u.iter_mut().zip(&self.wave2) {
            *v *= Complex64::from_polar(inv, -dt * self.h * k2);
        }
        self.ifft.process_with_scratch(u, scratch);
    }

    fn strang(&self, u: &mut [Complex64], dt: f64, scratch: &mut [Complex64]) {
        self.potential_step(u, 0.5 * dt);
        self.kinetic_step(u, dt, scratch);
        self.potential_step(u, 0.5 * dt);
    }

    fn run(&self, u0: &[Complex64], t: f64, steps: usize, scheme: SplitScheme, dx: f64) -> (Vec<Complex64>, f64) {
        let mut u = u0.to_vec();
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len().max(self.ifft.get_inplace_scratch_len())];
        let dt = t / steps as f64;
        let w1 = 1.0 / (2.0 - 2f64.powf(1.0 / 3.0));
        let w0 = 1.0 - 2.0 * w1;
        let norm = |u: &[Complex64]| (u.iter().map(|v| v.norm_sqr()).sum::<f64>() * dx).sqrt();
        let mut growth: f64 = 0.0;
        let mut prev = norm(&u);
        for _ in 0..steps {
            match scheme {
                SplitScheme::Strang => self.strang(&mut u, dt, &mut scratch),
                SplitScheme::TripleJump => {
                    self.strang(&mut u, w1 * dt, &mut scratch);
                    self.strang(&mut u, w0 * dt, &mut scratch);
                    self.strang(&mut u, w1 * dt, &mut scratch);
                }
            }
            let now = norm(&u);
            growth = growth.max((now - prev) / prev.max(f64::MIN_POSITIVE));
            prev = now;
        }
        (u, growth)
    }
}

/// Numerical `exp(-it(H_h - E_h)/h)` applied to `u0` on a periodic grid
/// from [`propagator_grid`]. The step count doubles from `initial_steps`
/// until the change under halving is below `target` relative to the norm.
pub fn reference_propagator(
    pot: &PotentialPair,
    e: &EnergySpec,
    u0: &DiscreteField,
    t: f64,
    scheme: SplitScheme,
    initial_steps: usize,
    target: f64,
) -> Result<Propagated> {
    let grid = &u0.grid;
    if grid.n != 1 || !grid.npts.is_power_of_two() {
        return Err(Error::InvalidInput("the propagator needs a periodic grid from propagator_grid".into()));
    }
    if grid.dx > 0.5 * e.h * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!("spacing {} does not resolve h = {}", grid.dx, e.h)));
    }
    if t == 0.0 {
        return Ok(Propagated {
            field: u0.clone(),
            steps: 0,
            halving_change: 0.0,
            norm_growth: 0.0,
        });
    }
    let n = grid.npts;
    let mut planner = FftPlanner::new();
    let len = 2.0 * grid.half_extent;
    let wave2 = (0..n)
        .map(|j| {
            let m = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
            let k = 2.0 * PI * m / len;
            k * k
        })
        .collect();
    let eh = e.e_h();
    let pot_over_h = (0..n)
        .map(|j| {
            let x = [grid.axis(j)];
            (Complex64::new(pot.v1(&x), -e.h * pot.v2(&x)) - eh) / e.h
        })
        .collect();
    let st = SplitStepper {
        fft: planner.plan_fft_forward(n),
        ifft: planner.plan_fft_inverse(n),
        wave2,
        pot_over_h,
        h: e.h,
    };
    let mut steps = initial_steps.max(1);
    let (mut u, mut growth) = st.run(&u0.values, t, steps, scheme, grid.dx);
    loop {
        if steps > 1 << 20 {
            return Err(Error::Resolution("split-step did not converge under step halving".into()));
        }
        let (u2, g2) = st.run(&u0.values, t, 2 * steps, scheme, grid.dx);
        let diff: f64 = u.iter().zip(&u2).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let nrm: f64 = u2.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        steps *= 2;
        u = u2;
        growth = growth.max(g2);
        if diff / nrm <= target {
            return Ok(Propagated {
                field: DiscreteField {
                    values: u,
                    grid: grid.clone(),
                    h: e.h,
                },
                steps,
                halving_change: diff / nrm,
                norm_growth: growth,
            });
        }
    }
}

/// Potentials, energy and initial data of a WKB comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct WkbSetup {
    pub pot: PotentialPair,
    pub e0: f64,
    pub e1: Complex64,
    pub profile: InitialProfile,
    pub xi0: f64,
    /// Half-width of the periodic box.
    pub half_extent: f64,
    /// Spacing of the coarse `a1` table.
    pub coarse: f64,
    pub cfg: WkbConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BkwErrors {
    pub h: Vec<f64>,
    /// `L^2` distance between the WKB wave and the reference.
    pub errors: Vec<f64>,
    /// Log-log slope of `errors` against `h`.
    pub order: f64,
    pub steps: Vec<usize>,
}

/// Compare `(a0 + h a1) e^{i phi / h}` with the reference propagator for
/// each `h`.
pub fn bkw_error(setup: &WkbSetup, h_list: &[f64], t: f64) -> Result<BkwErrors> {
    if setup.pot.n != 1 {
        return Err(Error::Unsupported("WKB error fits are one-dimensional".into()));
    }
    let Some(&h0) = h_list.first() else {
        return Err(Error::InvalidInput("empty h list".into()));
    };
    let e_any = EnergySpec::new(setup.e0, setup.e1, h0)?;
    let l = setup.half_extent;
    let table = A1Table::build(&setup.pot, &e_any, &setup.profile, &[setup.xi0], t, -l, l, setup.coarse, &setup.cfg)?;
    let mut errors = vec![];
    let mut steps = vec![];
    for &h in h_list {
        let e = EnergySpec::new(setup.e0, setup.e1, h)?;
        let grid = propagator_grid(setup.half_extent, h)?;
        let xi = [setup.xi0];
        let u0 = DiscreteField::from_fn(&grid, h, |x| Complex64::from_polar(setup.profile.eval(x), setup.xi0 * x[0] / h));
        let r = reference_propagator(&setup.pot, &e, &u0, t, SplitScheme::TripleJump, 64, 1e-8)?;
        let w = wkb_wave(&setup.pot, &e, &setup.profile, &xi, t, &grid, &table, &setup.cfg)?;
        let d: f64 = w.values.iter().zip(&r.field.values).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        errors.push((d * grid.dx).sqrt());
        steps.push(r.steps);
    }
    let order = if h_list.len() >= 2 { fit_order(h_list, &errors) } else { f64::NAN };
    Ok(BkwErrors {
        h: h_list.to_vec(),
        errors,
        order,
        steps,
    })
}

/// Stationary point of the source phase for a given `x` and the Hessian
/// determinant there.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPoint {
    pub t_x: f64,
    pub z_x: Vec<f64>,
    pub xi_x: Vec<f64>,
    /// Chart parameter of `z_x` (angle for circles, momentum angle for a
    /// point in the plane, sign for a point on the line).
    pub param: f64,
    pub det_hess: f64,
    /// `|det_hess| / (2^{n-d+1} t_x^{n-d-1} |xi_x|^2)`.
    pub asymptotic_ratio: f64,
}

/// Bundle point `(z, xi)` for a chart parameter.
fn bundle_point(source: &SourceManifold, pot: &PotentialPair, e0: f64, param: f64, branch: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (z, dir): (Vec<f64>, Vec<f64>) = match (&source.kind, source.n) {
        (ManifoldKind::Point { z }, 1) => (z.clone(), vec![param.signum()]),
        (ManifoldKind::Point { z }, _) => (z.clone(), vec![param.cos(), param.sin()]),
        (ManifoldKind::Circle { center, radius, .. }, _) => {
            let (s, c) = param.sin_cos();
            (vec![center[0] + radius * c, center[1] + radius * s], vec![branch * c, branch * s])
        }
        _ => return Err(Error::Unsupported("critical points are implemented for points and circles".into())),
    };
    let gap = e0 - pot.v1(&z);
    if gap <= 0.0 {
        return Err(Error::EmptyShell(format!("V1(z) >= e0 at {z:?}")));
    }
    let k = gap.sqrt();
    Ok((z, dir.iter().map(|v| k * v).collect()))
}

/// Invert the tube map at `x` and evaluate the Hessian of
/// `(t, zeta, xi) -> phi(t, x, xi) - <exp_z(zeta), xi>` by central
/// differences at the stationary point.
pub fn critical_point_and_hessian(source: &SourceManifold, pot: &PotentialPair, e0: f64, x: &[f64], cfg: &WkbConfig) -> Result<CriticalPoint> {
    critical_point_from(source, pot, e0, x, None, cfg)
}

/// As [`critical_point_and_hessian`], with an explicit Newton start
/// `(t, param)` instead of the nearest-point guess.
pub fn critical_point_from(
    source: &SourceManifold,
    pot: &PotentialPair,
    e0: f64,
    x: &[f64],
    start: Option<(f64, f64)>,
    cfg: &WkbConfig,
) -> Result<CriticalPoint> {
    let n = source.n;
    let d = source.d();
    if d > 1 || pot.n != n || x.len() != n {
        return Err(Error::Unsupported("critical points need d <= 1 and matching dimensions".into()));
    }
    // Initial guess from the nearest point of the manifold.
    let foot = source.closest_point(x)?;
    let dist = x.iter().zip(&foot).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dist == 0.0 {
        return Err(Error::InvalidInput("x lies on the source manifold".into()));
    }
    let k0 = (e0 - pot.v1(&foot)).max(1e-12).sqrt();
    let mut t = dist / (2.0 * k0);
    let (mut param, branch) = match &source.kind {
        ManifoldKind::Point { z } if n == 1 => ((x[0] - z[0]).signum(), 1.0),
        ManifoldKind::Point { z } => ((x[1] - z[1]).atan2(x[0] - z[0]), 1.0),
        ManifoldKind::Circle { center, radius, .. } => {
            let rho = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)).sqrt();
            ((x[1] - center[1]).atan2(x[0] - center[0]), if rho >= *radius { 1.0 } else { -1.0 })
        }
        _ => return Err(Error::Unsupported("critical points are implemented for points and circles".into())),
    };
    if let Some((t0, p0)) = start {
        t = t0;
        if n == 2 {
            param = p0;
        }
    }
    let tol: f64 = 1e-13;
    let image = |t: f64, p: f64| -> Result<Vec<f64>> {
        let (z, xi) = bundle_point(source, pot, e0, p, branch)?;
        Ok(flow(pot, &PhasePoint::new(z, xi), t, tol.max(DEFAULT_TOL * 0.1))?.x)
    };
    let has_param = n == 2;
    let mut converged = false;
    for _ in 0..60 {
        let f0 = image(t, param)?;
        let r: Vec<f64> = f0.iter().zip(x).map(|(a, b)| a - b).collect();
        let rn = r.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if rn <= 1e-11 {
            converged = true;
            break;
        }
        let eps = 1e-7;
        let ft = image(t + eps, param)?;
        let col_t: Vec<f64> = ft.iter().zip(&f0).map(|(a, b)| (a - b) / eps).collect();
        let (dt, dp) = if has_param {
            let fp = image(t, param + eps)?;
            let col_p: Vec<f64> = fp.iter().zip(&f0).map(|(a, b)| (a - b) / eps).collect();
            let m = [col_t[0], col_p[0], col_t[1], col_p[1]];
            let s = solve_small(&m, &[-r[0], -r[1]]).ok_or_else(|| Error::NewtonDivergence("singular tube map".into()))?;
            (s[0], s[1])
        } else {
            (-r[0] / col_t[0], 0.0)
        };
        t += dt;
        param += dp;
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::NewtonDivergence(format!("tube inversion left t > 0 at x = {x:?}")));
        }
    }
    if !converged {
        return Err(Error::NewtonDivergence(format!("tube inversion did not converge at x = {x:?}")));
    }
    let (z_x, xi_x) = bundle_point(source, pot, e0, param, branch)?;

    // Variables: t, zeta (d of them), xi (n of them).
    let dim = 1 + d + n;
    let mut v0 = vec![t];
    v0.extend(std::iter::repeat_n(0.0, d));
    v0.extend_from_slice(&xi_x);
    let exp_z = |zeta: f64| -> Vec<f64> {
        match &source.kind {
            ManifoldKind::Circle { center, radius, .. } => {
                let th = param + zeta / radius;
                vec![center[0] + radius * th.cos(), center[1] + radius * th.sin()]
            }
            _ => z_x.clone(),
        }
    };
    let psi = |v: &[f64]| -> Result<f64> {
        let tt = v[0];
        let zeta = if d == 1 { v[1] } else { 0.0 };
        let xi = &v[1 + d..];
        let z = exp_z(zeta);
        let ph = eikonal_phase_full(pot, e0, tt, x, xi, None, cfg)?.phi;
        Ok(ph - z.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
    };
    let steps: Vec<f64> = (0..dim).map(|i| if i == 0 { 1e-3 * t.min(1.0) } else { 1e-3 }).collect();
    let mut hess = vec![0.0; dim * dim];
    let f0 = psi(&v0)?;
    for i in 0..dim {
        for j in i..dim {
            let val = if i == j {
                let mut p = v0.clone();
                let mut m = v0.clone();
                let mut p2 = v0.clone();
                let mut m2 = v0.clone();
                p[i] += steps[i];
                m[i] -= steps[i];
                p2[i] += 2.0 * steps[i];
                m2[i] -= 2.0 * steps[i];
                (-psi(&p2)? + 16.0 * psi(&p)? - 30.0 * f0 + 16.0 * psi(&m)? - psi(&m2)?) / (12.0 * steps[i] * steps[i])
            } else {
                let mut acc = 0.0;
                for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    let mut v = v0.clone();
                    v[i] += si * steps[i];
                    v[j] += sj * steps[j];
                    acc += w * psi(&v)?;
                }
                acc / (4.0 * steps[i] * steps[j])
            };
            hess[i * dim + j] = val;
            hess[j * dim + i] = val;
        }
    }
    let det_hess = nalgebra::DMatrix::from_row_slice(dim, dim, &hess).determinant();
    let k2: f64 = xi_x.iter().map(|v| v * v).sum();
    let codim = (n - d) as i32;
    let model = 2f64.powi(codim + 1) * t.powi(codim - 1) * k2;
    Ok(CriticalPoint {
        t_x: t,
        z_x,
        xi_x,
        param,
        det_hess,
        asymptotic_ratio: det_hess.abs() / model,
    })
}
