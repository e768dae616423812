//! The limiting phase-space measure as an integral over rays leaving the
//! normal energy bundle, and the transport identity it satisfies.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::par;
use crate::potential_flow::{EnergySpec, PhasePoint, PotentialPair, RayStepper};
use crate::quad::{gk15_combine, gk15_nodes};
use crate::source::{sigma_quadrature, NormalBundlePoint, NormalBundleQuadrature, Profile, SourceManifold};
use crate::stats::pairwise_sum;

/// Gaussian terms are cut to exactly zero where they fall below this.
pub const TAIL: f64 = 1e-12;

/// `coefficient * exp(-(w - center)^T P (w - center) / 2)` on `R^{2n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableTerm {
    pub center: Vec<f64>,
    /// Row-major `2n x 2n` inverse covariance.
    pub inverse_covariance: Vec<f64>,
    pub coefficient: f64,
    /// Mahalanobis radius at which the term drops to [`TAIL`].
    pub effective_radius: f64,
    /// Radius of a ball around the x-part of `center` containing the
    /// x-projection of the effective support.
    pub x_radius: f64,
    /// Same for the momentum part.
    pub xi_radius: f64,
    /// Smallest standard deviation over all directions.
    pub min_scale: f64,
    /// Largest eigenvalue of the inverse covariance.
    pub max_precision: f64,
    /// `lambda_max(C)^{-1/2}` for the momentum block `C` of the inverse
    /// covariance; sets the reach of the Weyl kernel in the separation.
    pub xi_kernel_scale: f64,
}

impl ObservableTerm {
    fn mahalanobis2(&self, x: &[f64], xi: &[f64]) -> f64 {
        let n2 = self.center.len();
        let n = n2 / 2;
        let d = |i: usize| if i < n { x[i] - self.center[i] } else { xi[i - n] - self.center[i] };
        let mut q = 0.0;
        for i in 0..n2 {
            let di = d(i);
            let row = &self.inverse_covariance[i * n2..(i + 1) * n2];
            let mut acc = 0.0;
            for (j, p) in row.iter().enumerate() {
                acc += p * d(j);
            }
            q += di * acc;
        }
        q
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        let m = self.mahalanobis2(x, xi);
        if m > self.effective_radius * self.effective_radius {
            return 0.0;
        }
        self.coefficient * (-0.5 * m).exp()
    }

    /// Gradient in `(x, xi)` written into `out` (length `2n`).
    pub fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let n2 = self.center.len();
        let n = n2 / 2;
        let d: Vec<f64> = (0..n2)
            .map(|i| if i < n { x[i] - self.center[i] } else { xi[i - n] - self.center[i] })
            .collect();
        let v = self.eval(x, xi);
        for i in 0..n2 {
            let row = &self.inverse_covariance[i * n2..(i + 1) * n2];
            out[i] = -v * row.iter().zip(&d).map(|(p, dj)| p * dj).sum::<f64>();
        }
    }
}

/// Finite sum of phase-space Gaussian bumps.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub n: usize,
    pub terms: Vec<ObservableTerm>,
}

impl Observable {
    pub fn new(n: usize) -> Self {
        Self { n, terms: vec![] }
    }

    /// Add a term with a general inverse covariance, which must be
    /// symmetric positive definite.
    pub fn with_term(mut self, center: Vec<f64>, inverse_covariance: Vec<f64>, coefficient: f64) -> Result<Self> {
        let n2 = 2 * self.n;
        if center.len() != n2 || inverse_covariance.len() != n2 * n2 {
            return Err(Error::InvalidInput("observable term has the wrong dimension".into()));
        }
        if !center.iter().chain(&inverse_covariance).all(|v| v.is_finite()) || !coefficient.is_finite() {
            return Err(Error::InvalidInput("observable term is not finite".into()));
        }
        let p = DMatrix::from_row_slice(n2, n2, &inverse_covariance);
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * p.amax() {
            return Err(Error::InvalidInput("inverse covariance is not symmetric".into()));
        }
        let cov = p
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("inverse covariance is not positive definite".into()))?
            .inverse();
        let c_block = p.view((self.n, self.n), (self.n, self.n)).into_owned();
        let xi_kernel_scale = 1.0 / SymmetricEigen::new(c_block).eigenvalues.max().sqrt();
        let eig = SymmetricEigen::new(p);
        let max_precision = eig.eigenvalues.max();
        let effective_radius = if coefficient.abs() > TAIL {
            (2.0 * (coefficient.abs() / TAIL).ln()).sqrt()
        } else {
            0.0
        };
        let x_var: f64 = (0..self.n).map(|i| cov[(i, i)]).sum();
        let xi_var: f64 = (self.n..n2).map(|i| cov[(i, i)]).sum();
        self.terms.push(ObservableTerm {
            center,
            inverse_covariance,
            coefficient,
            effective_radius,
            x_radius: effective_radius * x_var.sqrt(),
            xi_radius: effective_radius * xi_var.sqrt(),
            min_scale: 1.0 / max_precision.sqrt(),
            max_precision,
            xi_kernel_scale,
        });
        Ok(self)
    }

    /// Add an axis-aligned bump with standard deviations `sx` in position
    /// and `sxi` in momentum.
    pub fn with_bump(self, x: &[f64], xi: &[f64], sx: f64, sxi: f64, coefficient: f64) -> Result<Self> {
        let n = self.n;
        if !(sx > 0.0 && sxi > 0.0) {
            return Err(Error::InvalidInput("bump widths must be positive".into()));
        }
        let mut p = vec![0.0; 4 * n * n];
        for i in 0..n {
            p[i * 2 * n + i] = 1.0 / (sx * sx);
            p[(n + i) * 2 * n + n + i] = 1.0 / (sxi * sxi);
        }
        let center = x.iter().chain(xi).copied().collect();
        self.with_term(center, p, coefficient)
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x, xi)).sum()
    }

    pub fn eval_point(&self, w: &PhasePoint) -> f64 {
        self.eval(&w.x, &w.xi)
    }

    pub fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut g = vec![0.0; 2 * self.n];
        for t in &self.terms {
            t.gradient(x, xi, &mut g);
            for (o, v) in out.iter_mut().zip(&g) {
                *o += v;
            }
        }
    }

    /// `H_p q = 2 xi . d_x q - grad V1 . d_xi q`.
    pub fn hamilton_derivative(&self, pot: &PotentialPair, x: &[f64], xi: &[f64]) -> f64 {
        let n = self.n;
        let mut g = vec![0.0; 2 * n];
        self.gradient(x, xi, &mut g);
        let mut gv = vec![0.0; n];
        pot.grad_v1(x, &mut gv);
        (0..n).map(|i| 2.0 * xi[i] * g[i] - gv[i] * g[n + i]).sum()
    }

    pub fn sup_abs(&self) -> f64 {
        self.terms.iter().map(|t| t.coefficient.abs()).sum()
    }

    /// Whether every term's effective support avoids the shell
    /// `|xi|^2 + V1(x) = e0`, tested on the term's support box.
    pub fn misses_shell(&self, pot: &PotentialPair, e0: f64) -> bool {
        let n = self.n;
        self.terms.iter().all(|t| {
            let cov_diag: Vec<f64> = {
                let p = DMatrix::from_row_slice(2 * n, 2 * n, &t.inverse_covariance);
                let c = p.try_inverse().expect("checked positive definite");
                (0..2 * n).map(|i| c[(i, i)].sqrt() * t.effective_radius).collect()
            };
            // |xi| range over the box, V1 range bounded by the global bounds.
            let mut lo2 = 0.0;
            let mut hi2 = 0.0;
            for i in 0..n {
                let c = t.center[n + i];
                let r = cov_diag[n + i];
                let (a, b) = (c - r, c + r);
                let m = if a <= 0.0 && b >= 0.0 { 0.0 } else { a.abs().min(b.abs()) };
                lo2 += m * m;
                hi2 += a.abs().max(b.abs()).powi(2);
            }
            let vlo = pot.v1.inf_bound();
            let vhi = pot.v1.sup_bound();
            lo2 + vlo > e0 || hi2 + vhi < e0
        })
    }
}

/// Real functions on phase space that can be integrated along rays.
pub trait PhaseFunction: Sync {
    fn n(&self) -> usize;
    fn eval(&self, x: &[f64], xi: &[f64]) -> f64;
    fn sup_abs(&self) -> f64;
    /// Balls `(center, radius)` covering the x-projection of the support.
    fn x_support(&self) -> Vec<(Vec<f64>, f64)>;
    /// Length scale used to size time panels.
    fn min_scale(&self) -> f64;
}

impl PhaseFunction for Observable {
    fn n(&self) -> usize {
        self.n
    }
    fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        Observable::eval(self, x, xi)
    }
    fn sup_abs(&self) -> f64 {
        Observable::sup_abs(self)
    }
    fn x_support(&self) -> Vec<(Vec<f64>, f64)> {
        self.terms
            .iter()
            .filter(|t| t.effective_radius > 0.0)
            .map(|t| (t.center[..self.n].to_vec(), t.x_radius))
            .collect()
    }
    fn min_scale(&self) -> f64 {
        self.terms.iter().map(|t| t.min_scale).fold(f64::INFINITY, f64::min)
    }
}

/// `(-H_p + 2 Im E1 + 2 V2) q`.
pub struct TransportedObservable<'a> {
    pub q: &'a Observable,
    pub pot: &'a PotentialPair,
    pub im_e1: f64,
}

impl PhaseFunction for TransportedObservable<'_> {
    fn n(&self) -> usize {
        self.q.n
    }
    fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        let q = self.q.eval(x, xi);
        if q == 0.0 {
            return 0.0;
        }
        -self.q.hamilton_derivative(self.pot, x, xi) + (2.0 * self.im_e1 + 2.0 * self.pot.v2(x)) * q
    }
    fn sup_abs(&self) -> f64 {
        // |grad q| <= sum |c| sqrt(lambda_max) e^{-1/2}; speed bounds from
        // the potentials.
        let k = (self.pot.v1.sup_bound() - self.pot.v1.inf_bound()).abs() + 1.0;
        let g: f64 = self
            .q
            .terms
            .iter()
            .map(|t| t.coefficient.abs() * t.max_precision.sqrt() * (-0.5f64).exp())
            .sum();
        let grad_v1: f64 = self.pot.v1.terms.iter().map(|t| t.amplitude.abs() * 2.0f64.sqrt() / t.width).sum();
        g * (2.0 * k.sqrt() * 4.0 + grad_v1) + (2.0 * self.im_e1 + 2.0 * self.pot.v2.sup_bound()) * self.q.sup_abs()
    }
    fn x_support(&self) -> Vec<(Vec<f64>, f64)> {
        self.q.x_support()
    }
    fn min_scale(&self) -> f64 {
        self.q.min_scale()
    }
}

/// Everything the measure formula depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSetup {
    pub pot: PotentialPair,
    pub energy: EnergySpec,
    pub source: SourceManifold,
    pub profile: Profile,
    /// Refinement level passed to [`sigma_quadrature`].
    pub refinement: u32,
    /// Hard time horizon.
    pub t_cap: f64,
    pub ray_tol: f64,
}

impl MeasureSetup {
    pub fn new(pot: PotentialPair, energy: EnergySpec, source: SourceManifold, profile: Profile) -> Self {
        Self {
            pot,
            energy,
            source,
            profile,
            refinement: 0,
            t_cap: 2000.0,
            ray_tol: 1e-11,
        }
    }

    pub fn quadrature(&self) -> Result<NormalBundleQuadrature> {
        sigma_quadrature(&self.source, &self.pot, self.energy.e0, self.refinement)
    }
}

/// `pi (2 pi)^{d-n} A(z)^2 |xi|^{-1} |S^(xi)|^2`.
pub fn density_c(source: &SourceManifold, profile: &Profile, node: &NormalBundlePoint) -> f64 {
    let n = source.n as i32;
    let d = source.d() as i32;
    let k = node.xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = profile.s_hat(&node.xi);
    PI * (2.0 * PI).powi(d - n) * node.amplitude * node.amplitude / k * s * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureEvaluation {
    pub value: f64,
    /// Largest truncation time over all rays.
    pub t_max_used: f64,
    /// Bound on the neglected tail mass.
    pub tail_bound: f64,
    pub node_count: usize,
    /// `w_j c_j int q W dt` per bundle node, in quadrature order.
    pub contributions: Vec<f64>,
}

impl MeasureEvaluation {
    /// Sum of the contributions of nodes on the given branch.
    pub fn branch_value(&self, quad: &NormalBundleQuadrature, branch: i8) -> f64 {
        let v: Vec<f64> = quad
            .nodes
            .iter()
            .zip(&self.contributions)
            .filter(|(p, _)| p.branch == branch)
            .map(|(_, c)| *c)
            .collect();
        pairwise_sum(&v)
    }
}

struct RayOutcome {
    integral: f64,
    t_end: f64,
    tail: f64,
}

fn weight(st: &RayStepper, im_e1: f64) -> f64 {
    (-2.0 * st.time() * im_e1 - 2.0 * st.damping()).exp()
}

fn panel<'a, F: PhaseFunction>(f: &F, st: &RayStepper<'a>, b: f64, im_e1: f64, tol: f64, depth: u32) -> Result<(f64, RayStepper<'a>)> {
    let a = st.time();
    let nodes = gk15_nodes(a, b);
    let mut s = st.clone();
    let mut vals = [0.0; 15];
    for (v, &t) in vals.iter_mut().zip(&nodes) {
        s.advance_to(t)?;
        *v = f.eval(s.x(), s.xi()) * weight(&s, im_e1);
    }
    let (k, err) = gk15_combine(a, b, &vals);
    if err <= tol || depth >= 16 {
        s.advance_to(b)?;
        return Ok((k, s));
    }
    let m = 0.5 * (a + b);
    let (l, sl) = panel(f, st, m, im_e1, 0.5 * tol, depth + 1)?;
    let (r, sr) = panel(f, &sl, b, im_e1, 0.5 * tol, depth + 1)?;
    Ok((l + r, sr))
}

fn integrate_ray<F: PhaseFunction>(f: &F, setup: &MeasureSetup, start: &PhasePoint, c: f64, err_budget: f64, tail_budget: f64) -> Result<RayOutcome> {
    let pot = &setup.pot;
    let im_e1 = setup.energy.e1.im;
    let balls = f.x_support();
    if balls.is_empty() || c == 0.0 {
        return Ok(RayOutcome {
            integral: 0.0,
            t_end: 0.0,
            tail: 0.0,
        });
    }
    let kmax = (setup.energy.e0 - pot.v1.inf_bound()).max(0.0).sqrt();
    let speed = 2.0 * kmax.max(1e-12);
    let dt = 0.25 * f.min_scale() / speed;
    let r_exit = balls
        .iter()
        .map(|(cx, r)| cx.iter().map(|v| v * v).sum::<f64>().sqrt() + r)
        .fold(0.0, f64::max)
        .max(pot.v1.negligible_radius(1e-16))
        .max(pot.v2.negligible_radius(1e-16));
    let sup = f.sup_abs();
    let mut st = RayStepper::new(pot, start, setup.ray_tol);
    let mut acc = vec![];
    let panel_tol = err_budget / (c * 64.0);
    loop {
        let t = st.time();
        let x = st.x();
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radial: f64 = x.iter().zip(st.xi()).map(|(a, b)| a * b).sum();
        if r > r_exit && radial > 0.0 {
            return Ok(RayOutcome {
                integral: c * pairwise_sum(&acc),
                t_end: t,
                tail: 0.0,
            });
        }
        let w = weight(&st, im_e1);
        let tail = if im_e1 > 0.0 {
            c * sup * w / (2.0 * im_e1)
        } else {
            c * sup * w * (setup.t_cap - t)
        };
        if tail <= tail_budget {
            return Ok(RayOutcome {
                integral: c * pairwise_sum(&acc),
                t_end: t,
                tail,
            });
        }
        if t >= setup.t_cap {
            return Err(Error::Truncation(format!(
                "horizon {} reached with damping weight {w:.3e} and tail bound {tail:.3e}",
                setup.t_cap
            )));
        }
        let gap = balls
            .iter()
            .map(|(cx, rad)| {
                let d: f64 = x.iter().zip(cx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                d - rad
            })
            .fold(f64::INFINITY, f64::min);
        if gap > speed * dt {
            // q vanishes until the ray can reach the nearest support ball.
            let jump = (gap / speed).min(setup.t_cap - t).min(10.0 * dt.max(gap / speed * 0.5)).max(dt);
            st.advance_to((t + jump).min(setup.t_cap))?;
            continue;
        }
        let b = (t + dt).min(setup.t_cap);
        let (v, s) = panel(f, &st, b, im_e1, panel_tol, 0)?;
        acc.push(v);
        st = s;
    }
}

/// Shared driver for [`mu_eval`] and the transport identity.
pub fn mu_eval_fn<F: PhaseFunction>(f: &F, setup: &MeasureSetup, tol: f64) -> Result<MeasureEvaluation> {
    if f.n() != setup.pot.n || setup.source.n != setup.pot.n {
        return Err(Error::InvalidInput("observable, potential and source dimensions differ".into()));
    }
    let quad = setup.quadrature()?;
    let cs: Vec<f64> = quad
        .nodes
        .iter()
        .zip(&quad.weights)
        .map(|(p, w)| w * density_c(&setup.source, &setup.profile, p))
        .collect();
    let total_c = pairwise_sum(&cs).max(f64::MIN_POSITIVE);
    let outs = par::map_range(quad.nodes.len(), |j| {
        let share = cs[j] / total_c;
        integrate_ray(f, setup, &quad.nodes[j].phase_point(), cs[j], 0.5 * tol * share, 0.5 * tol * share)
    });
    let mut contributions = Vec::with_capacity(outs.len());
    let mut tails = vec![];
    let mut t_max: f64 = 0.0;
    for o in outs {
        let o = o?;
        contributions.push(o.integral);
        tails.push(o.tail);
        t_max = t_max.max(o.t_end);
    }
    Ok(MeasureEvaluation {
        value: pairwise_sum(&contributions),
        t_max_used: t_max,
        tail_bound: pairwise_sum(&tails),
        node_count: quad.nodes.len(),
        contributions,
    })
}

/// `int q dmu` by integrating along every ray leaving the bundle.
pub fn mu_eval(q: &Observable, setup: &MeasureSetup, tol: f64) -> Result<MeasureEvaluation> {
    mu_eval_fn(q, setup, tol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiouvilleResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Compare `int (-H_p + 2 Im E1 + 2 V2) q dmu` with the boundary term
/// `int c q dsigma` over the bundle.
pub fn liouville_residual(q: &Observable, setup: &MeasureSetup, tol: f64) -> Result<LiouvilleResidual> {
    let tq = TransportedObservable {
        q,
        pot: &setup.pot,
        im_e1: setup.energy.e1.im,
    };
    let lhs = mu_eval_fn(&tq, setup, tol)?.value;
    let quad = setup.quadrature()?;
    let terms: Vec<f64> = quad
        .nodes
        .iter()
        .zip(&quad.weights)
        .map(|(p, w)| w * density_c(&setup.source, &setup.profile, p) * q.eval(&p.z, &p.xi))
        .collect();
    let rhs = pairwise_sum(&terms);
    Ok(LiouvilleResidual {
        lhs,
        rhs,
        residual: lhs - rhs,
    })
}

/// `mu(q)` for `q` concentrated in the incoming region
/// `{|x| >= R, <x, xi> < -sigma |x| |xi|}`; the centers of all terms must
/// lie there.
pub fn incoming_support_check(q: &Observable, setup: &MeasureSetup, r: f64, sigma: f64, tol: f64) -> Result<f64> {
    if !(-1.0 < sigma && sigma < 1.0) {
        return Err(Error::InvalidInput("sigma must lie in (-1, 1)".into()));
    }
    let n = q.n;
    for t in &q.terms {
        let (x, xi) = t.center.split_at(n);
        let rx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rxi = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
        if rx < r || dot >= -sigma * rx * rxi {
            return Err(Error::InvalidInput(format!("term centered at {:?} is not incoming", t.center)));
        }
    }
    Ok(mu_eval(q, setup, tol)?.value)
}
