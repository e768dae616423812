//! Potentials, Hamiltonian rays and damping along them.
//!
//! Rays solve `x' = 2 xi`, `xi' = -grad V1(x)`, which conserves
//! `p = |xi|^2 + V1(x)`. The absorption `V2` does not bend rays; it only
//! enters through the accumulated integral `D(t) = int_0^t V2(x(s)) ds`,
//! carried as an extra state component.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ode::{Dopri5, System};
use crate::par;
use crate::source::{NormalBundleQuadrature, SourceManifold};

/// Default local tolerance of the adaptive ray integrator.
pub const DEFAULT_TOL: f64 = 1e-12;

/// `amplitude * exp(-|x - center|^2 / width^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTerm {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
}

impl GaussianTerm {
    fn r2(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.amplitude * (-self.r2(x) / (self.width * self.width)).exp()
    }
}

/// A finite sum of Gaussian terms on R^n. The empty sum is the zero
/// potential.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    pub n: usize,
    pub terms: Vec<GaussianTerm>,
}

impl Potential {
    pub fn zero(n: usize) -> Self {
        Self { n, terms: vec![] }
    }

    pub fn with_gaussian(mut self, amplitude: f64, center: &[f64], width: f64) -> Result<Self> {
        if center.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "gaussian center has {} components, expected {}",
                center.len(),
                self.n
            )));
        }
        if !(width > 0.0) || !amplitude.is_finite() {
            return Err(Error::InvalidInput("gaussian needs width > 0 and finite amplitude".into()));
        }
        self.terms.push(GaussianTerm {
            amplitude,
            center: center.to_vec(),
            width,
        });
        Ok(self)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.amplitude == 0.0)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.value(x)).sum()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for t in &self.terms {
            let w2 = t.width * t.width;
            let v = t.value(x);
            for i in 0..self.n {
                out[i] += -2.0 * (x[i] - t.center[i]) / w2 * v;
            }
        }
    }

    /// Row-major `n x n` Hessian.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|g| *g = 0.0);
        for t in &self.terms {
            let w2 = t.width * t.width;
            let v = t.value(x);
            for i in 0..n {
                let di = x[i] - t.center[i];
                for j in 0..n {
                    let dj = x[j] - t.center[j];
                    let delta = if i == j { 1.0 } else { 0.0 };
                    out[i * n + j] += (4.0 * di * dj / (w2 * w2) - 2.0 * delta / w2) * v;
                }
            }
        }
    }

    /// Radius outside of which `|V| <= eps` everywhere.
    pub fn negligible_radius(&self, eps: f64) -> f64 {
        let total: f64 = self.terms.iter().map(|t| t.amplitude.abs()).sum();
        if total <= eps {
            return 0.0;
        }
        self.terms
            .iter()
            .map(|t| {
                let c = t.center.iter().map(|v| v * v).sum::<f64>().sqrt();
                c + t.width * (total / eps).ln().max(0.0).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Smallest Gaussian width, a natural length scale for event detection.
    pub fn min_width(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.amplitude != 0.0)
            .map(|t| t.width)
            .fold(f64::INFINITY, f64::min)
    }

    /// Upper bound for `sup V`.
    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.max(0.0)).sum()
    }

    /// Lower bound for `inf V`.
    pub fn inf_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.min(0.0)).sum()
    }
}

/// The real potential `V1` and the absorption `V2 >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub n: usize,
    pub v1: Potential,
    pub v2: Potential,
    /// Declared decay exponent of both potentials.
    pub rho: f64,
}

impl PotentialPair {
    pub fn new(v1: Potential, v2: Potential, rho: f64) -> Result<Self> {
        if v1.n != v2.n {
            return Err(Error::InvalidInput("V1 and V2 live in different dimensions".into()));
        }
        if !(rho > 0.0) {
            return Err(Error::InvalidInput("decay exponent must be positive".into()));
        }
        if v2.terms.iter().any(|t| t.amplitude < 0.0) {
            return Err(Error::InvalidInput("absorption terms must be nonnegative".into()));
        }
        Ok(Self { n: v1.n, v1, v2, rho })
    }

    pub fn free(n: usize) -> Self {
        Self::new(Potential::zero(n), Potential::zero(n), 2.0).expect("zero potentials are valid")
    }

    pub fn v1(&self, x: &[f64]) -> f64 {
        self.v1.value(x)
    }

    pub fn grad_v1(&self, x: &[f64], out: &mut [f64]) {
        self.v1.gradient(x, out)
    }

    pub fn v2(&self, x: &[f64]) -> f64 {
        let v = self.v2.value(x);
        debug_assert!(v >= 0.0, "absorption went negative at {x:?}");
        v.max(0.0)
    }

    /// Smallest constant `C` with `|V(x)| <= C <x>^-rho` on the samples,
    /// for `V1` and `V2` respectively.
    pub fn fitted_decay_constants(&self, samples: &[Vec<f64>]) -> (f64, f64) {
        let mut c1 = 0.0f64;
        let mut c2 = 0.0f64;
        for x in samples {
            let bracket = (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt();
            let w = bracket.powf(self.rho);
            c1 = c1.max(self.v1(x).abs() * w);
            c2 = c2.max(self.v2(x).abs() * w);
        }
        (c1, c2)
    }
}

/// Principal energy `e0`, subprincipal energy `e1` and the semiclassical
/// parameter `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySpec {
    pub e0: f64,
    pub e1: Complex64,
    pub h: f64,
}

impl EnergySpec {
    pub fn new(e0: f64, e1: Complex64, h: f64) -> Result<Self> {
        if !(e0 > 0.0) {
            return Err(Error::InvalidInput("E0 must be positive".into()));
        }
        if e1.im < 0.0 {
            return Err(Error::InvalidInput("Im E1 must be nonnegative".into()));
        }
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidInput("h must lie in (0, 1]".into()));
        }
        Ok(Self { e0, e1, h })
    }

    /// `E_h = e0 + h e1`.
    pub fn e_h(&self) -> Complex64 {
        Complex64::new(self.e0, 0.0) + self.h * self.e1
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        Self::new(self.e0, self.e1, h)
    }
}

/// A point `(x, xi)` of phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Self {
        assert_eq!(x.len(), xi.len(), "x and xi must have the same length");
        Self { x, xi }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.xi).all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &PhasePoint) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.xi.iter().zip(&other.xi))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// The time-reversed point `(x, -xi)`.
    pub fn reversed(&self) -> PhasePoint {
        PhasePoint::new(self.x.clone(), self.xi.iter().map(|v| -v).collect())
    }

    fn state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(2 * self.n() + 1);
        s.extend_from_slice(&self.x);
        s.extend_from_slice(&self.xi);
        s.push(0.0);
        s
    }

    fn from_state(s: &[f64], n: usize) -> PhasePoint {
        PhasePoint::new(s[..n].to_vec(), s[n..2 * n].to_vec())
    }
}

/// `|xi|^2 + V1(x)`.
pub fn eval_hamiltonian(pot: &PotentialPair, w: &PhasePoint) -> f64 {
    w.xi.iter().map(|v| v * v).sum::<f64>() + pot.v1(&w.x)
}

/// Ray equations augmented with the absorption integral as last component.
#[derive(Clone, Copy)]
pub struct RaySystem<'a> {
    pub pot: &'a PotentialPair,
}

impl System for RaySystem<'_> {
    fn dim(&self) -> usize {
        2 * self.pot.n + 1
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.pot.n;
        let (x, rest) = y.split_at(n);
        let xi = &rest[..n];
        for i in 0..n {
            dy[i] = 2.0 * xi[i];
        }
        self.pot.grad_v1(x, &mut dy[n..2 * n]);
        for g in &mut dy[n..2 * n] {
            *g = -*g;
        }
        dy[2 * n] = self.pot.v2(x);
    }
}

/// A ray integrator that can be advanced monotonically through output
/// times. Its state carries `D(t)`.
#[derive(Clone)]
pub struct RayStepper<'a> {
    inner: Dopri5<RaySystem<'a>>,
    n: usize,
}

impl<'a> RayStepper<'a> {
    pub fn new(pot: &'a PotentialPair, w0: &PhasePoint, tol: f64) -> Self {
        Self {
            inner: Dopri5::new(RaySystem { pot }, &w0.state(), tol),
            n: pot.n,
        }
    }

    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        self.inner.advance_to(t)
    }

    pub fn time(&self) -> f64 {
        self.inner.t
    }

    pub fn point(&self) -> PhasePoint {
        PhasePoint::from_state(&self.inner.y, self.n)
    }

    pub fn x(&self) -> &[f64] {
        &self.inner.y[..self.n]
    }

    pub fn xi(&self) -> &[f64] {
        &self.inner.y[self.n..2 * self.n]
    }

    /// Accumulated `int_0^t V2(x(s)) ds`.
    pub fn damping(&self) -> f64 {
        self.inner.y[2 * self.n]
    }

    pub fn potential(&self) -> &'a PotentialPair {
        self.inner.system().pot
    }
}

/// Sampled ray with accumulated damping.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    pub damping: Vec<f64>,
    pub energy0: f64,
}

impl Trajectory {
    /// Largest `|p(state) - p(w0)|` along the samples.
    pub fn max_energy_drift(&self, pot: &PotentialPair) -> f64 {
        self.states
            .iter()
            .map(|s| (eval_hamiltonian(pot, s) - self.energy0).abs())
            .fold(0.0, f64::max)
    }

    /// CSV text with columns `t, x.., xi.., damping`.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map(|s| s.n()).unwrap_or(0);
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",xi{i}"));
        }
        out.push_str(",damping\n");
        for ((t, s), d) in self.times.iter().zip(&self.states).zip(&self.damping) {
            out.push_str(&fmt17(*t));
            for v in s.x.iter().chain(&s.xi) {
                out.push(',');
                out.push_str(&fmt17(*v));
            }
            out.push(',');
            out.push_str(&fmt17(*d));
            out.push('\n');
        }
        out
    }
}

/// Float formatting with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sample the ray through `w0` at increasing nonnegative `times`.
pub fn trajectory(pot: &PotentialPair, w0: &PhasePoint, times: &[f64], tol: f64) -> Result<Trajectory> {
    check_point(pot, w0)?;
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidInput("sample times must be nonnegative and increasing".into()));
    }
    let mut st = RayStepper::new(pot, w0, tol);
    let mut states = Vec::with_capacity(times.len());
    let mut damping = Vec::with_capacity(times.len());
    for &t in times {
        st.advance_to(t)?;
        states.push(st.point());
        damping.push(st.damping());
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        damping,
        energy0: eval_hamiltonian(pot, w0),
    })
}

fn check_point(pot: &PotentialPair, w: &PhasePoint) -> Result<()> {
    if w.n() != pot.n {
        return Err(Error::InvalidInput(format!(
            "phase point has dimension {}, potential has {}",
            w.n(),
            pot.n
        )));
    }
    if !w.is_finite() {
        return Err(Error::InvalidInput("phase point is not finite".into()));
    }
    Ok(())
}

/// The ray through `w0` at time `t` (negative times run backwards).
pub fn flow(pot: &PotentialPair, w0: &PhasePoint, t: f64, tol: f64) -> Result<PhasePoint> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    check_point(pot, w0)?;
    let mut st = RayStepper::new(pot, w0, tol);
    st.advance_to(t)?;
    Ok(st.point())
}

/// `int_0^t V2(x(s, w0)) ds` for `t >= 0`.
pub fn damping_integral(pot: &PotentialPair, w0: &PhasePoint, t: f64, tol: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidInput("damping integral needs t >= 0".into()));
    }
    check_point(pot, w0)?;
    if pot.v2.is_zero() {
        return Ok(0.0);
    }
    let mut st = RayStepper::new(pot, w0, tol);
    st.advance_to(t)?;
    Ok(st.damping())
}

/// `exp(-2 t Im e1 - 2 int_0^t V2)`.
pub fn damping_weight(pot: &PotentialPair, w0: &PhasePoint, t: f64, e1: Complex64, tol: f64) -> Result<f64> {
    if e1.im < 0.0 {
        return Err(Error::InvalidInput("Im E1 must be nonnegative".into()));
    }
    let d = damping_integral(pot, w0, t, tol)?;
    Ok(weight_from(t, e1.im, d))
}

/// The damping weight from its ingredients.
pub fn weight_from(t: f64, im_e1: f64, damping: f64) -> f64 {
    (-2.0 * t * im_e1 - 2.0 * damping).exp()
}

/// Fate of a ray within a finite horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowClassification {
    /// Left the ball of radius `R_escape` moving outward, beyond the range
    /// of `V1`.
    Escaping,
    /// Entered `{V2 > gamma}` first.
    MeetsAbsorption,
    /// Neither happened before the horizon.
    TrappedUndetermined,
}

/// Parameters of a classification run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyParams {
    pub t_max: f64,
    pub r_escape: f64,
    pub gamma: f64,
    pub tol: f64,
}

/// Classify the forward ray through `w0`.
pub fn classify_trajectory(pot: &PotentialPair, w0: &PhasePoint, p: &ClassifyParams) -> Result<FlowClassification> {
    check_point(pot, w0)?;
    if !(p.t_max > 0.0) || !(p.gamma > 0.0) {
        return Err(Error::InvalidInput("classification needs T_max > 0 and gamma > 0".into()));
    }
    let r_v1 = pot.v1.negligible_radius(1e-12);
    let escape_radius = p.r_escape.max(r_v1);
    let energy = eval_hamiltonian(pot, w0);
    let speed = 2.0 * (energy - pot.v1.inf_bound()).max(1e-12).sqrt();
    let scale = pot.v2.min_width().min(pot.v1.min_width()).min(1.0);
    let dt = (0.1 * scale / speed).min(p.t_max);
    let mut st = RayStepper::new(pot, w0, p.tol);
    let mut t = 0.0;
    loop {
        let x = st.x();
        if pot.v2(x) > p.gamma {
            return Ok(FlowClassification::MeetsAbsorption);
        }
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radial: f64 = x.iter().zip(st.xi()).map(|(a, b)| a * b).sum();
        if r > escape_radius && radial > 0.0 {
            return Ok(FlowClassification::Escaping);
        }
        if t >= p.t_max {
            return Ok(FlowClassification::TrappedUndetermined);
        }
        t = (t + dt).min(p.t_max);
        st.advance_to(t)?;
    }
}

/// Energy-shell sampler settings shared by the hypothesis checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Lower corner of the sampling box.
    pub box_lo: Vec<f64>,
    /// Upper corner of the sampling box.
    pub box_hi: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub classify: ClassifyParams,
    /// Phase-space half-width of the tube used by [`estimate_return_set`].
    pub tube_half_width: f64,
}

impl SamplerConfig {
    pub fn new(box_lo: Vec<f64>, box_hi: Vec<f64>, samples: usize, seed: u64, classify: ClassifyParams) -> Self {
        Self {
            box_lo,
            box_hi,
            samples,
            seed,
            classify,
            tube_half_width: 1e-2,
        }
    }
}

/// Draw points on `{p = e0}`: `x` uniform in the box (rejected where
/// `V1(x) >= e0`), `xi` uniform on the sphere of radius `sqrt(e0 - V1(x))`.
pub fn sample_energy_shell(pot: &PotentialPair, e0: f64, cfg: &SamplerConfig) -> Result<Vec<PhasePoint>> {
    let n = pot.n;
    if cfg.box_lo.len() != n || cfg.box_hi.len() != n {
        return Err(Error::InvalidInput("sampling box has the wrong dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.samples);
    let max_tries = 1000 * cfg.samples.max(1);
    let mut tries = 0;
    while out.len() < cfg.samples {
        tries += 1;
        if tries > max_tries {
            return Err(Error::EmptyShell(format!(
                "no point with V1 < {e0} found in the sampling box after {max_tries} draws"
            )));
        }
        let x: Vec<f64> = (0..n)
            .map(|i| rng.random_range(cfg.box_lo[i]..=cfg.box_hi[i]))
            .collect();
        let gap = e0 - pot.v1(&x);
        if gap <= 0.0 {
            continue;
        }
        let k = gap.sqrt();
        let dir = random_unit(&mut rng, n);
        out.push(PhasePoint::new(x, dir.iter().map(|d| k * d).collect()));
    }
    Ok(out)
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![if rng.random::<bool>() { 1.0 } else { -1.0 }];
    }
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let r2: f64 = v.iter().map(|a| a * a).sum();
        if r2 > 1e-4 && r2 <= 1.0 {
            let r = r2.sqrt();
            return v.iter().map(|a| a / r).collect();
        }
    }
}

/// Outcome of [`check_absorption_hypothesis`].
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionReport {
    /// Fraction of samples whose forward and backward rays both escape or
    /// meet the absorption.
    pub pass_fraction: f64,
    /// Samples with an undetermined direction.
    pub witnesses: Vec<PhasePoint>,
    pub samples: usize,
}

/// Sample the energy shell and classify each ray in both time directions.
/// The result is an estimate; it never certifies the hypothesis.
pub fn check_absorption_hypothesis(pot: &PotentialPair, e0: f64, cfg: &SamplerConfig) -> Result<AbsorptionReport> {
    let pts = sample_energy_shell(pot, e0, cfg)?;
    let verdicts = par::map_slice(&pts, |w| -> Result<bool> {
        let fwd = classify_trajectory(pot, w, &cfg.classify)?;
        let bwd = classify_trajectory(pot, &w.reversed(), &cfg.classify)?;
        Ok(fwd != FlowClassification::TrappedUndetermined && bwd != FlowClassification::TrappedUndetermined)
    });
    let mut passed = 0usize;
    let mut witnesses = vec![];
    for (w, v) in pts.iter().zip(verdicts) {
        if v? {
            passed += 1;
        } else {
            witnesses.push(w.clone());
        }
    }
    Ok(AbsorptionReport {
        pass_fraction: passed as f64 / pts.len().max(1) as f64,
        witnesses,
        samples: pts.len(),
    })
}

/// Result of [`estimate_return_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSetEstimate {
    /// Weighted fraction of nodes whose ray comes back into the tube.
    pub fraction: f64,
    /// The same fraction restricted to each branch label.
    pub branch_fractions: Vec<(i8, f64)>,
}

/// Weighted fraction of rays from the quadrature nodes of `N_E Gamma`
/// that leave the tube of half-width `cfg.tube_half_width` around it and
/// later come back within `cfg.classify.t_max`. A conservative proxy for
/// the measure of the self-intersection set.
pub fn estimate_return_set(
    source: &SourceManifold,
    pot: &PotentialPair,
    e0: f64,
    quad: &NormalBundleQuadrature,
    cfg: &SamplerConfig,
) -> Result<ReturnSetEstimate> {
    if quad.nodes.is_empty() {
        return Err(Error::EmptyShell("normal energy bundle has no nodes".into()));
    }
    let tube = cfg.tube_half_width;
    let hits = par::map_slice(&quad.nodes, |node| -> Result<bool> {
        let w0 = PhasePoint::new(node.z.clone(), node.xi.clone());
        let k = node.xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dt = 0.05 * tube / (2.0 * k).max(1e-12);
        let mut st = RayStepper::new(pot, &w0, cfg.classify.tol);
        let mut left = false;
        let mut t = 0.0;
        let r_v1 = pot.v1.negligible_radius(1e-12);
        let r_src = source.bounding_radius();
        while t < cfg.classify.t_max {
            t = (t + dt).min(cfg.classify.t_max);
            st.advance_to(t)?;
            let d = source.phase_distance_to_bundle(pot, e0, st.x(), st.xi());
            if !left {
                left = d > 2.0 * tube;
            } else if d < tube {
                return Ok(true);
            }
            let r = st.x().iter().map(|v| v * v).sum::<f64>().sqrt();
            let radial: f64 = st.x().iter().zip(st.xi()).map(|(a, b)| a * b).sum();
            if r > r_src.max(r_v1) + 2.0 * tube && radial > 0.0 {
                return Ok(false);
            }
        }
        Ok(false)
    });
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_branch: Vec<(i8, f64, f64)> = vec![];
    for ((node, w), hit) in quad.nodes.iter().zip(&quad.weights).zip(hits) {
        let hit = hit?;
        den += w;
        let entry = match per_branch.iter_mut().find(|e| e.0 == node.branch) {
            Some(e) => e,
            None => {
                per_branch.push((node.branch, 0.0, 0.0));
                per_branch.last_mut().unwrap()
            }
        };
        entry.2 += w;
        if hit {
            num += w;
            entry.1 += w;
        }
    }
    Ok(ReturnSetEstimate {
        fraction: num / den,
        branch_fractions: per_branch.into_iter().map(|(b, a, d)| (b, a / d)).collect(),
    })
}

/// Exponential envelope `exp(-int_0^t V2) <= C exp(-delta t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingFit {
    pub c: f64,
    pub delta: f64,
    /// Worst deviation of `D(t)` from its fitted line, relative to the
    /// fitted growth `delta * T_max`.
    pub residual: f64,
}

/// Fit the exponential decay of the absorption factor along rays that stay
/// bounded up to `t_max`.
pub fn fit_damping_decay(
    pot: &PotentialPair,
    w0_set: &[PhasePoint],
    t_max: f64,
    r_bound: f64,
    tol: f64,
) -> Result<DampingFit> {
    if w0_set.is_empty() || !(t_max > 0.0) {
        return Err(Error::InvalidInput("need rays and T_max > 0".into()));
    }
    let samples = 400usize;
    let times: Vec<f64> = (0..=samples).map(|i| t_max * i as f64 / samples as f64).collect();
    let mut delta = f64::INFINITY;
    let mut log_c = f64::NEG_INFINITY;
    let mut residual = 0.0f64;
    for w0 in w0_set {
        let tr = trajectory(pot, w0, &times, tol)?;
        let escaped = tr.states.iter().any(|s| s.x.iter().map(|v| v * v).sum::<f64>().sqrt() > r_bound);
        if escaped {
            return Err(Error::FitRejected(format!("ray from {:?} leaves the ball of radius {r_bound}", w0.x)));
        }
        let fit = crate::stats::fit_line(&tr.times, &tr.damping);
        if !(fit.slope > 0.0) {
            return Err(Error::FitRejected(format!(
                "no exponential decay along the ray from {:?} (fitted rate {})",
                w0.x, fit.slope
            )));
        }
        delta = delta.min(fit.slope);
        let worst = tr
            .times
            .iter()
            .zip(&tr.damping)
            .map(|(t, d)| (d - fit.slope * t - fit.intercept).abs())
            .fold(0.0, f64::max);
        residual = residual.max(worst / (fit.slope * t_max));
    }
    for w0 in w0_set {
        let tr = trajectory(pot, w0, &times, tol)?;
        for (t, d) in tr.times.iter().zip(&tr.damping) {
            log_c = log_c.max(-d + delta * t);
        }
    }
    Ok(DampingFit {
        c: log_c.exp(),
        delta,
        residual,
    })
}
