//! Lattice Wigner transforms and Weyl pairings of grid fields.
//!
//! On a grid with spacing `dx` the transform uses separations `v = 2 k dx`,
//! so row `x_j` only involves `u(x_j + k dx) conj(u(x_j - k dx))`. The
//! momentum lattice is `xi_m = m pi h / (M dx)` for `-M/2 <= m < M/2` per
//! axis, and the lattice window is `|xi| <= pi h / (2 dx)`. The field is
//! extended by zero outside the box, so the separation integral is cut at
//! the box size; wrapping indices instead would pair each point with its
//! image half a box away.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::helmholtz::{DiscreteField, Grid};
use crate::measure::Observable;
use crate::par;
use crate::stats::pairwise_sum;

/// Largest lattice handled by [`wigner_transform`].
pub const MAX_FULL_LATTICE: usize = 1 << 27;

/// Half-width of the momentum window.
pub fn momentum_window(h: f64, dx: f64) -> f64 {
    PI * h / (2.0 * dx)
}

/// Momentum lattice spacing for `m` points per axis.
pub fn momentum_spacing(h: f64, dx: f64, m: usize) -> f64 {
    PI * h / (m as f64 * dx)
}

/// The Wigner function sampled at a set of grid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerGrid {
    pub grid: Grid,
    pub h: f64,
    /// Flat grid indices of the sampled rows.
    pub rows: Vec<usize>,
    /// Momentum points per axis.
    pub m: usize,
    /// Row-major values, `m^n` per row, momentum axes ordered like
    /// [`WignerGrid::xi`].
    pub values: Vec<f64>,
}

impl WignerGrid {
    pub fn dxi(&self) -> f64 {
        momentum_spacing(self.h, self.grid.dx, self.m)
    }

    /// Momentum coordinate of lattice index `i` along one axis.
    pub fn xi_axis(&self, i: usize) -> f64 {
        (i as f64 - (self.m / 2) as f64) * self.dxi()
    }

    /// Momentum of flat index `idx` within a row.
    pub fn xi(&self, idx: usize) -> Vec<f64> {
        match self.grid.n {
            1 => vec![self.xi_axis(idx)],
            _ => vec![self.xi_axis(idx / self.m), self.xi_axis(idx % self.m)],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let len = self.m.pow(self.grid.n as u32);
        &self.values[r * len..(r + 1) * len]
    }

    /// Lattice sum of `W dx dxi`.
    pub fn total(&self) -> f64 {
        let cell = self.grid.cell_volume() * self.dxi().powi(self.grid.n as i32);
        pairwise_sum(&self.values) * cell
    }

    /// Rows `x.., xi.., w`.
    pub fn to_csv(&self) -> String {
        let n = self.grid.n;
        let mut out = String::new();
        for i in 0..n {
            out.push_str(&format!("x{i},"));
        }
        for i in 0..n {
            out.push_str(&format!("xi{i},"));
        }
        out.push_str("w\n");
        for (r, &g) in self.rows.iter().enumerate() {
            let x = self.grid.point(g);
            for (k, w) in self.row(r).iter().enumerate() {
                for v in x.iter().chain(&self.xi(k)) {
                    out.push_str(&format!("{v:.16e},"));
                }
                out.push_str(&format!("{w:.16e}\n"));
            }
        }
        out
    }
}

/// Reusable machinery for computing Wigner rows with `m` momenta per axis.
struct RowEngine<'a> {
    u: &'a DiscreteField,
    m: usize,
    fft: Arc<dyn Fft<f64>>,
    /// Separations are restricted to `|k| < kmax` per axis.
    kmax: i64,
    scale: f64,
}

impl<'a> RowEngine<'a> {
    fn new(u: &'a DiscreteField, m: usize) -> Result<Self> {
        if u.grid.n > 2 {
            return Err(Error::Unsupported("Wigner transforms are implemented for n <= 2".into()));
        }
        if m < 2 || !m.is_power_of_two() {
            return Err(Error::InvalidInput("momentum lattice size must be a power of two".into()));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        let npts = u.grid.npts as i64;
        let kmax = npts.min(m as i64 / 2);
        let scale = (u.grid.dx / (PI * u.h)).powi(u.grid.n as i32);
        Ok(Self { u, m, fft, kmax, scale })
    }

    /// Wigner values at grid point `g`, `m^n` entries ordered by momentum
    /// index starting from `-m/2`.
    fn row(&self, g: usize) -> Vec<f64> {
        let grid = &self.u.grid;
        let n = grid.n;
        let npts = grid.npts as i64;
        let m = self.m;
        let vals = &self.u.values;
        let inside = |i: i64| (0..npts).contains(&i);
        let pos = |k: i64| k.rem_euclid(m as i64) as usize;
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut out = vec![0.0; m.pow(n as u32)];
        if n == 1 {
            let j = g as i64;
            let mut buf = vec![Complex64::new(0.0, 0.0); m];
            let kk = self.kmax.min(j + 1).min(npts - j);
            for k in (1 - kk)..kk {
                buf[pos(k)] = vals[(j + k) as usize] * vals[(j - k) as usize].conj();
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (i, o) in out.iter_mut().enumerate() {
                let mi = i as i64 - (m / 2) as i64;
                *o = self.scale * buf[pos(mi)].re;
            }
        } else {
            let [j0, j1] = grid.multi_index(g);
            let (j0, j1) = (j0 as i64, j1 as i64);
            let at = |a: usize, b: usize| vals[a * grid.npts + b];
            let mut buf = vec![Complex64::new(0.0, 0.0); m * m];
            for k0 in (1 - self.kmax)..self.kmax {
                if !inside(j0 + k0) || !inside(j0 - k0) {
                    continue;
                }
                for k1 in (1 - self.kmax)..self.kmax {
                    if !inside(j1 + k1) || !inside(j1 - k1) {
                        continue;
                    }
                    let f = at((j0 + k0) as usize, (j1 + k1) as usize) * at((j0 - k0) as usize, (j1 - k1) as usize).conj();
                    buf[pos(k0) * m + pos(k1)] = f;
                }
            }
            for r in buf.chunks_mut(m) {
                self.fft.process_with_scratch(r, &mut scratch);
            }
            let mut col = vec![Complex64::new(0.0, 0.0); m];
            for c in 0..m {
                for r in 0..m {
                    col[r] = buf[r * m + c];
                }
                self.fft.process_with_scratch(&mut col, &mut scratch);
                for r in 0..m {
                    buf[r * m + c] = col[r];
                }
            }
            for i0 in 0..m {
                for i1 in 0..m {
                    let m0 = i0 as i64 - (m / 2) as i64;
                    let m1 = i1 as i64 - (m / 2) as i64;
                    out[i0 * m + i1] = self.scale * buf[pos(m0) * m + pos(m1)].re;
                }
            }
        }
        out
    }

    fn xi_axis(&self, i: usize) -> f64 {
        (i as f64 - (self.m / 2) as f64) * momentum_spacing(self.u.h, self.u.grid.dx, self.m)
    }

    fn xi(&self, idx: usize) -> [f64; 2] {
        if self.u.grid.n == 1 {
            [self.xi_axis(idx), 0.0]
        } else {
            [self.xi_axis(idx / self.m), self.xi_axis(idx % self.m)]
        }
    }

    /// `sum_rows sum_xi f(x, xi, W) dx dxi` over the given rows.
    fn reduce<F>(&self, rows: &[usize], f: F) -> f64
    where
        F: Fn(&[f64], &[f64], f64) -> f64 + Sync,
    {
        let n = self.u.grid.n;
        let cell = self.u.grid.cell_volume() * momentum_spacing(self.u.h, self.u.grid.dx, self.m).powi(n as i32);
        let parts = par::map_slice(rows, |&g| {
            let x = self.u.grid.point(g);
            let w = self.row(g);
            let terms: Vec<f64> = w
                .iter()
                .enumerate()
                .map(|(i, &wv)| {
                    let xi = self.xi(i);
                    f(&x, &xi[..n], wv)
                })
                .collect();
            pairwise_sum(&terms)
        });
        pairwise_sum(&parts) * cell
    }
}

/// Smallest power of two that is at least `n`.
fn pow2_at_least(n: usize) -> usize {
    n.max(2).next_power_of_two()
}

/// The full Wigner lattice of a field, with as many momenta per axis as
/// there are grid points.
pub fn wigner_transform(u: &DiscreteField) -> Result<WignerGrid> {
    let m = pow2_at_least(u.grid.npts);
    let cells = u.grid.len().saturating_mul(m.pow(u.grid.n as u32));
    if cells > MAX_FULL_LATTICE {
        return Err(Error::TooLarge(format!("full Wigner lattice with {cells} cells")));
    }
    wigner_rows(u, &(0..u.grid.len()).collect::<Vec<_>>(), m)
}

/// Wigner rows at selected grid points with `m` momenta per axis.
pub fn wigner_rows(u: &DiscreteField, rows: &[usize], m: usize) -> Result<WignerGrid> {
    let eng = RowEngine::new(u, m)?;
    let chunks = par::map_slice(rows, |&g| eng.row(g));
    Ok(WignerGrid {
        grid: u.grid.clone(),
        h: u.h,
        rows: rows.to_vec(),
        m,
        values: chunks.concat(),
    })
}

/// Momentum points per axis needed to resolve `q` on the lattice of `u`.
///
/// The lattice pairing equals `sum_k f_k K(k)` with the kernel of `q`
/// aliased with period `m`. The kernel is negligible beyond
/// `e ~ 4.5 h / (sigma_xi dx)`, so `m >= min(k_grid, e) + e` suffices.
pub fn pairing_lattice_size(q: &Observable, u: &DiscreteField) -> usize {
    let sigma = q.terms.iter().map(|t| t.xi_kernel_scale).fold(f64::INFINITY, f64::min);
    let e = (4.5 * u.h / (sigma * u.grid.dx)).ceil() as usize + 1;
    pow2_at_least((u.grid.npts.min(e) + e).max(64))
}

fn check_window(q: &Observable, u: &DiscreteField) -> Result<()> {
    let win = momentum_window(u.h, u.grid.dx);
    for t in &q.terms {
        let c = t.center[q.n..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if c + t.xi_radius > win {
            return Err(Error::Resolution(format!(
                "observable reaches |xi| = {:.3} beyond the momentum window {win:.3}",
                c + t.xi_radius
            )));
        }
    }
    Ok(())
}

/// Grid rows whose position lies in the x-support of some term of `q`.
fn support_rows(q: &Observable, grid: &Grid) -> Vec<usize> {
    (0..grid.len())
        .filter(|&g| {
            let x = grid.point(g);
            q.terms.iter().any(|t| {
                let d2: f64 = x.iter().zip(&t.center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 <= t.x_radius * t.x_radius
            })
        })
        .collect()
}

/// `<Op^w(q) u, u>` as the lattice sum of `q W`, restricted to rows inside
/// the x-support of `q`.
pub fn weyl_pairing(q: &Observable, u: &DiscreteField) -> Result<f64> {
    if q.n != u.grid.n {
        return Err(Error::InvalidInput("observable and field dimensions differ".into()));
    }
    check_window(q, u)?;
    let rows = support_rows(q, &u.grid);
    let m = pairing_lattice_size(q, u);
    let eng = RowEngine::new(u, m)?;
    Ok(eng.reduce(&rows, |x, xi, w| if w == 0.0 { 0.0 } else { q.eval(x, xi) * w }))
}

/// Lattice pairing with an arbitrary phase-space function over all rows.
pub fn lattice_pairing<F>(u: &DiscreteField, m: usize, f: F) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let eng = RowEngine::new(u, m)?;
    let rows: Vec<usize> = (0..u.grid.len()).collect();
    Ok(eng.reduce(&rows, |x, xi, w| f(x, xi) * w))
}

/// Analytic `(2 pi h)^{-n} int q(m, xi) e^{i <w, xi> / h} dxi` for a
/// Gaussian observable.
fn weyl_kernel(q: &Observable, h: f64, mid: &[f64], w: &[f64]) -> Complex64 {
    let n = q.n;
    let n2 = 2 * n;
    let mut acc = Complex64::new(0.0, 0.0);
    for t in &q.terms {
        let p = &t.inverse_covariance;
        let dx: Vec<f64> = (0..n).map(|i| mid[i] - t.center[i]).collect();
        // Blocks A (x, x), B (x, xi), C (xi, xi) of the inverse covariance.
        let a = |i: usize, j: usize| p[i * n2 + j];
        let b = |i: usize, j: usize| p[i * n2 + n + j];
        let c = |i: usize, j: usize| p[(n + i) * n2 + n + j];
        let mut xax = 0.0;
        for i in 0..n {
            for j in 0..n {
                xax += dx[i] * a(i, j) * dx[j];
            }
        }
        // Linear coefficient beta = -B^T dx + i w / h.
        let beta: Vec<Complex64> = (0..n)
            .map(|j| {
                let re: f64 = -(0..n).map(|i| dx[i] * b(i, j)).sum::<f64>();
                Complex64::new(re, w[j] / h)
            })
            .collect();
        let (det, quad) = if n == 1 {
            let c00 = c(0, 0);
            (c00, beta[0] * beta[0] / c00)
        } else {
            let (c00, c01, c11) = (c(0, 0), c(0, 1), c(1, 1));
            let det = c00 * c11 - c01 * c01;
            let q = (beta[0] * beta[0] * c11 - 2.0 * beta[0] * beta[1] * c01 + beta[1] * beta[1] * c00) / det;
            (det, q)
        };
        let phase: f64 = (0..n).map(|i| w[i] * t.center[n + i]).sum::<f64>() / h;
        let gauss = (2.0 * PI).powf(n as f64 / 2.0) / det.sqrt();
        acc += t.coefficient * gauss * (-0.5 * xax + 0.5 * quad).exp() * Complex64::from_polar(1.0, phase);
    }
    acc / (2.0 * PI * h).powi(n as i32)
}

/// Reference pairing by direct quadrature of the Weyl integral operator,
/// `sum_{x, y} conj(u(x)) K((x + y) / 2, x - y) u(y) dx dy`. Quadratic in
/// the grid size; meant for grids of at most `64^n` points.
pub fn weyl_pairing_direct(q: &Observable, u: &DiscreteField) -> Result<f64> {
    if q.n != u.grid.n {
        return Err(Error::InvalidInput("observable and field dimensions differ".into()));
    }
    let len = u.grid.len();
    if len > 1 << 13 {
        return Err(Error::TooLarge(format!("direct Weyl quadrature on {len} points")));
    }
    let n = q.n;
    let h = u.h;
    let pts: Vec<Vec<f64>> = (0..len).map(|g| u.grid.point(g)).collect();
    let parts = par::map_range(len, |i| {
        let ui = u.values[i].conj();
        if ui == Complex64::new(0.0, 0.0) {
            return Complex64::new(0.0, 0.0);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        let mut mid = vec![0.0; n];
        let mut w = vec![0.0; n];
        for j in 0..len {
            for k in 0..n {
                mid[k] = 0.5 * (pts[i][k] + pts[j][k]);
                w[k] = pts[i][k] - pts[j][k];
            }
            acc += ui * weyl_kernel(q, h, &mid, &w) * u.values[j];
        }
        acc
    });
    let cell = u.grid.cell_volume();
    let re: Vec<f64> = parts.iter().map(|z| z.re).collect();
    Ok(pairwise_sum(&re) * cell * cell)
}

/// The incoming cone `{|x| >= r, |xi| >= d, <x, xi> < -sigma |x| |xi|}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncomingRegion {
    pub r: f64,
    pub d_mom: f64,
    pub sigma: f64,
}

impl IncomingRegion {
    pub fn new(r: f64, d_mom: f64, sigma: f64) -> Result<Self> {
        if !(r > 0.0 && d_mom > 0.0 && sigma > -1.0 && sigma < 1.0) {
            return Err(Error::InvalidInput("incoming region needs r, d > 0 and |sigma| < 1".into()));
        }
        Ok(Self { r, d_mom, sigma })
    }

    pub fn contains(&self, x: &[f64], xi: &[f64]) -> bool {
        let rx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rxi = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
        rx >= self.r && rxi >= self.d_mom && dot < -self.sigma * rx * rxi
    }

    /// Smooth version of the indicator with transition width `eps` in each
    /// of the three defining inequalities.
    pub fn smooth(&self, x: &[f64], xi: &[f64], eps: f64) -> f64 {
        let s = |t: f64| 1.0 / (1.0 + (-t / eps).exp());
        let rx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rxi = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rx == 0.0 || rxi == 0.0 {
            return 0.0;
        }
        let cosang: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() / (rx * rxi);
        s(rx - self.r) * s(rxi - self.d_mom) * s(-cosang - self.sigma)
    }
}

/// Default momentum lattice for mass diagnostics.
pub fn default_mass_lattice(u: &DiscreteField) -> usize {
    let cap = if u.grid.n == 1 { 1 << 16 } else { 1 << 7 };
    pow2_at_least(u.grid.npts).min(cap)
}

/// Clipped mass `int_{incoming} max(W, 0)` on the lattice.
pub fn incoming_mass(u: &DiscreteField, region: &IncomingRegion, m: Option<usize>) -> Result<f64> {
    let m = m.unwrap_or_else(|| default_mass_lattice(u));
    let eng = RowEngine::new(u, m)?;
    let rows: Vec<usize> = (0..u.grid.len())
        .filter(|&g| {
            let x = u.grid.point(g);
            x.iter().map(|v| v * v).sum::<f64>().sqrt() >= region.r
        })
        .collect();
    Ok(eng.reduce(&rows, |x, xi, w| if w > 0.0 && region.contains(x, xi) { w } else { 0.0 }))
}

/// Unclipped pairing with the smoothed indicator of the incoming region.
pub fn incoming_mass_smooth(u: &DiscreteField, region: &IncomingRegion, eps: f64, m: Option<usize>) -> Result<f64> {
    let m = m.unwrap_or_else(|| default_mass_lattice(u));
    let eng = RowEngine::new(u, m)?;
    let cut = region.r - 40.0 * eps;
    let rows: Vec<usize> = (0..u.grid.len())
        .filter(|&g| {
            let x = u.grid.point(g);
            x.iter().map(|v| v * v).sum::<f64>().sqrt() >= cut
        })
        .collect();
    Ok(eng.reduce(&rows, |x, xi, w| region.smooth(x, xi, eps) * w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet(x0: f64, xi0: f64, h: f64) -> DiscreteField {
        let grid = Grid::new(1, 2.0, h / 4.0, None).unwrap();
        DiscreteField::from_fn(&grid, h, |x| {
            let a = (PI * h).powf(-0.25) * (-(x[0] - x0).powi(2) / (2.0 * h)).exp();
            Complex64::from_polar(a, xi0 * x[0] / h)
        })
    }

    #[test]
    fn marginal_is_the_norm() {
        let u = packet(0.3, 1.0, 1.0 / 16.0);
        let w = wigner_transform(&u).unwrap();
        assert!((w.total() - u.norm_sqr()).abs() <= 1e-8 * u.norm_sqr());
    }

    #[test]
    fn coherent_state_peak() {
        let h = 1.0 / 16.0;
        let u = packet(0.0, 1.0, h);
        let g = u.grid.axis_coords().iter().position(|&x| x.abs() < 1e-12).unwrap();
        let m = 256;
        let w = wigner_rows(&u, &[g], m).unwrap();
        let (best, val) = w
            .row(0)
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert!((w.xi_axis(best) - 1.0).abs() <= w.dxi());
        let want = (-(w.xi_axis(best) - 1.0).powi(2) / h).exp() / (PI * h);
        assert!((val - want).abs() < 1e-8 * want, "{val} vs {want}");
    }
}
