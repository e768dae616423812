//! Grid solutions of `(-h^2 Δ + V1 - i h V2 - E_h) u = S_h` in one and two
//! dimensions.
//!
//! The outgoing condition is imposed by a complex absorbing ramp added to
//! `V2` near the boundary together with a small shift `E_h + i mu`.
//! Homogeneous Dirichlet values are assumed just outside the box.

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::banded::BandedMatrix;
use crate::error::{Error, Result};
use crate::par;
use crate::potential_flow::{EnergySpec, PotentialPair};
use crate::stats::pairwise_sum;

/// Hard cap on the number of unknowns of a direct solve.
pub const MAX_UNKNOWNS: usize = 4_000_000;
/// Memory budget for the banded factorization.
pub const MAX_FACTOR_BYTES: usize = 2 << 30;

/// Absorbing ramp `strength * ((d - (L - width)) / width)^2` inside the
/// outer `width` of each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub width: f64,
    pub strength: f64,
}

/// Uniform grid on `[-L, L]^n` with nodes at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub half_extent: f64,
    pub dx: f64,
    /// Nodes per axis.
    pub npts: usize,
    pub layer: Option<Layer>,
}

impl Grid {
    /// Grid with spacing at most `dx_max`. The node count per axis is odd
    /// so that the origin is a node.
    pub fn new(n: usize, half_extent: f64, dx_max: f64, layer: Option<Layer>) -> Result<Self> {
        if n != 1 && n != 2 {
            return Err(Error::Unsupported(format!("grids of dimension {n}")));
        }
        if !(half_extent > 0.0 && dx_max > 0.0) {
            return Err(Error::InvalidInput("grid needs L > 0 and dx > 0".into()));
        }
        let mut cells = (2.0 * half_extent / dx_max).ceil() as usize;
        if cells % 2 == 1 {
            cells += 1;
        }
        let npts = cells + 1;
        if let Some(l) = layer {
            if !(l.width > 0.0 && l.width < half_extent && l.strength >= 0.0) {
                return Err(Error::InvalidInput("absorbing layer must fit inside the box".into()));
            }
        }
        Ok(Self {
            n,
            half_extent,
            dx: 2.0 * half_extent / cells as f64,
            npts,
            layer,
        })
    }

    pub fn len(&self) -> usize {
        self.npts.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, i: usize) -> f64 {
        -self.half_extent + i as f64 * self.dx
    }

    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.npts).map(|i| self.axis(i)).collect()
    }

    /// Multi-index of a flat index; the first axis varies slowest.
    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        if self.n == 1 {
            [idx, 0]
        } else {
            [idx / self.npts, idx % self.npts]
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let m = self.multi_index(idx);
        (0..self.n).map(|k| self.axis(m[k])).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.powi(self.n as i32)
    }

    /// Reject grids coarser than `h / 4`.
    pub fn check_resolves(&self, h: f64) -> Result<()> {
        if self.dx > 0.25 * h * (1.0 + 1e-9) {
            return Err(Error::Resolution(format!(
                "spacing {} exceeds h/4 = {}",
                self.dx,
                0.25 * h
            )));
        }
        if let Some(l) = self.layer {
            if l.width < 10.0 * h * (1.0 - 1e-9) {
                return Err(Error::Resolution(format!(
                    "absorbing layer width {} is below 10 h = {}",
                    l.width,
                    10.0 * h
                )));
            }
        }
        Ok(())
    }

    /// Value of the absorbing ramp at `x`.
    pub fn layer_profile(&self, x: &[f64]) -> f64 {
        match self.layer {
            None => 0.0,
            Some(l) => {
                let start = self.half_extent - l.width;
                x.iter()
                    .map(|v| {
                        let d = v.abs() - start;
                        if d > 0.0 {
                            l.strength * (d / l.width).powi(2)
                        } else {
                            0.0
                        }
                    })
                    .sum()
            }
        }
    }

    /// Whether `x` lies in the central `frac` portion of the box.
    pub fn in_interior(&self, x: &[f64], frac: f64) -> bool {
        x.iter().all(|v| v.abs() <= frac * self.half_extent + 1e-12)
    }
}

/// Complex samples on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    pub values: Vec<Complex64>,
    pub grid: Grid,
    pub h: f64,
}

impl DiscreteField {
    pub fn zeros(grid: &Grid, h: f64) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            grid: grid.clone(),
            h,
        }
    }

    pub fn from_fn<F: Fn(&[f64]) -> Complex64 + Sync + Send>(grid: &Grid, h: f64, f: F) -> Self {
        let values = par::map_range(grid.len(), |i| f(&grid.point(i)));
        Self {
            values,
            grid: grid.clone(),
            h,
        }
    }

    /// Plain `L^2` norm.
    pub fn norm(&self) -> f64 {
        weighted_norm(self, 0.0)
    }

    pub fn norm_sqr(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v.norm_sqr()).collect();
        pairwise_sum(&sq) * self.grid.cell_volume()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = v.conj());
        out
    }

    /// `L^2` norm of `self - other` over the central `frac` of the box.
    pub fn interior_diff_norm(&self, other: &DiscreteField, frac: f64) -> f64 {
        let mut acc = vec![];
        for i in 0..self.values.len() {
            if self.grid.in_interior(&self.grid.point(i), frac) {
                acc.push((self.values[i] - other.values[i]).norm_sqr());
            }
        }
        (pairwise_sum(&acc) * self.grid.cell_volume()).sqrt()
    }

    /// `L^2` norm over the central `frac` of the box.
    pub fn interior_norm(&self, frac: f64) -> f64 {
        let mut acc = vec![];
        for i in 0..self.values.len() {
            if self.grid.in_interior(&self.grid.point(i), frac) {
                acc.push(self.values[i].norm_sqr());
            }
        }
        (pairwise_sum(&acc) * self.grid.cell_volume()).sqrt()
    }

    /// CSV export with columns `x.., re, im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..self.grid.n {
            out.push_str(&format!("x{k},"));
        }
        out.push_str("re,im\n");
        for (i, v) in self.values.iter().enumerate() {
            for c in self.grid.point(i) {
                out.push_str(&format!("{c:.16e},"));
            }
            out.push_str(&format!("{:.16e},{:.16e}\n", v.re, v.im));
        }
        out
    }

    /// Binary layout, little endian: magic `SLFD`, `u32` version, `u32`
    /// dimension, `u64` nodes per axis, `f64` half extent, `f64` spacing,
    /// `f64` h, `u8` layer flag with two `f64` layer parameters, then the
    /// values as `(re, im)` pairs of `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"SLFD")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.grid.n as u32).to_le_bytes())?;
        w.write_all(&(self.grid.npts as u64).to_le_bytes())?;
        w.write_all(&self.grid.half_extent.to_le_bytes())?;
        w.write_all(&self.grid.dx.to_le_bytes())?;
        w.write_all(&self.h.to_le_bytes())?;
        match self.grid.layer {
            None => {
                w.write_all(&[0u8])?;
                w.write_all(&0f64.to_le_bytes())?;
                w.write_all(&0f64.to_le_bytes())?;
            }
            Some(l) => {
                w.write_all(&[1u8])?;
                w.write_all(&l.width.to_le_bytes())?;
                w.write_all(&l.strength.to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |m: &str| IoError::new(ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SLFD" {
            return Err(bad("not a field file"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(bad("unsupported field file version"));
        }
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let npts = u64::from_le_bytes(b8) as usize;
        let f = |r: &mut R| -> std::io::Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let half_extent = f(&mut r)?;
        let dx = f(&mut r)?;
        let h = f(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let lw = f(&mut r)?;
        let ls = f(&mut r)?;
        if n != 1 && n != 2 {
            return Err(bad("field dimension must be 1 or 2"));
        }
        let grid = Grid {
            n,
            half_extent,
            dx,
            npts,
            layer: if flag[0] == 1 {
                Some(Layer {
                    width: lw,
                    strength: ls,
                })
            } else {
                None
            },
        };
        let len = grid.len();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let re = f(&mut r)?;
            let im = f(&mut r)?;
            values.push(Complex64::new(re, im));
        }
        Ok(Self { values, grid, h })
    }
}

/// How the outgoing condition is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Only the shift `E_h + i mu`; the box boundary is reflecting.
    ShiftOnly,
    /// The grid's absorbing ramp plus the shift.
    LayerAndShift,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub mu_reg: f64,
    pub mode: SolverMode,
    /// Accepted relative residual of the linear solve.
    pub tolerance: f64,
}

impl SolverConfig {
    /// Layer plus shift with `mu = h^2`.
    pub fn default_for(h: f64) -> Self {
        Self {
            mu_reg: h * h,
            mode: SolverMode::LayerAndShift,
            tolerance: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mode == SolverMode::ShiftOnly && !(self.mu_reg > 0.0) {
            return Err(Error::InvalidInput("shift-only mode needs mu > 0".into()));
        }
        if self.mu_reg < 0.0 {
            return Err(Error::InvalidInput("mu must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The diagonal potential term `V1 - i h (V2 + ramp) - (E_h + i mu)` at
/// every node.
pub fn diagonal_potential(pot: &PotentialPair, e: &EnergySpec, grid: &Grid, cfg: &SolverConfig) -> Vec<Complex64> {
    let shift = e.e_h() + Complex64::new(0.0, cfg.mu_reg);
    let use_layer = cfg.mode == SolverMode::LayerAndShift;
    par::map_range(grid.len(), |i| {
        let x = grid.point(i);
        let ramp = if use_layer { grid.layer_profile(&x) } else { 0.0 };
        Complex64::new(pot.v1(&x), -e.h * (pot.v2(&x) + ramp)) - shift
    })
}

/// Second-order centered discretization as a banded matrix.
pub fn assemble(pot: &PotentialPair, e: &EnergySpec, grid: &Grid, cfg: &SolverConfig) -> Result<BandedMatrix> {
    cfg.validate()?;
    grid.check_resolves(e.h)?;
    if pot.n != grid.n {
        return Err(Error::InvalidInput("potential and grid dimensions differ".into()));
    }
    let len = grid.len();
    if len > MAX_UNKNOWNS {
        return Err(Error::TooLarge(format!("{len} unknowns exceed the cap of {MAX_UNKNOWNS}")));
    }
    let band = if grid.n == 1 { 1 } else { grid.npts };
    if BandedMatrix::storage_bytes(len, band, band) > MAX_FACTOR_BYTES {
        return Err(Error::TooLarge(format!(
            "banded factorization of {len} unknowns with bandwidth {band} exceeds the memory budget"
        )));
    }
    let diag = diagonal_potential(pot, e, grid, cfg);
    let c = e.h * e.h / (grid.dx * grid.dx);
    let off = Complex64::new(-c, 0.0);
    let mut m = BandedMatrix::zeros(len, band, band);
    let npts = grid.npts;
    for (i, d) in diag.iter().enumerate() {
        m.set(i, i, d + Complex64::new(2.0 * c * grid.n as f64, 0.0));
        let mi = grid.multi_index(i);
        // Neighbours along the last axis (stride 1).
        let last = mi[grid.n - 1];
        if last > 0 {
            m.set(i, i - 1, off);
        }
        if last + 1 < npts {
            m.set(i, i + 1, off);
        }
        if grid.n == 2 {
            if mi[0] > 0 {
                m.set(i, i - npts, off);
            }
            if mi[0] + 1 < npts {
                m.set(i, i + npts, off);
            }
        }
    }
    Ok(m)
}

/// Apply the discrete operator without forming a matrix.
pub fn apply_operator(
    pot: &PotentialPair,
    e: &EnergySpec,
    grid: &Grid,
    cfg: &SolverConfig,
    u: &[Complex64],
) -> Vec<Complex64> {
    let diag = diagonal_potential(pot, e, grid, cfg);
    let c = e.h * e.h / (grid.dx * grid.dx);
    let npts = grid.npts;
    let zero = Complex64::new(0.0, 0.0);
    par::map_range(grid.len(), |i| {
        let mi = grid.multi_index(i);
        let mut lap = Complex64::new(2.0 * c * grid.n as f64, 0.0) * u[i];
        let last = mi[grid.n - 1];
        lap -= c * if last > 0 { u[i - 1] } else { zero };
        lap -= c * if last + 1 < npts { u[i + 1] } else { zero };
        if grid.n == 2 {
            lap -= c * if mi[0] > 0 { u[i - npts] } else { zero };
            lap -= c * if mi[0] + 1 < npts { u[i + npts] } else { zero };
        }
        lap + diag[i] * u[i]
    })
}

/// Solve for the outgoing solution with a direct banded factorization.
pub fn solve_outgoing(
    pot: &PotentialPair,
    e: &EnergySpec,
    source_field: &DiscreteField,
    grid: &Grid,
    cfg: &SolverConfig,
) -> Result<DiscreteField> {
    if source_field.grid != *grid {
        return Err(Error::InvalidInput("source field lives on a different grid".into()));
    }
    let m = assemble(pot, e, grid, cfg)?;
    let lu = m.factor()?;
    let b = &source_field.values;
    let mut x = lu.solve(b);
    // One step of iterative refinement keeps the residual at roundoff even
    // for badly scaled systems.
    let r0 = residual(pot, e, grid, cfg, &x, b);
    let bnorm = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut rel = r0.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt() / bnorm;
    if rel > 1e-13 {
        let dx = lu.solve(&r0);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        let r1 = residual(pot, e, grid, cfg, &x, b);
        rel = r1.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt() / bnorm;
    }
    if !(rel <= cfg.tolerance) {
        return Err(Error::InvalidInput(format!(
            "linear solve residual {rel:e} above tolerance {:e}",
            cfg.tolerance
        )));
    }
    Ok(DiscreteField {
        values: x,
        grid: grid.clone(),
        h: e.h,
    })
}

fn residual(
    pot: &PotentialPair,
    e: &EnergySpec,
    grid: &Grid,
    cfg: &SolverConfig,
    x: &[Complex64],
    b: &[Complex64],
) -> Vec<Complex64> {
    let ax = apply_operator(pot, e, grid, cfg, x);
    b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
}

/// `k = sqrt(e0 + i h eps)` on the branch with `Im k >= 0`.
pub fn outgoing_wavenumber(e0: f64, eps: f64, h: f64) -> Complex64 {
    let k = Complex64::new(e0, h * eps).sqrt();
    if k.im < 0.0 {
        -k
    } else {
        k
    }
}

/// Free outgoing solution in one dimension,
/// `u(x) = i / (2 h k) int exp(i k |x - y| / h) S_h(y) dy`, by the
/// trapezoid rule on the source grid. Runs in linear time through the
/// split `|x - y| = ±(x - y)`.
pub fn analytic_outgoing_1d_free(e0: f64, eps: f64, h: f64, source_field: &DiscreteField) -> Result<DiscreteField> {
    let grid = &source_field.grid;
    if grid.n != 1 {
        return Err(Error::Unsupported("the free oracle is one-dimensional".into()));
    }
    let k = outgoing_wavenumber(e0, eps, h);
    let step = (Complex64::i() * k * grid.dx / h).exp();
    let s = &source_field.values;
    let n = s.len();
    let mut left = vec![Complex64::new(0.0, 0.0); n];
    let mut right = vec![Complex64::new(0.0, 0.0); n];
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..n {
        acc = acc * step + s[j];
        left[j] = acc;
    }
    acc = Complex64::new(0.0, 0.0);
    for j in (0..n).rev() {
        right[j] = acc;
        acc = (acc + s[j]) * step;
    }
    let pref = Complex64::i() / (2.0 * h * k) * grid.dx;
    let values = left.iter().zip(&right).map(|(a, b)| pref * (a + b)).collect();
    Ok(DiscreteField {
        values,
        grid: grid.clone(),
        h,
    })
}

/// Point-mass response `i exp(i k |x| / h) / (2 h k)`.
pub fn point_source_outgoing_1d(e0: f64, eps: f64, h: f64, x: f64) -> Complex64 {
    let k = outgoing_wavenumber(e0, eps, h);
    Complex64::i() * (Complex64::i() * k * x.abs() / h).exp() / (2.0 * h * k)
}

/// `(sum <x>^{2 alpha} |u|^2 dx^n)^{1/2}`.
pub fn weighted_norm(u: &DiscreteField, alpha: f64) -> f64 {
    let terms: Vec<f64> = (0..u.values.len())
        .map(|i| {
            let x = u.grid.point(i);
            let b2 = 1.0 + x.iter().map(|v| v * v).sum::<f64>();
            b2.powf(alpha) * u.values[i].norm_sqr()
        })
        .collect();
    (pairwise_sum(&terms) * u.grid.cell_volume()).sqrt()
}

/// `Im <(H - E) u, u>` for the operator with the given configuration.
pub fn dissipation(pot: &PotentialPair, e: &EnergySpec, grid: &Grid, cfg: &SolverConfig, u: &[Complex64]) -> f64 {
    let au = apply_operator(pot, e, grid, cfg, u);
    let terms: Vec<f64> = au.iter().zip(u).map(|(a, b)| (a * b.conj()).im).collect();
    pairwise_sum(&terms) * grid.cell_volume()
}
