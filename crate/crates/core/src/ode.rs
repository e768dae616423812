//! Explicit Runge-Kutta integrators for small autonomous systems.
//!
//! [`Dopri5`] is the adaptive Dormand-Prince 5(4) pair with mixed
//! absolute/relative error control. [`rk4_fixed`] takes uniform classical
//! RK4 steps; its output is a smooth function of the initial data, which
//! matters when the result is later differentiated numerically.

use crate::error::{Error, Result};

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Right-hand side of an autonomous system `y' = f(y)`.
pub trait System {
    fn dim(&self) -> usize;
    fn rhs(&self, y: &[f64], dy: &mut [f64]);
}

impl<F: Fn(&[f64], &mut [f64])> System for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        (self.1)(y, dy)
    }
}

/// Adaptive Dormand-Prince 5(4) stepper that can be advanced through a
/// sequence of output times without losing its step-size history.
#[derive(Clone)]
pub struct Dopri5<S: System> {
    sys: S,
    pub t: f64,
    pub y: Vec<f64>,
    tol: f64,
    step: f64,
    max_steps: usize,
    pub steps_taken: usize,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    ynew: Vec<f64>,
    fsal_valid: bool,
}

impl<S: System> Dopri5<S> {
    pub fn new(sys: S, y0: &[f64], tol: f64) -> Self {
        assert!(tol > 0.0, "tolerance must be positive");
        let n = sys.dim();
        assert_eq!(y0.len(), n);
        let z = || vec![0.0; n];
        Self {
            sys,
            t: 0.0,
            y: y0.to_vec(),
            tol,
            step: 0.0,
            max_steps: 50_000_000,
            steps_taken: 0,
            k: [z(), z(), z(), z(), z(), z(), z()],
            tmp: z(),
            ynew: z(),
            fsal_valid: false,
        }
    }

    pub fn system(&self) -> &S {
        &self.sys
    }

    /// Cap the total number of accepted and rejected steps.
    pub fn with_max_steps(mut self, m: usize) -> Self {
        self.max_steps = m;
        self
    }

    fn initial_step(&mut self, dir: f64) -> f64 {
        if self.step != 0.0 && self.step.signum() == dir {
            return self.step;
        }
        self.sys.rhs(&self.y, &mut self.k[0]);
        self.fsal_valid = true;
        let d0 = norm_scaled(&self.y, &self.y, self.tol);
        let d1 = norm_scaled(&self.k[0], &self.y, self.tol);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        dir * h0.min(0.1)
    }

    /// Integrate up to `t_end` (which may lie before or after `self.t`).
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        let span = t_end - self.t;
        if span == 0.0 {
            return Ok(());
        }
        let dir = span.signum();
        let mut h_nat = self.initial_step(dir);
        if !self.fsal_valid {
            self.sys.rhs(&self.y, &mut self.k[0]);
            self.fsal_valid = true;
        }
        loop {
            let remaining = t_end - self.t;
            if remaining * dir <= 0.0 {
                break;
            }
            let last = h_nat * dir >= remaining * dir;
            let h = if last { remaining } else { h_nat };
            if h_nat.abs() < 1e-14 * self.t.abs().max(1.0) {
                return Err(Error::StepUnderflow { t: self.t, step: h_nat });
            }
            if self.steps_taken >= self.max_steps {
                return Err(Error::TooManySteps(self.max_steps));
            }
            self.steps_taken += 1;
            let err = self.try_step(h);
            if !err.is_finite() {
                h_nat = 0.2 * h;
                continue;
            }
            if err <= 1.0 {
                self.t = if last { t_end } else { self.t + h };
                std::mem::swap(&mut self.y, &mut self.ynew);
                self.k.swap(0, 6);
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // A truncated final step says little about the natural
                // step size, so only let it grow the stored value.
                h_nat = if last { h_nat.abs().max((h * fac).abs()) * dir } else { h * fac };
                self.step = h_nat;
            } else {
                h_nat = h * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        Ok(())
    }

    fn try_step(&mut self, h: f64) -> f64 {
        let n = self.y.len();
        let y = &self.y;
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        self.sys.rhs(tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        self.sys.rhs(tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        self.sys.rhs(tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        self.sys.rhs(tmp, k5);
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        self.sys.rhs(tmp, k6);
        let ynew = &mut self.ynew;
        for i in 0..n {
            ynew[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        self.sys.rhs(ynew, k7);
        let mut err = 0.0f64;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = self.tol * (1.0 + y[i].abs().max(ynew[i].abs()));
            err = err.max((e / sc).abs());
        }
        err
    }
}

fn norm_scaled(v: &[f64], y: &[f64], tol: f64) -> f64 {
    let mut s = 0.0f64;
    for (a, b) in v.iter().zip(y) {
        s = s.max(a.abs() / (tol * (1.0 + b.abs())));
    }
    s * tol
}

/// Integrate with `steps` uniform classical RK4 steps from `t = 0` to `t`.
pub fn rk4_fixed<S: System>(sys: &S, y0: &[f64], t: f64, steps: usize) -> Vec<f64> {
    let n = sys.dim();
    let mut y = y0.to_vec();
    if t == 0.0 || steps == 0 {
        return y;
    }
    let h = t / steps as f64;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for _ in 0..steps {
        sys.rhs(&y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        sys.rhs(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        sys.rhs(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        sys.rhs(&tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

/// Like [`rk4_fixed`] but records the state after every step, including the
/// initial state. Returns `steps + 1` states.
pub fn rk4_fixed_path<S: System>(sys: &S, y0: &[f64], t: f64, steps: usize) -> Vec<Vec<f64>> {
    let n = sys.dim();
    let mut out = Vec::with_capacity(steps + 1);
    let mut y = y0.to_vec();
    out.push(y.clone());
    let h = t / steps.max(1) as f64;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for _ in 0..steps {
        sys.rhs(&y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        sys.rhs(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        sys.rhs(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        sys.rhs(&tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(y.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_matches_closed_form() {
        let sys = (2usize, |y: &[f64], d: &mut [f64]| {
            d[0] = y[1];
            d[1] = -y[0];
        });
        let mut ig = Dopri5::new(sys, &[1.0, 0.0], 1e-12);
        ig.advance_to(10.0).unwrap();
        assert!((ig.y[0] - 10f64.cos()).abs() < 1e-9);
        assert!((ig.y[1] + 10f64.sin()).abs() < 1e-9);
        ig.advance_to(0.0).unwrap();
        assert!((ig.y[0] - 1.0).abs() < 1e-9);
        assert!(ig.y[1].abs() < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = (1usize, |y: &[f64], d: &mut [f64]| d[0] = y[0]);
        let e1 = (rk4_fixed(&sys, &[1.0], 1.0, 20)[0] - 1f64.exp()).abs();
        let e2 = (rk4_fixed(&sys, &[1.0], 1.0, 40)[0] - 1f64.exp()).abs();
        let ratio = e1 / e2;
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }
}
