//! Banded complex LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK `gbtrf` layout: a matrix with `kl` sub- and
//! `ku` super-diagonals is kept in `2 kl + ku + 1` rows, the extra `kl` rows
//! absorbing fill-in from row interchanges.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BandedMatrix {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    ldab: usize,
    /// Column-major band storage, `ldab` entries per column.
    ab: Vec<Complex64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![Complex64::new(0.0, 0.0); ldab * n],
        }
    }

    /// Bytes needed to factor an `n x n` matrix with the given bands.
    pub fn storage_bytes(n: usize, kl: usize, ku: usize) -> usize {
        (2 * kl + ku + 1) * n * std::mem::size_of::<Complex64>()
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        // Row kl + ku + i - j of column j.
        j * self.ldab + (self.kl + self.ku + i - j)
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        i + self.ku >= j && j + self.kl >= i && i < self.n && j < self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if self.in_band(i, j) {
            self.ab[self.idx(i, j)]
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside the band");
        let k = self.idx(i, j);
        self.ab[k] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: Complex64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside the band");
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                y[i] += self.ab[self.idx(i, j)] * x[j];
            }
        }
        y
    }

    /// Factor in place; returns the LU factors with pivots.
    pub fn factor(mut self) -> Result<BandedLu> {
        let n = self.n;
        let (kl, ku, ldab) = (self.kl, self.ku, self.ldab);
        let kv = ku + kl;
        let mut ipiv = vec![0usize; n];
        // Fill-in rows start out zero, as allocated.
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // Pivot search in column j, rows j..=j+km.
            let col = j * ldab;
            let mut p = 0usize;
            let mut best = -1.0f64;
            for r in 0..=km {
                let v = self.ab[col + kv + r].norm();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            ipiv[j] = j + p;
            if best == 0.0 {
                return Err(Error::Singular(j));
            }
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                // Swap rows j and j+p over columns j..=ju.
                for c in j..=ju {
                    let a = c * ldab + kv + j - c;
                    let b = c * ldab + kv + j + p - c;
                    self.ab.swap(a, b);
                }
            }
            let piv = self.ab[col + kv];
            let inv = Complex64::new(1.0, 0.0) / piv;
            for r in 1..=km {
                self.ab[col + kv + r] *= inv;
            }
            // Rank-one update of the trailing block.
            for c in (j + 1)..=ju {
                let u = self.ab[c * ldab + kv + j - c];
                if u == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for r in 1..=km {
                    let l = self.ab[col + kv + r];
                    self.ab[c * ldab + kv + j + r - c] -= l * u;
                }
            }
        }
        Ok(BandedLu { m: self, ipiv })
    }
}

/// Factored banded matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    m: BandedMatrix,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let a = &self.m;
        let n = a.n;
        let (kl, ku, ldab) = (a.kl, a.ku, a.ldab);
        let kv = kl + ku;
        let mut x = b.to_vec();
        // Forward: apply row swaps and unit-lower L.
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                x.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let xj = x[j];
            for r in 1..=km {
                x[j + r] -= a.ab[j * ldab + kv + r] * xj;
            }
        }
        // Backward with U, which has kl + ku super-diagonals after pivoting.
        for j in (0..n).rev() {
            x[j] /= a.ab[j * ldab + kv];
            let xj = x[j];
            let top = j.saturating_sub(kv);
            for i in top..j {
                x[i] -= a.ab[j * ldab + kv + i - j] * xj;
            }
        }
        x
    }
}
