//! Sparse operators stored by diagonal. Ladder operators, sideband couplings
//! and their products occupy a handful of diagonals, so the Lindblad
//! right-hand side only ever needs `band × dense` products.

use std::collections::BTreeMap;

use crate::fock::{CMatrix, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct Banded {
    n: usize,
    /// offset → entries; offset `k ≥ 0` holds `(j, j+k)`, `k < 0` holds `(j−k, j)`.
    bands: BTreeMap<isize, Vec<C64>>,
}

fn band_len(n: usize, off: isize) -> usize {
    n.saturating_sub(off.unsigned_abs())
}

/// `(row, col)` of entry `j` on diagonal `off`.
fn position(off: isize, j: usize) -> (usize, usize) {
    if off >= 0 {
        (j, j + off as usize)
    } else {
        (j + off.unsigned_abs(), j)
    }
}

impl Banded {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bands: BTreeMap::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Self::zeros(n);
        b.bands.insert(0, vec![C64::new(1.0, 0.0); n]);
        b
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Keeps every diagonal holding a nonzero entry.
    pub fn from_dense(m: &CMatrix) -> Self {
        let n = m.nrows();
        let mut b = Self::zeros(n);
        for off in -(n as isize - 1)..(n as isize) {
            let vals: Vec<C64> = (0..band_len(n, off))
                .map(|j| {
                    let (r, c) = position(off, j);
                    m[(r, c)]
                })
                .collect();
            if vals.iter().any(|z| z.norm_sqr() > 0.0) {
                b.bands.insert(off, vals);
            }
        }
        b
    }

    pub fn to_dense(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.n, self.n);
        for (&off, vals) in &self.bands {
            for (j, v) in vals.iter().enumerate() {
                let (r, c) = position(off, j);
                m[(r, c)] = *v;
            }
        }
        m
    }

    /// Adds `v` at `(row, col)`.
    pub fn add_entry(&mut self, row: usize, col: usize, v: C64) {
        let off = col as isize - row as isize;
        let len = band_len(self.n, off);
        let band = self
            .bands
            .entry(off)
            .or_insert_with(|| vec![C64::new(0.0, 0.0); len]);
        band[row.min(col)] += v;
    }

    pub fn adjoint(&self) -> Self {
        let bands = self
            .bands
            .iter()
            .map(|(&off, vals)| (-off, vals.iter().map(|z| z.conj()).collect()))
            .collect();
        Self { n: self.n, bands }
    }

    pub fn scale(&self, c: C64) -> Self {
        let bands = self
            .bands
            .iter()
            .map(|(&off, vals)| (off, vals.iter().map(|z| z * c).collect()))
            .collect();
        Self { n: self.n, bands }
    }

    pub fn add(&self, other: &Banded) -> Self {
        assert_eq!(self.n, other.n, "banded dimension mismatch");
        let mut out = self.clone();
        for (&off, vals) in &other.bands {
            let band = out
                .bands
                .entry(off)
                .or_insert_with(|| vec![C64::new(0.0, 0.0); vals.len()]);
            for (a, b) in band.iter_mut().zip(vals) {
                *a += b;
            }
        }
        out
    }

    pub fn mul(&self, other: &Banded) -> Self {
        assert_eq!(self.n, other.n, "banded dimension mismatch");
        let mut out = Self::zeros(self.n);
        for (&o1, v1) in &self.bands {
            for (&o2, v2) in &other.bands {
                for (j, a) in v1.iter().enumerate() {
                    let (r, k) = position(o1, j);
                    // entry of `other` in row k on diagonal o2
                    let c = k as isize + o2;
                    if c < 0 || c >= self.n as isize {
                        continue;
                    }
                    let jj = k.min(c as usize);
                    out.add_entry(r, c as usize, a * v2[jj]);
                }
            }
        }
        out
    }

    /// Block-diagonal `I₂ ⊗ self` on a space twice as large.
    pub fn lift_block_diagonal(&self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(2 * n);
        for (&off, vals) in &self.bands {
            for (j, v) in vals.iter().enumerate() {
                let (r, c) = position(off, j);
                out.add_entry(r, c, *v);
                out.add_entry(r + n, c + n, *v);
            }
        }
        out
    }

    /// `self · x` for dense `x`.
    pub fn mul_dense(&self, x: &CMatrix) -> CMatrix {
        let n = self.n;
        assert_eq!(x.nrows(), n, "banded dimension mismatch");
        let cols = x.ncols();
        let mut out = CMatrix::zeros(n, cols);
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        for (&off, vals) in &self.bands {
            let (r0, c0) = position(off, 0);
            let len = vals.len();
            for col in 0..cols {
                let xcol = &xs[col * n + c0..col * n + c0 + len];
                let ocol = &mut os[col * n + r0..col * n + r0 + len];
                for ((o, v), x) in ocol.iter_mut().zip(vals).zip(xcol) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// Largest absolute row sum, a bound on the spectral norm for Hermitian input.
    pub fn row_sum_bound(&self) -> f64 {
        let mut rows = vec![0.0; self.n];
        for (&off, vals) in &self.bands {
            for (j, v) in vals.iter().enumerate() {
                rows[position(off, j).0] += v.norm();
            }
        }
        rows.into_iter().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{ladder_lowering, FockSpace};

    fn sample(n: usize) -> CMatrix {
        CMatrix::from_fn(n, n, |i, j| {
            if (i as isize - j as isize).abs() <= 2 || i + 1 == j + n / 2 {
                C64::new(i as f64 + 0.5 * j as f64, (i * j) as f64 * 0.1 - 1.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    #[test]
    fn dense_roundtrip_and_algebra() {
        let a = sample(7);
        let b = ladder_lowering(FockSpace::new(7).unwrap());
        let (ba, bb) = (Banded::from_dense(&a), Banded::from_dense(&b));
        assert_eq!(ba.to_dense(), a);
        assert!((ba.mul(&bb).to_dense() - &a * &b).norm() < 1e-12);
        assert!((ba.add(&bb).to_dense() - (&a + &b)).norm() < 1e-12);
        assert_eq!(ba.adjoint().to_dense(), a.adjoint());
        let x = CMatrix::from_fn(7, 3, |i, j| C64::new(i as f64 - j as f64, 1.0 + j as f64));
        assert!((ba.mul_dense(&x) - &a * &x).norm() < 1e-12);
        let l = bb.lift_block_diagonal().to_dense();
        assert_eq!(l.view((7, 7), (7, 7)).into_owned(), b);
        assert_eq!(l[(6, 7)], C64::new(0.0, 0.0));
    }
}
