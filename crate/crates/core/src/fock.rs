//! Truncated Fock space, ladder operators, and the state containers shared by
//! every other module.
//!
//! Units: ħ = 1, so Hamiltonians are angular frequencies and `exp(-iHt)` is
//! the propagator for a duration `t` in seconds.

use nalgebra::{ComplexField, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Number of top Fock levels counted by the truncation monitor.
pub const TAIL_LEVELS: usize = 4;
/// Default truncation tolerance for the tail monitor.
pub const DEFAULT_TAIL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FockSpace {
    dim: usize,
}

impl FockSpace {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Same oscillator with the truncation doubled.
    pub fn doubled(&self) -> Self {
        Self { dim: 2 * self.dim }
    }

    /// Default truncation `max(64, ceil(8 sinh²r + 8|α|² + 40))`.
    pub fn default_for(alpha_abs: f64, r: f64) -> Self {
        let est = 8.0 * r.sinh().powi(2) + 8.0 * alpha_abs * alpha_abs + 40.0;
        Self {
            dim: (est.ceil() as usize).max(64),
        }
    }

    /// Smallest truncation (a multiple of 16, never below [`FockSpace::default_for`])
    /// whose closed-form displaced-squeezed population tail is below `eps`.
    pub fn for_tail(alpha_abs: f64, r: f64, eps: f64) -> Self {
        let floor = Self::default_for(alpha_abs, r).dim;
        let xi = crate::gaussian::SqueezeParam::new(r, 0.0);
        let d = crate::gaussian::Displacement::new(C64::new(alpha_abs, 0.0));
        // grow the evaluated support until the deficit is resolved
        let mut nmax = floor.max(64);
        loop {
            let pops = crate::gaussian::displaced_squeezed_populations(d, xi, nmax);
            let total: f64 = pops.iter().sum();
            if 1.0 - total < eps * 1e-3 || nmax > 1 << 16 {
                let mut tail = 1.0 - total;
                let mut dim = nmax;
                // walk down while the tail over the top levels stays small
                for n in (0..nmax).rev() {
                    tail += pops[n];
                    if tail >= eps {
                        dim = n + TAIL_LEVELS + 1;
                        break;
                    }
                }
                let dim = dim.div_ceil(16) * 16;
                return Self {
                    dim: dim.max(floor),
                };
            }
            nmax *= 2;
        }
    }
}

/// Annihilation operator `a` with `a|n⟩ = √n |n−1⟩`.
pub fn ladder_lowering(space: FockSpace) -> CMatrix {
    let n = space.dim();
    let mut m = CMatrix::zeros(n, n);
    for k in 1..n {
        m[(k - 1, k)] = C64::new((k as f64).sqrt(), 0.0);
    }
    m
}

pub fn ladder_raising(space: FockSpace) -> CMatrix {
    ladder_lowering(space).adjoint()
}

pub fn number_operator(space: FockSpace) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_fn(space.dim(), |k, _| {
        C64::new(k as f64, 0.0)
    }))
}

/// A state vector with a Fock-space oscillator factor.
pub trait StateVector {
    fn amps(&self) -> &CVector;
    fn space(&self) -> FockSpace;
    /// Population of the oscillator level `n` (qubit traced out).
    fn motional_population(&self, n: usize) -> f64;

    fn norm(&self) -> f64 {
        self.amps().norm()
    }

    /// Oscillator population held in the top [`TAIL_LEVELS`] levels.
    fn tail_mass(&self) -> f64 {
        let d = self.space().dim();
        (d.saturating_sub(TAIL_LEVELS)..d)
            .map(|n| self.motional_population(n))
            .sum()
    }

    fn check_tail(&self, eps: f64) -> Result<()> {
        let tail = self.tail_mass();
        if tail > eps {
            Err(Error::TruncationTail {
                tail,
                eps,
                dim: self.space().dim(),
            })
        } else {
            Ok(())
        }
    }
}

/// Oscillator state over `|0⟩ … |N−1⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionalState {
    space: FockSpace,
    amps: CVector,
}

impl MotionalState {
    pub fn fock(space: FockSpace, n: usize) -> Self {
        let mut amps = CVector::zeros(space.dim());
        amps[n] = C64::new(1.0, 0.0);
        Self { space, amps }
    }

    pub fn vacuum(space: FockSpace) -> Self {
        Self::fock(space, 0)
    }

    /// Wraps raw amplitudes and normalizes them.
    pub fn from_amps(space: FockSpace, amps: CVector) -> Result<Self> {
        Self::check_len(space, amps.len())?;
        let norm = amps.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidParameter {
                name: "amps",
                reason: format!("cannot normalize a vector with norm {norm}"),
            });
        }
        Ok(Self {
            space,
            amps: amps / C64::new(norm, 0.0),
        })
    }

    /// Wraps amplitudes as-is. Used where the deficit of a truncated
    /// analytic expansion must stay visible.
    pub fn from_amps_unnormalized(space: FockSpace, amps: CVector) -> Result<Self> {
        Self::check_len(space, amps.len())?;
        Ok(Self { space, amps })
    }

    fn check_len(space: FockSpace, len: usize) -> Result<()> {
        if len != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                found: len,
            });
        }
        Ok(())
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn into_amps(self) -> CVector {
        self.amps
    }

    /// Applies a dense operator and returns the unnormalized image.
    pub fn apply(&self, op: &CMatrix) -> Result<Self> {
        if op.ncols() != self.space.dim() || op.nrows() != self.space.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.space.dim(),
                found: op.nrows(),
            });
        }
        Ok(Self {
            space: self.space,
            amps: op * &self.amps,
        })
    }

    /// Copies the state into a larger truncation (or cuts it to a smaller one).
    pub fn resized(&self, space: FockSpace) -> Self {
        let mut amps = CVector::zeros(space.dim());
        let n = space.dim().min(self.space.dim());
        amps.rows_mut(0, n).copy_from(&self.amps.rows(0, n));
        Self { space, amps }
    }
}

impl StateVector for MotionalState {
    fn amps(&self) -> &CVector {
        &self.amps
    }

    fn space(&self) -> FockSpace {
        self.space
    }

    fn motional_population(&self, n: usize) -> f64 {
        self.amps[n].norm_sqr()
    }
}

/// `⟨ψ|op|ψ⟩`.
pub fn expectation<S: StateVector>(state: &S, op: &CMatrix) -> Result<C64> {
    let psi = state.amps();
    if op.nrows() != psi.len() || op.ncols() != psi.len() {
        return Err(Error::DimensionMismatch {
            expected: psi.len(),
            found: op.nrows(),
        });
    }
    Ok(psi.dotc(&(op * psi)))
}

/// `|⟨a|b⟩|²`.
pub fn fidelity(a: &MotionalState, b: &MotionalState) -> Result<f64> {
    if a.space != b.space {
        return Err(Error::DimensionMismatch {
            expected: a.space.dim(),
            found: b.space.dim(),
        });
    }
    Ok(a.amps.dotc(&b.amps).norm_sqr())
}

/// Largest entrywise deviation from Hermiticity, relative to the largest entry.
pub fn hermiticity_error(h: &CMatrix) -> f64 {
    let scale = h.iter().map(|z| z.norm()).fold(1.0_f64, f64::max);
    let mut dev = 0.0_f64;
    for j in 0..h.ncols() {
        for i in 0..=j.min(h.nrows() - 1) {
            dev = dev.max((h[(i, j)] - h[(j, i)].conj()).norm());
        }
    }
    dev / scale
}

fn check_hermitian(h: &CMatrix) -> Result<()> {
    if !h.is_square() {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            found: h.ncols(),
        });
    }
    let dev = hermiticity_error(h);
    if dev > 1e-12 {
        return Err(Error::NotHermitian(dev));
    }
    Ok(())
}

fn eigen_residual<T: ComplexField<RealField = f64>>(
    m: &DMatrix<T>,
    e: &SymmetricEigen<T, Dyn>,
) -> f64 {
    let mut vl = e.eigenvectors.clone();
    for (j, mut col) in vl.column_iter_mut().enumerate() {
        col *= T::from_real(e.eigenvalues[j]);
    }
    (m * &e.eigenvectors - vl).norm()
}

/// `SymmetricEigen` with a residual check. The default convergence threshold
/// occasionally stops early on strongly graded matrices, so a failed check
/// retries with a looser threshold and then with the index order reversed.
pub(crate) fn checked_eigen<T: ComplexField<RealField = f64>>(
    m: DMatrix<T>,
) -> SymmetricEigen<T, Dyn> {
    let n = m.nrows();
    let tol = 1e-12 * m.norm().max(1.0) * (n as f64).sqrt();
    let first = SymmetricEigen::new(m.clone());
    if eigen_residual(&m, &first) <= tol {
        return first;
    }
    if let Some(e) = SymmetricEigen::try_new(m.clone(), 1e-14, 0) {
        if eigen_residual(&m, &e) <= tol {
            return e;
        }
    }
    let rev = DMatrix::from_fn(n, n, |i, j| m[(n - 1 - i, n - 1 - j)].clone());
    let mut e = SymmetricEigen::new(rev);
    e.eigenvectors = DMatrix::from_fn(n, n, |i, j| e.eigenvectors[(n - 1 - i, j)].clone());
    e
}

/// Eigendecomposition of a Hermitian matrix. Real symmetric input takes the
/// real solver; both return unitary eigenvectors in the columns.
pub fn hermitian_eigen(h: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    check_hermitian(h)?;
    if h.iter().all(|z| z.im == 0.0) {
        let re = h.map(|z| z.re);
        let eig = checked_eigen(re);
        Ok((
            eig.eigenvalues.iter().copied().collect(),
            eig.eigenvectors.map(|x| C64::new(x, 0.0)),
        ))
    } else {
        let eig = checked_eigen(h.clone());
        Ok((eig.eigenvalues.iter().copied().collect(), eig.eigenvectors))
    }
}

/// Propagator `exp(-i H t)` for Hermitian `H`.
pub fn unitary_propagator(h: &CMatrix, t: f64) -> Result<CMatrix> {
    let (vals, vecs) = hermitian_eigen(h)?;
    Ok(spectral_propagator(&vals, &vecs, t))
}

pub(crate) fn spectral_propagator(vals: &[f64], vecs: &CMatrix, t: f64) -> CMatrix {
    let mut scaled = vecs.clone();
    for (j, &lam) in vals.iter().enumerate() {
        let ph = C64::from_polar(1.0, -lam * t);
        for z in scaled.column_mut(j).iter_mut() {
            *z *= ph;
        }
    }
    scaled * vecs.adjoint()
}

/// Evolves `state` under `exp(-iHt)`.
pub fn matrix_exponential_apply(
    h: &CMatrix,
    t: f64,
    state: &MotionalState,
) -> Result<MotionalState> {
    if h.nrows() != state.space.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.space.dim(),
            found: h.nrows(),
        });
    }
    let u = unitary_propagator(h, t)?;
    state.apply(&u)
}

/// Which factors a density operator lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Oscillator,
    /// Qubit ⊗ oscillator, ordered as (↓ block, ↑ block).
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    pub(crate) matrix: CMatrix,
    space: FockSpace,
    basis: Basis,
}

impl DensityOperator {
    pub fn new(matrix: CMatrix, space: FockSpace, basis: Basis) -> Result<Self> {
        let expected = match basis {
            Basis::Oscillator => space.dim(),
            Basis::Joint => 2 * space.dim(),
        };
        if matrix.nrows() != expected || matrix.ncols() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: matrix.nrows(),
            });
        }
        Ok(Self {
            matrix,
            space,
            basis,
        })
    }

    pub fn from_motional(state: &MotionalState) -> Self {
        let v = state.amps();
        Self {
            matrix: v * v.adjoint(),
            space: state.space(),
            basis: Basis::Oscillator,
        }
    }

    pub fn from_joint(state: &crate::spin_motion::JointState) -> Self {
        let v = state.amps();
        Self {
            matrix: v * v.adjoint(),
            space: state.space(),
            basis: Basis::Joint,
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.matrix + self.matrix.adjoint()).map(|z| z * 0.5);
        checked_eigen(herm)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Oscillator populations with the qubit traced out.
    pub fn motional_populations(&self) -> Vec<f64> {
        let n = self.space.dim();
        let d = self.matrix.diagonal();
        match self.basis {
            Basis::Oscillator => d.iter().map(|z| z.re).collect(),
            Basis::Joint => (0..n).map(|k| d[k].re + d[k + n].re).collect(),
        }
    }

    /// Reduced oscillator density matrix.
    pub fn motional(&self) -> DensityOperator {
        match self.basis {
            Basis::Oscillator => self.clone(),
            Basis::Joint => {
                let n = self.space.dim();
                let m = self.matrix.view((0, 0), (n, n)) + self.matrix.view((n, n), (n, n));
                DensityOperator {
                    matrix: m,
                    space: self.space,
                    basis: Basis::Oscillator,
                }
            }
        }
    }

    pub fn tail_mass(&self) -> f64 {
        let pops = self.motional_populations();
        pops[pops.len().saturating_sub(TAIL_LEVELS)..].iter().sum()
    }

    pub fn expectation(&self, op: &CMatrix) -> Result<C64> {
        if op.nrows() != self.matrix.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.matrix.nrows(),
                found: op.nrows(),
            });
        }
        Ok((op * &self.matrix).trace())
    }

    /// Trace distance `½‖ρ − σ‖₁`.
    pub fn trace_distance(&self, other: &DensityOperator) -> Result<f64> {
        if self.matrix.shape() != other.matrix.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.matrix.nrows(),
                found: other.matrix.nrows(),
            });
        }
        let diff = &self.matrix - &other.matrix;
        let herm = (&diff + diff.adjoint()).map(|z| z * 0.5);
        Ok(0.5
            * checked_eigen(herm)
                .eigenvalues
                .iter()
                .map(|x| x.abs())
                .sum::<f64>())
    }

    /// Fidelity `⟨ψ|ρ|ψ⟩` with a pure oscillator state.
    pub fn fidelity_pure(&self, state: &MotionalState) -> Result<f64> {
        let m = self.motional();
        let v = state.amps();
        if v.len() != m.matrix.nrows() {
            return Err(Error::DimensionMismatch {
                expected: m.matrix.nrows(),
                found: v.len(),
            });
        }
        Ok(v.dotc(&(&m.matrix * v)).re)
    }
}

/// `ln n!` by direct summation; exact to rounding for the sizes used here.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Table of `ln k!` for `k < len`.
pub fn ln_factorial_table(len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut acc = 0.0;
    for k in 0..len {
        if k > 1 {
            acc += (k as f64).ln();
        }
        out.push(acc);
    }
    out
}
