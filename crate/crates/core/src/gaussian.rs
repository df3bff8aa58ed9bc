//! Displacement and squeeze operators, closed-form Gaussian states, and the
//! amplification identity `S†(ξ) D(α) S(ξ) = D(α cosh r + α* e^{iθ} sinh r)`.
//!
//! Both generators reduce to real symmetric matrices after a diagonal phase
//! similarity, so each operator is built from one cached real
//! eigendecomposition per truncation:
//!
//! * `α a† − α* a` with `α = |α|e^{iφ}` is `R(φ) T (−i|α| X) T† R(φ)†` where
//!   `X = a + a†`, `T = diag(iⁿ)` and `R(φ) = e^{iφn̂}`.
//! * `½(ξ* a² − ξ a†²)` with `ξ = re^{iθ}` is `R(θ/2) T' (i r/2 Q) T'† R(θ/2)†`
//!   where `Q = a² + a†²` and `T' = diag(e^{iπn/4})`.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    checked_eigen, ln_factorial_table, CMatrix, CVector, FockSpace, MotionalState, StateVector,
    C64, DEFAULT_TAIL_EPS, TAIL_LEVELS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub alpha: C64,
}

impl Displacement {
    pub fn new(alpha: C64) -> Self {
        Self { alpha }
    }

    pub fn real(alpha: f64) -> Self {
        Self::new(C64::new(alpha, 0.0))
    }

    pub fn polar(abs: f64, phase: f64) -> Self {
        Self::new(C64::from_polar(abs, phase))
    }
}

/// `ξ = r e^{iθ}` with `r ≥ 0` and `θ ∈ [0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqueezeParam {
    pub r: f64,
    pub theta: f64,
}

impl SqueezeParam {
    /// Negative `r` is folded into the phase; `θ` is wrapped into `[0, 2π)`.
    pub fn new(r: f64, theta: f64) -> Self {
        let (r, theta) = if r < 0.0 {
            (-r, theta + PI)
        } else {
            (r, theta)
        };
        Self {
            r,
            theta: theta.rem_euclid(TAU),
        }
    }

    pub fn from_complex(xi: C64) -> Self {
        Self::new(xi.norm(), xi.arg())
    }

    pub fn to_complex(self) -> C64 {
        C64::from_polar(self.r, self.theta)
    }

    /// `S(ξ)† = S(−ξ)`.
    pub fn inverse(self) -> Self {
        Self::new(self.r, self.theta + PI)
    }
}

/// Real eigendecompositions of `X = a + a†` and `Q = a² + a†²` for one truncation.
struct Generators {
    x_vals: Vec<f64>,
    x_vecs: DMatrix<f64>,
    q_vals: Vec<f64>,
    q_vecs: DMatrix<f64>,
}

impl Generators {
    fn build(dim: usize) -> Self {
        let mut x = DMatrix::<f64>::zeros(dim, dim);
        let mut q = DMatrix::<f64>::zeros(dim, dim);
        for n in 1..dim {
            let s = (n as f64).sqrt();
            x[(n - 1, n)] = s;
            x[(n, n - 1)] = s;
        }
        for n in 2..dim {
            let s = ((n * (n - 1)) as f64).sqrt();
            q[(n - 2, n)] = s;
            q[(n, n - 2)] = s;
        }
        let ex = checked_eigen(x);
        let eq = checked_eigen(q);
        Self {
            x_vals: ex.eigenvalues.iter().copied().collect(),
            x_vecs: ex.eigenvectors,
            q_vals: eq.eigenvalues.iter().copied().collect(),
            q_vecs: eq.eigenvectors,
        }
    }
}

fn generators(dim: usize) -> Arc<Generators> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Generators>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(g) = cache.lock().expect("generator cache poisoned").get(&dim) {
        return Arc::clone(g);
    }
    // built outside the lock so other truncations are not blocked
    let built = Arc::new(Generators::build(dim));
    let mut guard = cache.lock().expect("generator cache poisoned");
    Arc::clone(guard.entry(dim).or_insert(built))
}

/// `exp(i s M)` applied to `v`, for real symmetric `M = V diag(λ) Vᵀ`.
fn real_spectral_apply(vals: &[f64], vecs: &DMatrix<f64>, s: f64, v: &CVector) -> CVector {
    let n = v.len();
    let re = DMatrix::from_fn(n, 1, |i, _| v[i].re);
    let im = DMatrix::from_fn(n, 1, |i, _| v[i].im);
    let pr = vecs.tr_mul(&re);
    let pi = vecs.tr_mul(&im);
    let mut wr = DMatrix::<f64>::zeros(n, 1);
    let mut wi = DMatrix::<f64>::zeros(n, 1);
    for k in 0..n {
        let ph = C64::from_polar(1.0, s * vals[k]);
        let z = ph * C64::new(pr[k], pi[k]);
        wr[k] = z.re;
        wi[k] = z.im;
    }
    let or = vecs * wr;
    let oi = vecs * wi;
    CVector::from_fn(n, |i, _| C64::new(or[i], oi[i]))
}

/// `exp(i s M)` as a dense matrix.
fn real_spectral_matrix(vals: &[f64], vecs: &DMatrix<f64>, s: f64) -> CMatrix {
    let n = vals.len();
    let mut cos_part = vecs.clone();
    let mut sin_part = vecs.clone();
    for k in 0..n {
        let (sn, cs) = (s * vals[k]).sin_cos();
        cos_part.column_mut(k).scale_mut(cs);
        sin_part.column_mut(k).scale_mut(sn);
    }
    let re = &cos_part * vecs.transpose();
    let im = &sin_part * vecs.transpose();
    CMatrix::from_fn(n, n, |i, j| C64::new(re[(i, j)], im[(i, j)]))
}

fn diag_phases(dim: usize, f: impl Fn(usize) -> f64) -> Vec<C64> {
    (0..dim).map(|n| C64::from_polar(1.0, f(n))).collect()
}

fn scale_rows(v: &mut CVector, ph: &[C64]) {
    for (z, p) in v.iter_mut().zip(ph) {
        *z *= p;
    }
}

/// `diag(p) M diag(p)†`.
fn conjugate_by_diag(m: &mut CMatrix, ph: &[C64]) {
    let n = ph.len();
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] *= ph[i] * ph[j].conj();
        }
    }
}

/// Phases of `R(φ) T`, the diagonal similarity taking `−i|α|X` to the displacement generator.
fn displacement_phases(dim: usize, phi: f64) -> Vec<C64> {
    diag_phases(dim, |n| n as f64 * (phi + PI / 2.0))
}

fn squeeze_phases(dim: usize, theta: f64) -> Vec<C64> {
    diag_phases(dim, |n| n as f64 * (theta / 2.0 + FRAC_PI_4))
}

/// Dense `D(α)` without a truncation check.
pub fn displacement_matrix(d: Displacement, space: FockSpace) -> CMatrix {
    let g = generators(space.dim());
    let mut m = real_spectral_matrix(&g.x_vals, &g.x_vecs, -d.alpha.norm());
    conjugate_by_diag(&mut m, &displacement_phases(space.dim(), d.alpha.arg()));
    m
}

/// Dense `S(ξ)` without a truncation check.
pub fn squeeze_matrix(xi: SqueezeParam, space: FockSpace) -> CMatrix {
    let g = generators(space.dim());
    let mut m = real_spectral_matrix(&g.q_vals, &g.q_vecs, xi.r / 2.0);
    conjugate_by_diag(&mut m, &squeeze_phases(space.dim(), xi.theta));
    m
}

/// `D(α) v` in O(N²) once the truncation's generators are cached.
pub fn apply_displacement(d: Displacement, v: &CVector) -> CVector {
    let dim = v.len();
    let g = generators(dim);
    let ph = displacement_phases(dim, d.alpha.arg());
    let conj: Vec<C64> = ph.iter().map(|p| p.conj()).collect();
    let mut w = v.clone();
    scale_rows(&mut w, &conj);
    let mut w = real_spectral_apply(&g.x_vals, &g.x_vecs, -d.alpha.norm(), &w);
    scale_rows(&mut w, &ph);
    w
}

/// `S(ξ) v`.
pub fn apply_squeeze(xi: SqueezeParam, v: &CVector) -> CVector {
    let dim = v.len();
    let g = generators(dim);
    let ph = squeeze_phases(dim, xi.theta);
    let conj: Vec<C64> = ph.iter().map(|p| p.conj()).collect();
    let mut w = v.clone();
    scale_rows(&mut w, &conj);
    let mut w = real_spectral_apply(&g.q_vals, &g.q_vecs, xi.r / 2.0, &w);
    scale_rows(&mut w, &ph);
    w
}

fn check_vacuum_image(col: CVector, space: FockSpace) -> Result<()> {
    MotionalState::from_amps_unnormalized(space, col)?.check_tail(DEFAULT_TAIL_EPS)
}

/// `D(α) = exp(α a† − α* a)`; fails if `D(α)|0⟩` reaches the truncation edge.
pub fn displacement_operator(d: Displacement, space: FockSpace) -> Result<CMatrix> {
    let m = displacement_matrix(d, space);
    check_vacuum_image(m.column(0).into_owned(), space)?;
    Ok(m)
}

/// `S(ξ) = exp(½(ξ* a² − ξ a†²))`; fails if `S(ξ)|0⟩` reaches the truncation edge.
pub fn squeeze_operator(xi: SqueezeParam, space: FockSpace) -> Result<CMatrix> {
    let m = squeeze_matrix(xi, space);
    check_vacuum_image(m.column(0).into_owned(), space)?;
    Ok(m)
}

/// Tail of a truncated analytic expansion: the top levels plus the
/// normalization deficit of everything beyond the truncation.
fn expansion_tail(pops: &[f64]) -> f64 {
    let total: f64 = pops.iter().sum();
    let top: f64 = pops[pops.len().saturating_sub(TAIL_LEVELS)..].iter().sum();
    top + (1.0 - total).max(0.0)
}

fn finish_state(space: FockSpace, amps: Vec<C64>, eps: f64) -> Result<MotionalState> {
    let pops: Vec<f64> = amps.iter().map(|a| a.norm_sqr()).collect();
    let tail = expansion_tail(&pops);
    if tail > eps {
        return Err(Error::TruncationTail {
            tail,
            eps,
            dim: space.dim(),
        });
    }
    MotionalState::from_amps(space, CVector::from_vec(amps))
}

/// Coherent amplitudes `e^{−|α|²/2} αⁿ/√n!`, assembled in log space.
pub fn coherent_amplitudes(alpha: C64, nmax: usize) -> Vec<C64> {
    let lf = ln_factorial_table(nmax);
    let a = alpha.norm();
    if a == 0.0 {
        let mut v = vec![C64::new(0.0, 0.0); nmax];
        if nmax > 0 {
            v[0] = C64::new(1.0, 0.0);
        }
        return v;
    }
    let (la, phi) = (a.ln(), alpha.arg());
    (0..nmax)
        .map(|n| {
            let lm = -0.5 * a * a + n as f64 * la - 0.5 * lf[n];
            C64::from_polar(lm.exp(), n as f64 * phi)
        })
        .collect()
}

pub fn coherent_state(d: Displacement, space: FockSpace) -> Result<MotionalState> {
    coherent_state_with_tol(d, space, DEFAULT_TAIL_EPS)
}

pub fn coherent_state_with_tol(
    d: Displacement,
    space: FockSpace,
    eps: f64,
) -> Result<MotionalState> {
    finish_state(space, coherent_amplitudes(d.alpha, space.dim()), eps)
}

/// Squeezed-vacuum amplitudes: only even levels are populated, with
/// `c_{2m} = (−e^{iθ} tanh r)^m √((2m)!) / (2^m m! √cosh r)`.
pub fn squeezed_vacuum_amplitudes(xi: SqueezeParam, nmax: usize) -> Vec<C64> {
    let mut v = vec![C64::new(0.0, 0.0); nmax];
    if nmax == 0 {
        return v;
    }
    if xi.r == 0.0 {
        v[0] = C64::new(1.0, 0.0);
        return v;
    }
    let lf = ln_factorial_table(nmax);
    let lt = xi.r.tanh().ln();
    let lc = -0.5 * xi.r.cosh().ln();
    for m in 0..nmax.div_ceil(2) {
        let n = 2 * m;
        let mf = m as f64;
        let lm = lc + mf * lt + 0.5 * lf[n] - mf * std::f64::consts::LN_2 - lf[m];
        v[n] = C64::from_polar(lm.exp(), mf * (xi.theta + PI));
    }
    v
}

pub fn squeezed_vacuum(xi: SqueezeParam, space: FockSpace) -> Result<MotionalState> {
    squeezed_vacuum_with_tol(xi, space, DEFAULT_TAIL_EPS)
}

pub fn squeezed_vacuum_with_tol(
    xi: SqueezeParam,
    space: FockSpace,
    eps: f64,
) -> Result<MotionalState> {
    finish_state(space, squeezed_vacuum_amplitudes(xi, space.dim()), eps)
}

/// Amplitudes of `D(α) S(ξ)|0⟩` over `|0⟩ … |nmax−1⟩`.
///
/// The Hermite expansion is carried as the normalized recurrence
/// `c_{n+1} = (β c_n − e^{iθ} tanh r √n c_{n−1}) / √(n+1)` with
/// `β = α + α* e^{iθ} tanh r`, which absorbs the `Hₙ(z)(½ tanh r)^{n/2}/√n!`
/// factor and is free of the `√(e^{iθ} sinh 2r)` branch. `r = 0` uses the
/// coherent expansion directly.
pub fn displaced_squeezed_amplitudes(d: Displacement, xi: SqueezeParam, nmax: usize) -> Vec<C64> {
    if xi.r == 0.0 {
        return coherent_amplitudes(d.alpha, nmax);
    }
    let alpha = d.alpha;
    let e = C64::from_polar(1.0, xi.theta);
    let t = xi.r.tanh();
    let beta = alpha + alpha.conj() * e * t;
    let pre = (-0.5 * alpha.norm_sqr() - 0.5 * alpha.conj() * alpha.conj() * e * t).exp()
        / xi.r.cosh().sqrt();
    let mut out = Vec::with_capacity(nmax);
    let (mut prev, mut cur) = (C64::new(0.0, 0.0), C64::new(1.0, 0.0));
    for n in 0..nmax {
        out.push(pre * cur);
        let nf = n as f64;
        let next = (beta * cur - e * t * nf.sqrt() * prev) / (nf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    out
}

/// Populations of `D(α) S(ξ)|0⟩`; their deficit from 1 is the truncation tail.
pub fn displaced_squeezed_populations(d: Displacement, xi: SqueezeParam, nmax: usize) -> Vec<f64> {
    displaced_squeezed_amplitudes(d, xi, nmax)
        .iter()
        .map(|a| a.norm_sqr())
        .collect()
}

pub fn displaced_squeezed_state(
    d: Displacement,
    xi: SqueezeParam,
    space: FockSpace,
) -> Result<MotionalState> {
    finish_state(
        space,
        displaced_squeezed_amplitudes(d, xi, space.dim()),
        DEFAULT_TAIL_EPS,
    )
}

/// `α_f = α cosh r + α* e^{iθ} sinh r`.
pub fn amplify_displacement(alpha_i: C64, xi: SqueezeParam) -> C64 {
    alpha_i * xi.r.cosh() + alpha_i.conj() * C64::from_polar(xi.r.sinh(), xi.theta)
}

/// Operator distance between `S†(ξ) D(α) S(ξ)` and `D(α_f)` on the
/// low-energy block where the truncated products are resolved.
///
/// Column `|k⟩` belongs to the block while `S(ξ)|k⟩` keeps its tail below
/// 1e-14; the returned value is the Frobenius norm of the difference
/// restricted to those columns (an upper bound on the spectral norm).
pub fn amplification_identity_check(
    alpha_i: C64,
    xi: SqueezeParam,
    space: FockSpace,
) -> Result<f64> {
    let dim = space.dim();
    let d = Displacement::new(alpha_i);
    let df = Displacement::new(amplify_displacement(alpha_i, xi));
    let mut sum = 0.0;
    for k in 0..dim - TAIL_LEVELS {
        let basis = MotionalState::fock(space, k).into_amps();
        let sv = apply_squeeze(xi, &basis);
        let probe = MotionalState::from_amps_unnormalized(space, sv.clone())?;
        if probe.tail_mass() > 1e-14 {
            if k == 0 {
                return Err(Error::TruncationTail {
                    tail: probe.tail_mass(),
                    eps: 1e-14,
                    dim,
                });
            }
            break;
        }
        let lhs = apply_squeeze(xi.inverse(), &apply_displacement(d, &sv));
        let rhs = apply_displacement(df, &basis);
        let probe = MotionalState::from_amps_unnormalized(space, rhs.clone())?;
        if probe.tail_mass() > 1e-14 {
            break;
        }
        sum += (lhs - rhs).norm_squared();
    }
    Ok(sum.sqrt())
}

/// `10 log₁₀ e^{2r}`.
pub fn squeeze_db(r: f64) -> f64 {
    20.0 * std::f64::consts::LOG10_E * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{
        expectation, fidelity, ladder_lowering, matrix_exponential_apply, number_operator,
    };

    fn sp(n: usize) -> FockSpace {
        FockSpace::new(n).unwrap()
    }

    /// Direct Hermitian generators, independent of the phase-similarity trick.
    fn displacement_generator(alpha: C64, space: FockSpace) -> CMatrix {
        // D(α) = exp(-iH) with H = i(α a† − α* a)
        let a = ladder_lowering(space);
        let ad = a.adjoint();
        (ad * alpha - a * alpha.conj()) * C64::new(0.0, 1.0)
    }

    fn squeeze_generator(xi: SqueezeParam, space: FockSpace) -> CMatrix {
        let a = ladder_lowering(space);
        let a2 = &a * &a;
        let ad2 = a2.adjoint();
        let z = xi.to_complex();
        (a2 * z.conj() - ad2 * z) * C64::new(0.0, 0.5)
    }

    #[test]
    fn squeeze_param_roundtrip() {
        let xi = SqueezeParam::new(1.3, 0.7);
        let back = SqueezeParam::from_complex(xi.to_complex());
        assert!((back.r - 1.3).abs() < 1e-15 && (back.theta - 0.7).abs() < 1e-15);
        let neg = SqueezeParam::new(-1.0, 0.0);
        assert_eq!(neg.r, 1.0);
        assert!((neg.theta - PI).abs() < 1e-15);
    }

    #[test]
    fn fast_operators_match_generic_exponential() {
        let s = sp(40);
        let psi = MotionalState::from_amps(
            s,
            CVector::from_fn(40, |k, _| {
                C64::new((-(k as f64) / 3.0).exp(), 0.1 * k as f64)
            }),
        )
        .unwrap();
        let d = Displacement::polar(0.7, 1.1);
        let want =
            matrix_exponential_apply(&displacement_generator(d.alpha, s), 1.0, &psi).unwrap();
        let got = apply_displacement(d, psi.amps());
        assert!((want.amps() - &got).norm() < 1e-12);
        let dense = displacement_matrix(d, s) * psi.amps();
        assert!((want.amps() - dense).norm() < 1e-12);

        let xi = SqueezeParam::new(0.4, 2.3);
        let want = matrix_exponential_apply(&squeeze_generator(xi, s), 1.0, &psi).unwrap();
        let got = apply_squeeze(xi, psi.amps());
        assert!((want.amps() - &got).norm() < 1e-12);
        let dense = squeeze_matrix(xi, s) * psi.amps();
        assert!((want.amps() - dense).norm() < 1e-12);
    }

    #[test]
    fn identity_at_zero() {
        let s = sp(16);
        let id = CMatrix::identity(16, 16);
        assert!((displacement_operator(Displacement::real(0.0), s).unwrap() - &id).norm() < 1e-12);
        assert!((squeeze_operator(SqueezeParam::new(0.0, 0.0), s).unwrap() - &id).norm() < 1e-12);
    }

    #[test]
    fn coherent_0p2_populations() {
        let s = sp(64);
        let st = coherent_state(Displacement::real(0.2), s).unwrap();
        let p = st.populations();
        assert!((p[0] - (-0.04f64).exp()).abs() < 1e-14);
        assert!((p[1] - 0.04 * (-0.04f64).exp()).abs() < 1e-14);
        assert!((p[0] - 0.96079).abs() < 1e-5 && (p[1] - 0.038431).abs() < 1e-6);
        let via_op = displacement_operator(Displacement::real(0.2), s)
            .unwrap()
            .column(0)
            .into_owned();
        assert!((via_op - st.amps()).norm() < 1e-10);
    }

    #[test]
    fn coherent_1p83_peaks_at_three() {
        let p = coherent_state(Displacement::real(1.83), sp(64))
            .unwrap()
            .populations();
        let argmax = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
        assert_eq!(argmax, 3);
    }

    #[test]
    fn displacement_group_property() {
        let s = sp(64);
        let d = Displacement::polar(0.3, 0.4);
        let prod = displacement_operator(d, s).unwrap()
            * displacement_operator(Displacement::new(-d.alpha), s).unwrap();
        let v = MotionalState::fock(s, 2).into_amps();
        assert!(((prod * &v) - v).norm() < 1e-12);
    }

    #[test]
    fn squeezed_vacuum_closed_form() {
        let s = sp(96);
        let xi = SqueezeParam::new(1.0, 0.0);
        let st = squeezed_vacuum(xi, s).unwrap();
        let p = st.populations();
        assert!((p[0] - 1.0 / 1f64.cosh()).abs() < 1e-12);
        assert!((p[0] - 0.64805).abs() < 1e-5);
        for n in (1..96).step_by(2) {
            assert_eq!(p[n], 0.0);
        }
        let p0 = squeezed_vacuum(SqueezeParam::new(2.26, 0.0), sp(2048))
            .unwrap()
            .populations()[0];
        assert!((p0 - 1.0 / 2.26f64.cosh()).abs() < 1e-12);
        assert!((p0 - 0.20646).abs() < 1e-5);
    }

    #[test]
    fn squeeze_moments_match_sinh_squared() {
        for r in [0.5, 1.0, 2.0] {
            let s = FockSpace::for_tail(0.0, r, 1e-12);
            let xi = SqueezeParam::new(r, 0.0);
            let st = squeezed_vacuum(xi, s).unwrap();
            let n_closed = expectation(&st, &number_operator(s)).unwrap().re;
            let via_op =
                MotionalState::from_amps(s, apply_squeeze(xi, MotionalState::vacuum(s).amps()))
                    .unwrap();
            let n_op = expectation(&via_op, &number_operator(s)).unwrap().re;
            let want = r.sinh().powi(2);
            assert!(
                (n_closed - want).abs() < 1e-7,
                "r={r}: {n_closed} vs {want}"
            );
            assert!((n_op - want).abs() < 1e-7, "r={r}: {n_op} vs {want}");
        }
    }

    #[test]
    fn rwa_generator_at_gt_half_matches_closed_form() {
        // H = i(g/2)(a² − a†²) for gt = 0.5 is S(0.5)
        let s = sp(64);
        let a = ladder_lowering(s);
        let a2 = &a * &a;
        let h = (&a2 - a2.adjoint()) * C64::new(0.0, 0.5);
        let out = matrix_exponential_apply(&h, 0.5, &MotionalState::vacuum(s)).unwrap();
        let closed = squeezed_vacuum(SqueezeParam::new(0.5, 0.0), s).unwrap();
        for (x, y) in out.populations().iter().zip(closed.populations()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn squeeze_dagger_is_minus_xi() {
        let s = sp(48);
        let xi = SqueezeParam::new(0.6, 0.9);
        let m = squeeze_operator(xi, s).unwrap();
        let minv = squeeze_operator(xi.inverse(), s).unwrap();
        assert!((m.adjoint() - minv).norm() < 1e-11);
    }

    #[test]
    fn squeeze_then_unsqueeze_returns_vacuum() {
        let s = sp(128);
        let xi = SqueezeParam::new(1.0, 0.0);
        let v = MotionalState::vacuum(s);
        let out = apply_squeeze(xi.inverse(), &apply_squeeze(xi, v.amps()));
        let out = MotionalState::from_amps(s, out).unwrap();
        assert!((fidelity(&out, &v).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn displaced_squeezed_reduces_to_squeezed_vacuum() {
        let xi = SqueezeParam::new(1.2, 0.5);
        let a = displaced_squeezed_amplitudes(Displacement::real(0.0), xi, 80);
        let b = squeezed_vacuum_amplitudes(xi, 80);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn displaced_squeezed_matches_operators() {
        for (alpha, r, theta) in [
            (C64::new(0.2, 0.0), 2.26, 0.0),
            (C64::new(0.5, 0.0), 0.5, PI / 3.0),
            (C64::from_polar(1.1, 0.8), 0.9, 4.0),
        ] {
            let d = Displacement::new(alpha);
            let xi = SqueezeParam::new(r, theta);
            let s = FockSpace::for_tail(alpha.norm(), r, 1e-12).doubled();
            let vac = MotionalState::vacuum(s);
            let oracle = apply_displacement(d, &apply_squeeze(xi, vac.amps()));
            let closed = displaced_squeezed_amplitudes(d, xi, s.dim());
            for n in 0..s.dim() / 2 {
                assert!(
                    (oracle[n] - closed[n]).norm() < 1e-9,
                    "alpha={alpha} r={r} n={n}: {} vs {}",
                    oracle[n],
                    closed[n]
                );
            }
        }
    }

    #[test]
    fn amplification_formula_cases() {
        let a = C64::new(0.3, -0.1);
        assert_eq!(amplify_displacement(a, SqueezeParam::new(0.0, 1.0)), a);
        let f = amplify_displacement(C64::new(0.2, 0.0), SqueezeParam::new(2.26, 0.0));
        assert!((f.re - 0.2 * 2.26f64.exp()).abs() < 1e-12);
        assert!((f.re - 1.9165).abs() < 2e-4);
        let f = amplify_displacement(C64::new(0.1, 0.0), SqueezeParam::new(1.0, PI));
        assert!((f.re - 0.1 * (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn identity_check_small_cases() {
        let s = sp(256);
        assert!(
            amplification_identity_check(C64::new(0.0, 0.0), SqueezeParam::new(1.0, 0.3), s)
                .unwrap()
                < 1e-10
        );
        assert!(
            amplification_identity_check(C64::new(0.1, 0.0), SqueezeParam::new(1.0, 0.0), s)
                .unwrap()
                < 1e-6
        );
        assert!(
            amplification_identity_check(C64::new(0.1, 0.0), SqueezeParam::new(1.0, PI), s)
                .unwrap()
                < 1e-6
        );
    }

    #[test]
    fn squeeze_db_values() {
        assert_eq!(squeeze_db(0.0), 0.0);
        assert!((squeeze_db(2.37) - 20.6).abs() < 0.05);
        assert!((squeeze_db(2.54) - 22.06).abs() < 0.01);
    }

    #[test]
    fn tail_violation_reported() {
        let r = squeezed_vacuum(SqueezeParam::new(2.54, 0.0), sp(64));
        assert!(matches!(r, Err(Error::TruncationTail { .. })));
        let r = squeeze_operator(SqueezeParam::new(2.54, 0.0), sp(64));
        assert!(matches!(r, Err(Error::TruncationTail { .. })));
    }
}
