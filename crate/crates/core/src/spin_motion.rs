//! Qubit ⊗ oscillator dynamics: carrier rotations, red/blue sideband pulses,
//! the blue-sideband Rabi signal, and phase-sensitive red-sideband (PSRSB)
//! readout.
//!
//! Joint vectors are ordered `(|↓⟩ ⊗ Fock, |↑⟩ ⊗ Fock)` and `σ₊ = |↑⟩⟨↓|`.
//! Sideband Hamiltonians are
//! `H_RSB = (Ω/2)(e^{iφ} σ₊ a + h.c.)` and `H_BSB = (Ω/2)(e^{iφ} σ₊ a† + h.c.)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    ln_factorial_table, CMatrix, CVector, DensityOperator, FockSpace, MotionalState, StateVector,
    C64, DEFAULT_TAIL_EPS,
};
use crate::gaussian::{coherent_state_with_tol, Displacement};

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    space: FockSpace,
    amps: CVector,
}

impl JointState {
    /// `|↓⟩ ⊗ ψ`.
    pub fn down(motion: &MotionalState) -> Self {
        Self::from_blocks(
            motion.amps(),
            &CVector::zeros(motion.space().dim()),
            motion.space(),
        )
    }

    /// `|↑⟩ ⊗ ψ`.
    pub fn up(motion: &MotionalState) -> Self {
        Self::from_blocks(
            &CVector::zeros(motion.space().dim()),
            motion.amps(),
            motion.space(),
        )
    }

    fn from_blocks(down: &CVector, up: &CVector, space: FockSpace) -> Self {
        let n = space.dim();
        let mut amps = CVector::zeros(2 * n);
        amps.rows_mut(0, n).copy_from(down);
        amps.rows_mut(n, n).copy_from(up);
        Self { space, amps }
    }

    pub fn from_amps(space: FockSpace, amps: CVector) -> Result<Self> {
        if amps.len() != 2 * space.dim() {
            return Err(Error::DimensionMismatch {
                expected: 2 * space.dim(),
                found: amps.len(),
            });
        }
        Ok(Self { space, amps })
    }

    pub fn p_down(&self) -> f64 {
        self.amps.rows(0, self.space.dim()).norm_squared()
    }

    pub fn p_up(&self) -> f64 {
        self.amps
            .rows(self.space.dim(), self.space.dim())
            .norm_squared()
    }

    pub fn apply(&self, op: &CMatrix) -> Result<Self> {
        if op.nrows() != self.amps.len() || op.ncols() != self.amps.len() {
            return Err(Error::DimensionMismatch {
                expected: self.amps.len(),
                found: op.nrows(),
            });
        }
        Ok(Self {
            space: self.space,
            amps: op * &self.amps,
        })
    }

    /// Applies a 2×2 qubit operator to every oscillator level.
    pub fn apply_qubit(&self, u: &[[C64; 2]; 2]) -> Self {
        let n = self.space.dim();
        let mut out = self.amps.clone();
        for k in 0..n {
            let (d, up) = (self.amps[k], self.amps[k + n]);
            out[k] = u[0][0] * d + u[0][1] * up;
            out[k + n] = u[1][0] * d + u[1][1] * up;
        }
        Self {
            space: self.space,
            amps: out,
        }
    }
}

impl StateVector for JointState {
    fn amps(&self) -> &CVector {
        &self.amps
    }

    fn space(&self) -> FockSpace {
        self.space
    }

    fn motional_population(&self, n: usize) -> f64 {
        self.amps[n].norm_sqr() + self.amps[n + self.space.dim()].norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseKind {
    Rsb,
    Bsb,
    Carrier,
}

/// A resonant spin–motion pulse: Rabi rate Ω (rad/s), duration (s), phase (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidebandPulse {
    pub kind: PulseKind,
    pub rabi: f64,
    pub duration: f64,
    pub phase: f64,
}

impl SidebandPulse {
    pub fn new(kind: PulseKind, rabi: f64, duration: f64, phase: f64) -> Result<Self> {
        if !(rabi > 0.0 && rabi.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "rabi",
                reason: format!("must be positive, got {rabi}"),
            });
        }
        if !(duration >= 0.0 && duration.is_finite()) || !phase.is_finite() {
            return Err(Error::InvalidParameter {
                name: "duration",
                reason: format!("duration {duration} / phase {phase} not usable"),
            });
        }
        Ok(Self {
            kind,
            rabi,
            duration,
            phase,
        })
    }

    /// Pulse with `Ω t / 2 = π/2`.
    pub fn pi_pulse(kind: PulseKind, rabi: f64, phase: f64) -> Result<Self> {
        Self::new(kind, rabi, PI / rabi, phase)
    }

    /// Rotation angle `Ω t` accumulated by a unit-strength transition.
    pub fn area(&self) -> f64 {
        self.rabi * self.duration
    }
}

/// Carrier rotation by `angle` about the equatorial axis at azimuth `phase`,
/// in the `(↓, ↑)` basis.
pub fn u_carrier(phase: f64, angle: f64) -> [[C64; 2]; 2] {
    let (s, c) = (angle / 2.0).sin_cos();
    [
        [C64::new(c, 0.0), C64::from_polar(s, phase)],
        [-C64::from_polar(s, -phase), C64::new(c, 0.0)],
    ]
}

/// Carrier rotation lifted to the joint space.
pub fn u_carrier_joint(phase: f64, angle: f64, space: FockSpace) -> CMatrix {
    let u = u_carrier(phase, angle);
    let n = space.dim();
    let mut m = CMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        m[(k, k)] = u[0][0];
        m[(k, k + n)] = u[0][1];
        m[(k + n, k)] = u[1][0];
        m[(k + n, k + n)] = u[1][1];
    }
    m
}

/// Joint-space Hamiltonian of a pulse. The carrier is
/// `(Ω/2)(i e^{iφ} σ₋ − i e^{−iφ} σ₊)`, which generates [`u_carrier`].
pub fn pulse_hamiltonian(pulse: &SidebandPulse, space: FockSpace) -> CMatrix {
    let n = space.dim();
    let mut h = CMatrix::zeros(2 * n, 2 * n);
    let half = pulse.rabi / 2.0;
    for (down, up, c) in coupled_pairs(pulse.kind, n) {
        // ⟨↑,up| H |↓,down⟩
        let elem = match pulse.kind {
            PulseKind::Carrier => C64::new(0.0, -half) * C64::from_polar(1.0, -pulse.phase),
            _ => C64::from_polar(half * c, pulse.phase),
        };
        h[(up + n, down)] = elem;
        h[(down, up + n)] = elem.conj();
    }
    h
}

/// `(↓ level, ↑ level, matrix element of a or a† or 1)` for each coupled pair.
fn coupled_pairs(kind: PulseKind, n: usize) -> Vec<(usize, usize, f64)> {
    match kind {
        PulseKind::Rsb => (1..n).map(|k| (k, k - 1, (k as f64).sqrt())).collect(),
        PulseKind::Bsb => (0..n - 1)
            .map(|k| (k, k + 1, ((k + 1) as f64).sqrt()))
            .collect(),
        PulseKind::Carrier => (0..n).map(|k| (k, k, 1.0)).collect(),
    }
}

/// 2×2 block `exp(−iHt)` for one coupled pair, as `[[dd, du], [ud, uu]]`.
fn pair_block(pulse: &SidebandPulse, c: f64) -> [[C64; 2]; 2] {
    if pulse.kind == PulseKind::Carrier {
        return u_carrier(pulse.phase, pulse.area());
    }
    let (s, co) = (pulse.area() * c / 2.0).sin_cos();
    let i = C64::new(0.0, 1.0);
    [
        [C64::new(co, 0.0), -i * C64::from_polar(s, -pulse.phase)],
        [-i * C64::from_polar(s, pulse.phase), C64::new(co, 0.0)],
    ]
}

/// Exact propagator of a pulse on the joint space. The Hamiltonian is a
/// direct sum of 2×2 blocks, so the exponential is assembled block by block;
/// uncoupled levels (`|↓,0⟩` for the RSB, the top `|↑⟩` level for the BSB)
/// are left unchanged.
pub fn u_sideband(pulse: &SidebandPulse, space: FockSpace) -> CMatrix {
    let n = space.dim();
    let mut u = CMatrix::identity(2 * n, 2 * n);
    for (down, up, c) in coupled_pairs(pulse.kind, n) {
        let b = pair_block(pulse, c);
        let (d, q) = (down, up + n);
        u[(d, d)] = b[0][0];
        u[(d, q)] = b[0][1];
        u[(q, d)] = b[1][0];
        u[(q, q)] = b[1][1];
    }
    u
}

/// Applies a pulse in O(N) and checks the truncation tail of the result.
pub fn apply_pulse(pulse: &SidebandPulse, state: &JointState) -> Result<JointState> {
    let n = state.space.dim();
    let mut out = state.amps.clone();
    for (down, up, c) in coupled_pairs(pulse.kind, n) {
        let b = pair_block(pulse, c);
        let (x, y) = (state.amps[down], state.amps[up + n]);
        out[down] = b[0][0] * x + b[0][1] * y;
        out[up + n] = b[1][0] * x + b[1][1] * y;
    }
    let st = JointState {
        space: state.space,
        amps: out,
    };
    st.check_tail(DEFAULT_TAIL_EPS)?;
    Ok(st)
}

/// `P↓(t) = ½(1 + Σ P_n e^{−γ√(n+1) t} cos(Ω√(n+1) t))`.
pub fn bsb_signal(populations: &[f64], omega: f64, gamma: f64, times: &[f64]) -> Vec<f64> {
    let rates: Vec<f64> = (0..populations.len())
        .map(|n| ((n + 1) as f64).sqrt())
        .collect();
    times
        .iter()
        .map(|&t| {
            let s: f64 = populations
                .iter()
                .zip(&rates)
                .map(|(p, w)| p * (-gamma * w * t).exp() * (omega * w * t).cos())
                .sum();
            0.5 * (1.0 + s)
        })
        .collect()
}

/// Series cutoff `max(30, ⌈|α|² + 10√(|α|²+1)⌉)`.
pub fn f_alpha_nmax(alpha_abs: f64) -> usize {
    let a2 = alpha_abs * alpha_abs;
    ((a2 + 10.0 * (a2 + 1.0).sqrt()).ceil() as usize).max(30)
}

/// Readout weight `cos(π√n/2) sin(π√(n+1)/2)` linking `ρ_{n+1,n}` to the fringe.
pub fn psrsb_weight(n: usize) -> f64 {
    (FRAC_PI_2 * (n as f64).sqrt()).cos() * (FRAC_PI_2 * ((n + 1) as f64).sqrt()).sin()
}

/// `f(|α|) = Σ e^{−|α|²}|α|^{2n}/n! · cos(π√n/2) sin(π√(n+1)/2)/√(n+1)`.
pub fn f_alpha(alpha_abs: f64, nmax: usize) -> f64 {
    let lf = ln_factorial_table(nmax);
    let a2 = alpha_abs * alpha_abs;
    (0..nmax)
        .map(|n| {
            let lw = if n == 0 {
                -a2
            } else {
                -a2 + n as f64 * a2.ln() - lf[n]
            };
            lw.exp() * psrsb_weight(n) / ((n + 1) as f64).sqrt()
        })
        .sum()
}

/// `f(|α|)` with the default cutoff.
pub fn f_alpha_auto(alpha_abs: f64) -> f64 {
    f_alpha(alpha_abs, f_alpha_nmax(alpha_abs))
}

/// RSB phase that locks the fringe to `P↓ = ½ − |α| f cos φ` for a
/// displacement with phase `arg α_ref`; `beatnote` shifts the lock.
pub fn psrsb_lock_phase(alpha_ref_phase: f64, beatnote: f64) -> f64 {
    -FRAC_PI_2 - alpha_ref_phase + beatnote
}

/// Readout fringe `P↓(φ) = b + Re(K e^{iφ})` after the RSB π-pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fringe {
    pub b: f64,
    pub k: C64,
}

impl Fringe {
    pub fn pdown(&self, phi: f64) -> f64 {
        self.b + (self.k * C64::from_polar(1.0, phi)).re
    }

    /// Peak-to-trough amplitude `2|K|`.
    pub fn contrast(&self) -> f64 {
        2.0 * self.k.norm()
    }

    /// Offset and half-contrast of the `b + a cos φ` form when `K` is real.
    pub fn cos_amplitude(&self) -> f64 {
        self.k.re
    }

    /// Fringe from a joint density operator taken right after the RSB pulse.
    pub fn from_joint_density(rho: &DensityOperator) -> Self {
        let n = rho.space().dim();
        let m = rho.matrix();
        let b = 0.5 * (0..2 * n).map(|i| m[(i, i)].re).sum::<f64>();
        let k = (0..n).map(|j| m[(j + n, j)]).sum();
        Self { b, k }
    }

    /// Fringe for a noiseless RSB π-pulse at phase `rsb_phase` on `|↓⟩ ⊗ ρ`.
    pub fn from_motional_density(rho: &DensityOperator, rsb_phase: f64) -> Self {
        let m = rho.motional();
        let n = m.space().dim();
        let mm = m.matrix();
        let s: C64 = (0..n - 1).map(|j| mm[(j + 1, j)] * psrsb_weight(j)).sum();
        Self {
            b: 0.5 * m.trace(),
            k: C64::new(0.0, -1.0) * C64::from_polar(1.0, rsb_phase) * s,
        }
    }
}

/// PSRSB fringe of a pure joint state after `U_RSB` at the given Rabi rate.
pub fn psrsb_fringe_pure(state: &JointState, rsb_phase: f64) -> Result<Fringe> {
    let pulse = SidebandPulse::pi_pulse(PulseKind::Rsb, 1.0, rsb_phase)?;
    let after = apply_pulse(&pulse, state)?;
    let n = after.space.dim();
    let v = after.amps();
    let k = (0..n).map(|j| v[j + n] * v[j].conj()).sum();
    Ok(Fringe {
        b: 0.5 * v.norm_squared(),
        k,
    })
}

/// `P↓` after `D(α)|↓⟩|0⟩`, an RSB π-pulse locked to `arg α`, and a carrier
/// π/2 pulse at phase `φ`. Built from matrices, independent of the series.
pub fn psrsb_exact_pdown(alpha: C64, phi: f64, space: FockSpace) -> Result<f64> {
    psrsb_exact_pdown_locked(alpha, phi, psrsb_lock_phase(alpha.arg(), 0.0), space)
}

/// As [`psrsb_exact_pdown`] with an explicit RSB phase.
pub fn psrsb_exact_pdown_locked(
    alpha: C64,
    phi: f64,
    rsb_phase: f64,
    space: FockSpace,
) -> Result<f64> {
    let motion = coherent_state_with_tol(Displacement::new(alpha), space, DEFAULT_TAIL_EPS)?;
    let joint = JointState::down(&motion);
    // unit Rabi rate: only the pulse area matters
    let rsb = SidebandPulse::pi_pulse(PulseKind::Rsb, 1.0, rsb_phase)?;
    let after = joint.apply(&u_sideband(&rsb, space))?;
    after.check_tail(DEFAULT_TAIL_EPS)?;
    let out = after.apply_qubit(&u_carrier(phi, FRAC_PI_2));
    Ok(out.p_down())
}

/// `C = P↓(π) − P↓(0)`.
pub fn psrsb_contrast(alpha: C64, space: FockSpace) -> Result<f64> {
    Ok(psrsb_exact_pdown(alpha, PI, space)? - psrsb_exact_pdown(alpha, 0.0, space)?)
}

/// Direct red-sideband readout: `P↓` after an RSB π-pulse on `|↓⟩ ⊗ ρ`,
/// `Σ P_n cos²(π√n/2)`, which departs from 1 as `|α|²` for small coherent states.
pub fn direct_rsb_pdown(populations: &[f64]) -> f64 {
    populations
        .iter()
        .enumerate()
        .map(|(n, p)| p * (FRAC_PI_2 * (n as f64).sqrt()).cos().powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::unitary_propagator;

    fn sp(n: usize) -> FockSpace {
        FockSpace::new(n).unwrap()
    }

    fn qmul(a: &[[C64; 2]; 2], b: &[[C64; 2]; 2]) -> [[C64; 2]; 2] {
        let mut o = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        o
    }

    #[test]
    fn carrier_identity_and_composition() {
        let id = u_carrier(0.7, 0.0);
        assert_eq!(id[0][0], C64::new(1.0, 0.0));
        assert_eq!(id[0][1].norm(), 0.0);
        let half = u_carrier(0.4, FRAC_PI_2);
        let two = qmul(&half, &half);
        let full = u_carrier(0.4, PI);
        for i in 0..2 {
            for j in 0..2 {
                assert!((two[i][j] - full[i][j]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn propagators_match_hamiltonian_exponential() {
        let s = sp(12);
        for kind in [PulseKind::Rsb, PulseKind::Bsb, PulseKind::Carrier] {
            let p = SidebandPulse::new(kind, 2.0, 0.83, 0.6).unwrap();
            let want = unitary_propagator(&pulse_hamiltonian(&p, s), p.duration).unwrap();
            assert!((u_sideband(&p, s) - want).norm() < 1e-12, "{kind:?}");
        }
        let p = SidebandPulse::new(PulseKind::Carrier, 1.0, 1.3, -0.2).unwrap();
        let want = u_carrier_joint(-0.2, 1.3, s);
        assert!((u_sideband(&p, s) - want).norm() < 1e-14);
    }

    #[test]
    fn rsb_leaves_ground_state_alone() {
        let s = sp(8);
        let g = JointState::down(&MotionalState::vacuum(s));
        for t in [0.0, 0.3, 1.0, 17.0] {
            let p = SidebandPulse::new(PulseKind::Rsb, 3.0, t, 1.1).unwrap();
            let out = apply_pulse(&p, &g).unwrap();
            assert_eq!(out.amps(), g.amps());
        }
    }

    #[test]
    fn bsb_pi_pulse_flips_ground_state() {
        let s = sp(8);
        let p = SidebandPulse::pi_pulse(PulseKind::Bsb, 2.0, 0.0).unwrap();
        assert!((p.rabi * p.duration / 2.0 - FRAC_PI_2).abs() < 1e-15);
        let out = apply_pulse(&p, &JointState::down(&MotionalState::vacuum(s))).unwrap();
        assert!((out.amps()[8 + 1].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rsb_rate_scales_with_root_n() {
        let s = sp(16);
        let omega = 1.0;
        // population returns to |↓,n⟩ after 2π/(Ω√n)
        let period = |n: f64| 2.0 * PI / (omega * n.sqrt());
        assert!((period(4.0) - period(1.0) / 2.0).abs() < 1e-15);
        for n in [1usize, 4] {
            let p = SidebandPulse::new(PulseKind::Rsb, omega, period(n as f64), 0.0).unwrap();
            let st = JointState::down(&MotionalState::fock(s, n));
            let out = apply_pulse(&p, &st).unwrap();
            assert!((out.p_down() - 1.0).abs() < 1e-12);
            let half =
                SidebandPulse::new(PulseKind::Rsb, omega, period(n as f64) / 2.0, 0.0).unwrap();
            assert!(apply_pulse(&half, &st).unwrap().p_up() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn bsb_signal_edges() {
        let t = [0.0, 0.1, 0.2];
        let s = bsb_signal(&[1.0], 5.0, 0.0, &t);
        for (v, tt) in s.iter().zip(t) {
            assert!((v - 0.5 * (1.0 + (5.0 * tt).cos())).abs() < 1e-15);
        }
        let s = bsb_signal(&[0.2, 0.3, 0.5], 5.0, 2.0, &[0.0]);
        assert!((s[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn f_alpha_values() {
        assert_eq!(f_alpha_auto(0.0), 1.0);
        assert!((f_alpha_auto(0.055) - 0.99699).abs() < 2e-5);
        assert_eq!(f_alpha_nmax(0.0), 30);
        assert_eq!(f_alpha_nmax(10.0), 201);
    }

    #[test]
    fn psrsb_small_examples() {
        let s = sp(64);
        for phi in [0.0, 1.0, 2.5] {
            assert!((psrsb_exact_pdown(C64::new(0.0, 0.0), phi, s).unwrap() - 0.5).abs() < 1e-15);
        }
        let a = C64::new(0.055, 0.0);
        let p0 = psrsb_exact_pdown(a, 0.0, s).unwrap();
        assert!((p0 - (0.5 - 0.055 * f_alpha_auto(0.055))).abs() < 1e-12);
        assert!((p0 - 0.4452).abs() < 1e-4);
        assert!((psrsb_exact_pdown(a, FRAC_PI_2, s).unwrap() - 0.5).abs() < 1e-12);
        let c = psrsb_contrast(a, s).unwrap();
        assert!((c - 0.1097).abs() < 1e-4);
    }

    #[test]
    fn psrsb_complex_alpha_is_locked() {
        let s = sp(64);
        let a = C64::from_polar(0.8, 2.1);
        let want = 0.5 - 0.8 * f_alpha_auto(0.8) * 0.3f64.cos();
        assert!((psrsb_exact_pdown(a, 0.3, s).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn fringe_paths_agree() {
        let s = sp(48);
        let a = C64::from_polar(0.7, 0.4);
        let rsb_phase = psrsb_lock_phase(0.4, 0.0);
        let motion = coherent_state_with_tol(Displacement::new(a), s, 1e-10).unwrap();
        let joint = JointState::down(&motion);
        let pure = psrsb_fringe_pure(&joint, rsb_phase).unwrap();
        let dens =
            Fringe::from_motional_density(&DensityOperator::from_motional(&motion), rsb_phase);
        let rsb = SidebandPulse::pi_pulse(PulseKind::Rsb, 1.0, rsb_phase).unwrap();
        let after = joint.apply(&u_sideband(&rsb, s)).unwrap();
        let full = Fringe::from_joint_density(&DensityOperator::from_joint(&after));
        for phi in [0.0, 0.9, PI] {
            let exact = psrsb_exact_pdown(a, phi, s).unwrap();
            assert!((pure.pdown(phi) - exact).abs() < 1e-12);
            assert!((dens.pdown(phi) - exact).abs() < 1e-12);
            assert!((full.pdown(phi) - exact).abs() < 1e-12);
        }
        assert!((pure.contrast() - 2.0 * 0.7 * f_alpha_auto(0.7)).abs() < 1e-12);
    }

    #[test]
    fn direct_rsb_is_quadratic() {
        let s = sp(32);
        let p = coherent_state_with_tol(Displacement::real(0.01), s, 1e-10)
            .unwrap()
            .populations();
        let dev = 1.0 - direct_rsb_pdown(&p);
        assert!((dev / 1e-4 - 1.0).abs() < 1e-3);
    }
}
