//! Parametric drive of the motional mode: the lab-frame Hamiltonian with a
//! modulated trap curvature, its rotating-wave limit, and the numerical
//! comparison between the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    fidelity, hermitian_eigen, spectral_propagator, CMatrix, CVector, FockSpace, MotionalState,
    StateVector, C64,
};
use crate::gaussian::{apply_squeeze, squeeze_db, squeezed_vacuum_with_tol, SqueezeParam};

/// Angular rates in rad/s, phase in rad, duration in s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    pub omega_r: f64,
    pub omega_p: f64,
    pub g: f64,
    pub theta: f64,
    pub duration: f64,
}

impl DriveParams {
    pub fn new(omega_r: f64, omega_p: f64, g: f64, theta: f64, duration: f64) -> Result<Self> {
        if !(omega_r > 0.0) {
            return Err(Error::InvalidParameter {
                name: "omega_r",
                reason: format!("must be positive, got {omega_r}"),
            });
        }
        if !(g >= 0.0) || !(duration >= 0.0) || !(omega_p >= 0.0) || !theta.is_finite() {
            return Err(Error::InvalidParameter {
                name: "g",
                reason: format!(
                    "g = {g}, omega_p = {omega_p}, duration = {duration}, theta = {theta}"
                ),
            });
        }
        Ok(Self {
            omega_r,
            omega_p,
            g,
            theta,
            duration,
        })
    }

    /// Drive at exactly twice the trap frequency.
    pub fn resonant(omega_r: f64, g: f64, theta: f64, duration: f64) -> Result<Self> {
        Self::new(omega_r, 2.0 * omega_r, g, theta, duration)
    }

    pub fn is_resonant(&self) -> bool {
        (self.omega_p - 2.0 * self.omega_r).abs() <= 1e-12 * self.omega_p.abs().max(1.0)
    }

    /// Squeeze produced by the RWA evolution, `ξ = (g t, θ)`.
    pub fn squeeze(&self) -> SqueezeParam {
        SqueezeParam::new(self.g * self.duration, self.theta)
    }

    fn require_resonant(&self) -> Result<()> {
        if self.is_resonant() {
            Ok(())
        } else {
            Err(Error::OffResonance {
                omega_p: self.omega_p,
                twice_omega_r: 2.0 * self.omega_r,
            })
        }
    }
}

/// `a†² + a² + 2n̂ + 1`, the operator multiplying the modulated curvature.
fn drive_operator(dim: usize) -> CMatrix {
    let mut v = CMatrix::zeros(dim, dim);
    for n in 0..dim {
        v[(n, n)] = C64::new(2.0 * n as f64 + 1.0, 0.0);
        if n >= 2 {
            let s = C64::new(((n * (n - 1)) as f64).sqrt(), 0.0);
            v[(n - 2, n)] = s;
            v[(n, n - 2)] = s;
        }
    }
    v
}

fn bare_oscillator(dim: usize, omega_r: f64) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_fn(dim, |n, _| {
        C64::new(omega_r * (n as f64 + 0.5), 0.0)
    }))
}

/// `ω_r(n̂ + ½) − g sin(ω_p t − θ)(a†² + a² + 2a†a + 1)`.
pub fn hamiltonian_lab(p: &DriveParams, t: f64, space: FockSpace) -> CMatrix {
    let dim = space.dim();
    let c = -p.g * (p.omega_p * t - p.theta).sin();
    bare_oscillator(dim, p.omega_r) + drive_operator(dim) * C64::new(c, 0.0)
}

/// `i(g/2)(a² e^{−iθ} − a†² e^{iθ})`; its propagator over `t` is `S(g t e^{iθ})`.
pub fn hamiltonian_rwa(p: &DriveParams, space: FockSpace) -> Result<CMatrix> {
    p.require_resonant()?;
    let dim = space.dim();
    let mut h = CMatrix::zeros(dim, dim);
    let e = C64::from_polar(1.0, -p.theta);
    let i = C64::new(0.0, 1.0);
    for n in 2..dim {
        let s = ((n * (n - 1)) as f64).sqrt();
        // ⟨n−2|a²|n⟩ = s
        h[(n - 2, n)] = i * (p.g / 2.0) * e * s;
        h[(n, n - 2)] = h[(n - 2, n)].conj();
    }
    Ok(h)
}

/// Applies the RWA propagator for the drive duration.
pub fn rwa_evolve(p: &DriveParams, state: &MotionalState) -> Result<MotionalState> {
    p.require_resonant()?;
    MotionalState::from_amps_unnormalized(state.space(), apply_squeeze(p.squeeze(), state.amps()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullVsRwa {
    /// Fidelity of the interaction-picture lab-frame state to `S(gt e^{iθ})|0⟩`.
    pub fidelity: f64,
    /// Squeeze magnitude of the closest squeezed vacuum at phase θ.
    pub r_effective: f64,
    pub steps_per_period: usize,
    /// Fidelity change when the step is halved.
    pub step_change: f64,
}

/// Lab-frame state in the interaction picture after the full drive duration,
/// with a piecewise-constant midpoint Hamiltonian over `steps` steps.
fn lab_frame_state(p: &DriveParams, space: FockSpace, steps: usize) -> Result<MotionalState> {
    let dim = space.dim();
    let dt = p.duration / steps as f64;
    let mut psi = MotionalState::vacuum(space).into_amps();
    for k in 0..steps {
        let tm = (k as f64 + 0.5) * dt;
        let h = hamiltonian_lab(p, tm, space);
        let (vals, vecs) = hermitian_eigen(&h)?;
        psi = spectral_propagator(&vals, &vecs, dt) * psi;
    }
    // back to the interaction picture: exp(+i H₀ T)
    for n in 0..dim {
        psi[n] *= C64::from_polar(1.0, p.omega_r * (n as f64 + 0.5) * p.duration);
    }
    MotionalState::from_amps_unnormalized(space, psi)
}

fn steps_for(p: &DriveParams, steps_per_period: usize) -> usize {
    let periods = p.omega_p * p.duration / std::f64::consts::TAU;
    ((periods * steps_per_period as f64).ceil() as usize).max(steps_per_period)
}

/// Integrates the lab-frame drive, maps the result to the interaction picture
/// and compares with the RWA squeezed vacuum. The run is repeated with half
/// the step; a fidelity change above 1e-6 is reported as
/// [`Error::StepTooCoarse`].
pub fn simulate_full_vs_rwa(
    p: &DriveParams,
    space: FockSpace,
    steps_per_period: usize,
) -> Result<FullVsRwa> {
    p.require_resonant()?;
    if steps_per_period == 0 {
        return Err(Error::InvalidParameter {
            name: "steps_per_period",
            reason: "must be positive".into(),
        });
    }
    let target = squeezed_vacuum_with_tol(p.squeeze(), space, 1e-6)?;
    let steps = steps_for(p, steps_per_period);
    let coarse = lab_frame_state(p, space, steps)?;
    let fine = lab_frame_state(p, space, 2 * steps)?;
    fine.check_tail(1e-6)?;
    let f_coarse = fidelity(&coarse, &target)?;
    let f_fine = fidelity(&fine, &target)?;
    let change = (f_fine - f_coarse).abs();
    if change >= 1e-6 {
        return Err(Error::StepTooCoarse { change, tol: 1e-6 });
    }
    let r_effective = best_fit_r(&fine, p.theta, p.g * p.duration)?;
    Ok(FullVsRwa {
        fidelity: f_fine,
        r_effective,
        steps_per_period: 2 * steps_per_period,
        step_change: change,
    })
}

/// As [`simulate_full_vs_rwa`], doubling the step density from
/// `steps_per_period` until the convergence check passes (at most `max_doublings` times).
pub fn simulate_full_vs_rwa_converged(
    p: &DriveParams,
    space: FockSpace,
    steps_per_period: usize,
    max_doublings: usize,
) -> Result<FullVsRwa> {
    let mut spp = steps_per_period;
    let mut last = None;
    for _ in 0..=max_doublings {
        match simulate_full_vs_rwa(p, space, spp) {
            Err(e @ Error::StepTooCoarse { .. }) => {
                last = Some(e);
                spp *= 2;
            }
            other => return other,
        }
    }
    Err(last.expect("loop runs at least once"))
}

/// Golden-section search for the squeezed vacuum at phase `theta` closest to `state`.
fn best_fit_r(state: &MotionalState, theta: f64, guess: f64) -> Result<f64> {
    let space = state.space();
    let score = |r: f64| -> f64 {
        let v = apply_squeeze(
            SqueezeParam::new(r, theta),
            MotionalState::vacuum(space).amps(),
        );
        state.amps().dotc(&v).norm_sqr()
    };
    let (mut lo, mut hi) = ((guess - 0.5).max(0.0), guess + 0.5);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (score(x1), score(x2));
    while hi - lo > 1e-9 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = score(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = score(x1);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Squeezing accumulated per microsecond, in dB.
pub fn squeezing_rate_db_per_us(g: f64) -> f64 {
    squeeze_db(g * 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{hermiticity_error, matrix_exponential_apply};
    use crate::gaussian::squeezed_vacuum;
    use std::f64::consts::TAU;

    fn sp(n: usize) -> FockSpace {
        FockSpace::new(n).unwrap()
    }

    #[test]
    fn lab_hamiltonian_limits() {
        let s = sp(10);
        let p = DriveParams::resonant(2.0, 0.0, 0.3, 1.0).unwrap();
        let h = hamiltonian_lab(&p, 0.37, s);
        assert_eq!(h, bare_oscillator(10, 2.0));
        let p = DriveParams::resonant(2.0, 0.5, 0.3, 1.0).unwrap();
        // sin(ω_p t − θ) = 0
        let t0 = 0.3 / 4.0;
        assert!((hamiltonian_lab(&p, t0, s) - bare_oscillator(10, 2.0)).norm() < 1e-15);
        assert!(hermiticity_error(&hamiltonian_lab(&p, 1.234, s)) == 0.0);
    }

    #[test]
    fn rwa_rejects_detuning() {
        let p = DriveParams::new(1.0, 2.1, 0.1, 0.0, 1.0).unwrap();
        assert!(matches!(
            hamiltonian_rwa(&p, sp(8)),
            Err(Error::OffResonance { .. })
        ));
    }

    #[test]
    fn rwa_evolution_is_squeezing() {
        let s = sp(80);
        let p = DriveParams::resonant(10.0, 0.5, 0.0, 2.0).unwrap();
        let h = hamiltonian_rwa(&p, s).unwrap();
        let out = matrix_exponential_apply(&h, p.duration, &MotionalState::vacuum(s)).unwrap();
        let want = squeezed_vacuum(SqueezeParam::new(1.0, 0.0), s).unwrap();
        for (a, b) in out.populations().iter().zip(want.populations()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((fidelity(&out, &want).unwrap() - 1.0).abs() < 1e-10);

        // phase convention: the RWA phase is the squeeze phase
        let p = DriveParams::resonant(10.0, 0.5, 1.2, 1.0).unwrap();
        let h = hamiltonian_rwa(&p, s).unwrap();
        let out = matrix_exponential_apply(&h, p.duration, &MotionalState::vacuum(s)).unwrap();
        let want = squeezed_vacuum(SqueezeParam::new(0.5, 1.2), s).unwrap();
        assert!((fidelity(&out, &want).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rwa_zero_time_and_semigroup() {
        let s = sp(48);
        let v = MotionalState::vacuum(s);
        let p0 = DriveParams::resonant(1.0, 0.4, 0.0, 0.0).unwrap();
        assert!((rwa_evolve(&p0, &v).unwrap().populations()[0] - 1.0).abs() < 1e-14);
        let half = DriveParams::resonant(1.0, 0.5, 0.7, 1.0).unwrap();
        let whole = DriveParams::resonant(1.0, 0.5, 0.7, 2.0).unwrap();
        let h = hamiltonian_rwa(&half, s).unwrap();
        let two =
            matrix_exponential_apply(&h, 1.0, &matrix_exponential_apply(&h, 1.0, &v).unwrap())
                .unwrap();
        let one = matrix_exponential_apply(&h, 2.0, &v).unwrap();
        assert!((two.amps() - one.amps()).norm() < 1e-12);
        assert!((rwa_evolve(&whole, &v).unwrap().amps() - one.amps()).norm() < 1e-10);
    }

    #[test]
    fn zero_coupling_gives_vacuum() {
        let p = DriveParams::resonant(TAU, 0.0, 0.0, 3.0).unwrap();
        let out = simulate_full_vs_rwa(&p, sp(16), 64).unwrap();
        assert!((out.fidelity - 1.0).abs() < 1e-12);
        assert!(out.r_effective < 1e-6);
    }

    #[test]
    fn weak_drive_tracks_rwa() {
        // g/ω_r = 0.008 at gt = 0.3 keeps the run short
        let omega_r = TAU * 1.0;
        let g = 0.008 * omega_r;
        let p = DriveParams::resonant(omega_r, g, 0.0, 0.3 / g).unwrap();
        let out = simulate_full_vs_rwa_converged(&p, sp(40), 64, 6).unwrap();
        assert!(out.fidelity > 0.999, "{out:?}");
        assert!((out.r_effective - 0.3).abs() < 0.01, "{out:?}");
    }

    #[test]
    fn rate_in_db_per_us() {
        assert_eq!(squeezing_rate_db_per_us(0.0), 0.0);
        let g = TAU * 50.2e3;
        assert!((squeezing_rate_db_per_us(g) - 2.74).abs() < 0.01);
        assert!(
            (squeezing_rate_db_per_us(2.0 * g) - 2.0 * squeezing_rate_db_per_us(g)).abs() < 1e-12
        );
    }
}
