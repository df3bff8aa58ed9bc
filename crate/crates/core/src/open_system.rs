//! Lindblad evolution with motional heating (`√ṅ a`, `√ṅ a†`) and motional
//! dephasing (`√Γ n̂`) for pulse sequences.
//!
//! During squeezing the state is carried in the co-squeezed frame
//! `ρ̃ = F† ρ F` with `F = S(R e^{iθ})`, where `R` is the squeeze accumulated
//! so far. The squeeze Hamiltonian vanishes there, a displacement stays a
//! displacement, and the jump operators become `ã = a cosh R − a† e^{iθ} sinh R`.
//! A squeeze followed by the matching anti-squeeze returns the frame to the
//! identity without ever representing the strongly squeezed state.
//!
//! The default [`Integrator::Split`] treats dephasing exactly in the
//! eigenbasis of `ã†ã` (Strang splitting) and the remaining generator with
//! RK4. [`Integrator::Rk4`] integrates everything with RK4 in the lab frame.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::sync::{Arc, LazyLock, Mutex};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::banded::Banded;
use crate::error::{Error, Result};
use crate::fock::{
    checked_eigen, Basis, CMatrix, DensityOperator, FockSpace, MotionalState, StateVector, C64,
    DEFAULT_TAIL_EPS, TAIL_LEVELS,
};
use crate::gaussian::{
    apply_displacement, apply_squeeze, squeeze_matrix, Displacement, SqueezeParam,
};
use crate::spin_motion::{apply_pulse, pulse_hamiltonian, JointState, PulseKind, SidebandPulse};

/// Heating rate ṅ in quanta/s and dephasing rate Γ in 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub heating_rate: f64,
    pub dephasing_rate: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            heating_rate: 20.0,
            dephasing_rate: 18.0,
        }
    }
}

impl NoiseParams {
    pub fn new(heating_rate: f64, dephasing_rate: f64) -> Result<Self> {
        for (name, v) in [
            ("heating_rate", heating_rate),
            ("dephasing_rate", dephasing_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: if name == "heating_rate" {
                        "heating_rate"
                    } else {
                        "dephasing_rate"
                    },
                    reason: format!("must be a finite rate ≥ 0, got {v}"),
                });
            }
        }
        Ok(Self {
            heating_rate,
            dephasing_rate,
        })
    }

    pub fn none() -> Self {
        Self {
            heating_rate: 0.0,
            dephasing_rate: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.heating_rate == 0.0 && self.dephasing_rate == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Displace,
    Squeeze,
    Rsb,
    Bsb,
    Carrier,
    Free,
}

impl SegmentKind {
    fn name(self) -> &'static str {
        match self {
            Self::Displace => "displace",
            Self::Squeeze => "squeeze",
            Self::Rsb => "rsb",
            Self::Bsb => "bsb",
            Self::Carrier => "carrier",
            Self::Free => "free",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "displace" => Self::Displace,
            "squeeze" => Self::Squeeze,
            "rsb" => Self::Rsb,
            "bsb" => Self::Bsb,
            "carrier" => Self::Carrier,
            "free" => Self::Free,
            _ => return None,
        })
    }
}

/// One piece of a sequence. `strength` is `|α|` for a displacement, `g` (rad/s)
/// for a squeeze, `Ω` (rad/s) for spin pulses, and unused for free evolution.
/// A displacement of `strength·e^{i phase}` is spread evenly over `duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub duration: f64,
    pub phase: f64,
    pub strength: f64,
    /// Noise channels act during this segment.
    pub noisy: bool,
}

impl Segment {
    pub fn new(kind: SegmentKind, duration: f64, phase: f64, strength: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "duration",
                reason: format!("segment durations must be positive, got {duration}"),
            });
        }
        if !phase.is_finite() || !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "strength",
                reason: format!("phase {phase} / strength {strength} not usable"),
            });
        }
        Ok(Self {
            kind,
            duration,
            phase,
            strength,
            noisy: true,
        })
    }

    pub fn displace(alpha: C64, duration: f64) -> Result<Self> {
        Self::new(SegmentKind::Displace, duration, alpha.arg(), alpha.norm())
    }

    pub fn squeeze(g: f64, theta: f64, duration: f64) -> Result<Self> {
        Self::new(SegmentKind::Squeeze, duration, theta, g)
    }

    pub fn pulse(p: &SidebandPulse) -> Result<Self> {
        let kind = match p.kind {
            PulseKind::Rsb => SegmentKind::Rsb,
            PulseKind::Bsb => SegmentKind::Bsb,
            PulseKind::Carrier => SegmentKind::Carrier,
        };
        Self::new(kind, p.duration, p.phase, p.rabi)
    }

    pub fn free(duration: f64) -> Result<Self> {
        Self::new(SegmentKind::Free, duration, 0.0, 0.0)
    }

    pub fn quiet(mut self) -> Self {
        self.noisy = false;
        self
    }

    fn as_pulse(&self) -> Option<SidebandPulse> {
        let kind = match self.kind {
            SegmentKind::Rsb => PulseKind::Rsb,
            SegmentKind::Bsb => PulseKind::Bsb,
            SegmentKind::Carrier => PulseKind::Carrier,
            _ => return None,
        };
        Some(SidebandPulse {
            kind,
            rabi: self.strength,
            duration: self.duration,
            phase: self.phase,
        })
    }
}

/// Ordered segments sharing one phase reference.
///
/// Text form, one segment per line:
///
/// ```text
/// # kind  duration_us  phase_rad  strength  [quiet]
/// squeeze 8.0 0.0 50.2
/// displace 5.0 0.0 0.055
/// squeeze 8.0 3.141592653589793 50.2
/// rsb 454.5 -1.5707963267948966 1.1
/// ```
///
/// `strength` is `|α|` for `displace`, `g` in kHz for `squeeze`, `Ω` in kHz
/// for `rsb`/`bsb`/`carrier` (converted with 2π), and ignored for `free`.
/// A trailing `quiet` switches noise off for that segment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub segments: Vec<Segment>,
}

impl PulseSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn push(&mut self, s: Segment) {
        self.segments.push(s);
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 4 && !(tok.len() == 5 && tok[4] == "quiet") {
                return Err(perr(format!(
                    "expected `kind duration_us phase_rad strength [quiet]`, got `{line}`"
                )));
            }
            let kind = SegmentKind::parse(tok[0])
                .ok_or_else(|| perr(format!("unknown segment kind `{}`", tok[0])))?;
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| perr(format!("{what} `{s}` is not a number")))
            };
            let duration = num(tok[1], "duration_us")? * 1e-6;
            let phase = num(tok[2], "phase_rad")?;
            let raw_strength = num(tok[3], "strength")?;
            let strength = match kind {
                SegmentKind::Displace | SegmentKind::Free => raw_strength,
                _ => raw_strength * 1e3 * TAU,
            };
            let mut seg =
                Segment::new(kind, duration, phase, strength).map_err(|e| perr(e.to_string()))?;
            if tok.len() == 5 {
                seg = seg.quiet();
            }
            segments.push(seg);
        }
        Ok(Self { segments })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# kind duration_us phase_rad strength\n");
        for s in &self.segments {
            let strength = match s.kind {
                SegmentKind::Displace | SegmentKind::Free => s.strength,
                _ => s.strength / (1e3 * TAU),
            };
            let _ = write!(
                out,
                "{} {} {} {}",
                s.kind.name(),
                s.duration * 1e6,
                s.phase,
                strength
            );
            if !s.noisy {
                out.push_str(" quiet");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// RK4 for Hamiltonian and heating, exact dephasing, co-squeezed frame.
    Split,
    /// RK4 on the full Lindbladian in the lab frame.
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub integrator: Integrator,
    /// Largest step while the frame is squeezed (s).
    pub frame_dt: f64,
    /// Largest step in the unsqueezed frame (s).
    pub lab_dt: f64,
    /// Bound on `h · ‖generator‖` for the RK4 part.
    pub accuracy: f64,
    /// Repeat with half the step and compare in trace distance, halving
    /// again until two successive runs agree.
    pub check_convergence: bool,
    pub convergence_tol: f64,
    /// Further step halvings tried before giving up on convergence.
    pub max_refinements: usize,
    pub tail_eps: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            integrator: Integrator::Split,
            frame_dt: 5e-9,
            lab_dt: 1e-6,
            accuracy: 0.1,
            check_convergence: true,
            convergence_tol: 1e-7,
            max_refinements: 3,
            tail_eps: DEFAULT_TAIL_EPS,
        }
    }
}

/// Initial condition of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Motional(MotionalState),
    Joint(JointState),
    Density(DensityOperator),
}

impl From<MotionalState> for InitialState {
    fn from(s: MotionalState) -> Self {
        Self::Motional(s)
    }
}

impl From<JointState> for InitialState {
    fn from(s: JointState) -> Self {
        Self::Joint(s)
    }
}

impl From<DensityOperator> for InitialState {
    fn from(s: DensityOperator) -> Self {
        Self::Density(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub rho: DensityOperator,
    /// Largest oscillator tail seen at segment boundaries (in the working frame).
    pub max_tail: f64,
    /// Trace distance between the step and half-step runs (0 if unchecked or unitary).
    pub step_change: f64,
    pub steps: usize,
}

/// Real symmetric `(μa − νa†)ᵀ(μa − νa†)`; conjugating by `diag(e^{inθ/2})` gives `ã†ã`.
fn frame_number_real(n: usize, r: f64) -> DMatrix<f64> {
    let (mu, nu) = (r.cosh(), r.sinh());
    let mut l = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let s = (k as f64).sqrt();
        l[(k - 1, k)] = mu * s;
        l[(k, k - 1)] = -nu * s;
    }
    l.transpose() * l
}

/// Eigensystem of [`frame_number_real`] split into even and odd Fock levels,
/// which it never mixes.
struct ParityEigen {
    vecs: [DMatrix<f64>; 2],
    vals: [Vec<f64>; 2],
}

const EIGEN_CACHE_BYTES: usize = 256 << 20;

static EIGEN_CACHE: LazyLock<Mutex<HashMap<(usize, i64), Arc<ParityEigen>>>> =
    LazyLock::new(|| Mutex::new(HashMap::new()));

/// Squeeze values closer than 1e-12 share an entry, so the forward and
/// reverse passes of a squeeze/anti-squeeze pair reuse each other's work.
fn parity_eigen(n: usize, r: f64) -> Arc<ParityEigen> {
    let key = (n, (r * 1e12).round() as i64);
    if let Some(e) = EIGEN_CACHE.lock().expect("eigen cache poisoned").get(&key) {
        return e.clone();
    }
    let m = frame_number_real(n, r);
    let part = |p: usize| {
        let idx: Vec<usize> = (p..n).step_by(2).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])]);
        let e = checked_eigen(sub);
        (
            e.eigenvectors,
            e.eigenvalues.iter().copied().collect::<Vec<_>>(),
        )
    };
    let ((ve, le), (vo, lo)) = (part(0), part(1));
    let e = Arc::new(ParityEigen {
        vecs: [ve, vo],
        vals: [le, lo],
    });
    let mut cache = EIGEN_CACHE.lock().expect("eigen cache poisoned");
    if cache.len() * 4 * n * n >= EIGEN_CACHE_BYTES {
        cache.clear();
    }
    cache.insert(key, e.clone());
    e
}

/// Ladder-operator products on the working space, lifted to `I₂ ⊗ ·` for
/// joint states.
struct LadderOps {
    a: Banded,
    ad: Banded,
    a2: Banded,
    ad2: Banded,
    /// `a a† + a† a`
    k0: Banded,
    n: Banded,
}

impl LadderOps {
    fn new(dim: usize, joint: bool) -> Self {
        let mut a = Banded::zeros(dim);
        for k in 1..dim {
            a.add_entry(k - 1, k, C64::new((k as f64).sqrt(), 0.0));
        }
        let ad = a.adjoint();
        let n = ad.mul(&a);
        let ops = Self {
            a2: a.mul(&a),
            ad2: ad.mul(&ad),
            k0: a.mul(&ad).add(&n),
            a,
            ad,
            n,
        };
        if joint {
            ops.lifted()
        } else {
            ops
        }
    }

    fn lifted(&self) -> Self {
        Self {
            a: self.a.lift_block_diagonal(),
            ad: self.ad.lift_block_diagonal(),
            a2: self.a2.lift_block_diagonal(),
            ad2: self.ad2.lift_block_diagonal(),
            k0: self.k0.lift_block_diagonal(),
            n: self.n.lift_block_diagonal(),
        }
    }
}

struct Generator {
    heff: Banded,
    jumps: Vec<Banded>,
}

impl Generator {
    /// `−i H_eff ρ + h.c. + Σ L ρ L†`, Hermitian for Hermitian `ρ`.
    fn apply(&self, rho: &CMatrix) -> CMatrix {
        let x = self.heff.mul_dense(rho) * C64::new(0.0, -1.0);
        let mut out = &x + x.adjoint();
        for l in &self.jumps {
            let y = l.mul_dense(rho);
            out += l.mul_dense(&y.adjoint());
        }
        out
    }

    fn rate_bound(&self) -> f64 {
        2.0 * self.heff.row_sum_bound()
            + self
                .jumps
                .iter()
                .map(|l| l.row_sum_bound().powi(2))
                .sum::<f64>()
    }
}

/// What drives a segment apart from the noise.
#[derive(Debug, Clone)]
enum Drive {
    /// Displacement rate ε (1/s): `H = i(ε a† − ε* a)`.
    Displace(C64),
    /// RWA squeeze at rate `g` and phase θ.
    Squeeze {
        g: f64,
        theta: f64,
    },
    Pulse(SidebandPulse),
    Free,
    Hamiltonian(Banded),
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    r: f64,
    axis: f64,
}

struct Engine {
    space: FockSpace,
    joint: bool,
    ops: LadderOps,
    rho: CMatrix,
    frame: Frame,
    noise: NoiseParams,
    opts: EvolveOptions,
    dt_scale: f64,
    max_tail: f64,
    steps: usize,
}

fn same_angle(a: f64, b: f64) -> bool {
    let d = (a - b).rem_euclid(TAU);
    d < 1e-12 || TAU - d < 1e-12
}

impl Engine {
    fn dim(&self) -> usize {
        if self.joint {
            2 * self.space.dim()
        } else {
            self.space.dim()
        }
    }

    fn to_joint(&mut self) {
        if self.joint {
            return;
        }
        let n = self.space.dim();
        let mut m = CMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.rho);
        self.rho = m;
        self.joint = true;
        self.ops = self.ops.lifted();
    }

    /// Returns to the lab frame: `ρ = F ρ̃ F†`.
    fn materialize(&mut self) {
        if self.frame.r == 0.0 {
            return;
        }
        let n = self.space.dim();
        let f = squeeze_matrix(SqueezeParam::new(self.frame.r, self.frame.axis), self.space);
        let fa = f.adjoint();
        let blocks = if self.joint { 2 } else { 1 };
        for bi in 0..blocks {
            for bj in 0..blocks {
                let blk = self.rho.view((bi * n, bj * n), (n, n)).into_owned();
                let out = &f * blk * &fa;
                self.rho.view_mut((bi * n, bj * n), (n, n)).copy_from(&out);
            }
        }
        self.frame.r = 0.0;
        self.record_tail();
    }

    fn record_tail(&mut self) {
        let n = self.space.dim();
        let mut tail = 0.0;
        for k in n - TAIL_LEVELS.min(n)..n {
            tail += self.rho[(k, k)].re;
            if self.joint {
                tail += self.rho[(k + n, k + n)].re;
            }
        }
        self.max_tail = self.max_tail.max(tail);
    }

    fn generator(&self, drive: &Drive, r: f64, noisy: bool) -> Generator {
        let frame_mode = self.opts.integrator == Integrator::Split;
        let (mu, nu, e) = if frame_mode {
            (r.cosh(), r.sinh(), C64::from_polar(1.0, self.frame.axis))
        } else {
            (1.0, 0.0, C64::new(1.0, 0.0))
        };
        let ops = &self.ops;
        let re = |x: f64| C64::new(x, 0.0);
        let i = C64::new(0.0, 1.0);
        let at = ops.a.scale(re(mu)).add(&ops.ad.scale(-e * nu));
        let atd = ops.ad.scale(re(mu)).add(&ops.a.scale(-e.conj() * nu));
        let mut heff = match drive {
            Drive::Displace(eps) => atd.scale(i * eps).add(&at.scale(-i * eps.conj())),
            Drive::Squeeze { g, theta } if !frame_mode => {
                let z = C64::from_polar(g / 2.0, -theta);
                ops.a2.scale(i * z).add(&ops.ad2.scale(-i * z.conj()))
            }
            Drive::Hamiltonian(h) => h.clone(),
            Drive::Pulse(p) => Banded::from_dense(&pulse_hamiltonian(p, self.space)),
            Drive::Squeeze { .. } | Drive::Free => Banded::zeros(self.dim()),
        };
        let mut jumps = Vec::new();
        let heating = self.noise.heating_rate;
        if noisy && heating > 0.0 {
            jumps.push(at.scale(re(heating.sqrt())));
            jumps.push(atd.scale(re(heating.sqrt())));
            // ã ã† + ã† ã
            let k = ops
                .k0
                .scale(re(mu * mu + nu * nu))
                .add(&ops.ad2.scale(e * (-2.0 * mu * nu)))
                .add(&ops.a2.scale(e.conj() * (-2.0 * mu * nu)));
            heff = heff.add(&k.scale(C64::new(0.0, -0.5 * heating)));
        }
        let gamma = self.noise.dephasing_rate;
        if noisy && !frame_mode && gamma > 0.0 {
            jumps.push(ops.n.scale(re(gamma.sqrt())));
            heff = heff.add(&ops.n.mul(&ops.n).scale(C64::new(0.0, -0.5 * gamma)));
        }
        Generator { heff, jumps }
    }

    /// Exact dephasing for time `tau` with the frame at `r`.
    fn dephase(&mut self, r: f64, tau: f64) {
        let gamma = self.noise.dephasing_rate;
        if gamma == 0.0 || tau == 0.0 {
            return;
        }
        let n = self.space.dim();
        let blocks = if self.joint { 2 } else { 1 };
        if r == 0.0 {
            for i in 0..blocks * n {
                for j in 0..blocks * n {
                    let d = (i % n) as f64 - (j % n) as f64;
                    self.rho[(i, j)] *= (-0.5 * gamma * tau * d * d).exp();
                }
            }
            return;
        }
        let eig = parity_eigen(n, r);
        let phase: Vec<C64> = (0..n)
            .map(|k| C64::from_polar(1.0, k as f64 * self.frame.axis / 2.0))
            .collect();
        for bi in 0..blocks {
            for bj in 0..blocks {
                for p in 0..2 {
                    for q in 0..2 {
                        let (vp, vq) = (&eig.vecs[p], &eig.vecs[q]);
                        let (np, nq) = (vp.nrows(), vq.nrows());
                        let at = |i: usize, j: usize| (bi * n + p + 2 * i, bj * n + q + 2 * j);
                        let mut zr = DMatrix::<f64>::zeros(np, nq);
                        let mut zi = DMatrix::<f64>::zeros(np, nq);
                        for j in 0..nq {
                            for i in 0..np {
                                let z =
                                    phase[p + 2 * i].conj() * self.rho[at(i, j)] * phase[q + 2 * j];
                                zr[(i, j)] = z.re;
                                zi[(i, j)] = z.im;
                            }
                        }
                        let mut yr = vp.tr_mul(&zr) * vq;
                        let mut yi = vp.tr_mul(&zi) * vq;
                        for j in 0..nq {
                            for i in 0..np {
                                let d = eig.vals[p][i] - eig.vals[q][j];
                                let f = (-0.5 * gamma * tau * d * d).exp();
                                yr[(i, j)] *= f;
                                yi[(i, j)] *= f;
                            }
                        }
                        let zr = vp * yr * vq.transpose();
                        let zi = vp * yi * vq.transpose();
                        for j in 0..nq {
                            for i in 0..np {
                                self.rho[at(i, j)] = phase[p + 2 * i]
                                    * C64::new(zr[(i, j)], zi[(i, j)])
                                    * phase[q + 2 * j].conj();
                            }
                        }
                    }
                }
            }
        }
    }

    fn rk4(&mut self, gens: [&Generator; 3], h: f64) {
        let half = C64::new(h / 2.0, 0.0);
        let k1 = gens[0].apply(&self.rho);
        let k2 = gens[1].apply(&(&self.rho + &k1 * half));
        let k3 = gens[1].apply(&(&self.rho + &k2 * half));
        let k4 = gens[2].apply(&(&self.rho + &k3 * C64::new(h, 0.0)));
        self.rho += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
    }

    fn run_drive(&mut self, mut drive: Drive, duration: f64, noisy: bool) {
        let frame_mode = self.opts.integrator == Integrator::Split;
        // signed squeeze rate in the frame
        let mut rate = 0.0;
        if let Drive::Squeeze { g, theta } = drive {
            if frame_mode {
                if self.frame.r == 0.0 {
                    self.frame.axis = theta.rem_euclid(TAU);
                    rate = g;
                } else if same_angle(theta, self.frame.axis) {
                    rate = g;
                } else if same_angle(theta, self.frame.axis + PI) {
                    rate = -g;
                } else {
                    self.materialize();
                    self.frame.axis = theta.rem_euclid(TAU);
                    rate = g;
                }
            }
        }
        if matches!(drive, Drive::Pulse(_) | Drive::Hamiltonian(_)) {
            self.materialize();
        }
        if let Drive::Pulse(p) = drive {
            drive = Drive::Hamiltonian(Banded::from_dense(&pulse_hamiltonian(&p, self.space)));
        }
        let r0 = self.frame.r;
        let r_at = move |t: f64| r0 + rate * t;
        let r_end = r_at(duration);

        let quiet = !noisy || self.noise.is_zero();
        let static_drive = matches!(drive, Drive::Free | Drive::Squeeze { .. }) && frame_mode;
        if !(quiet && static_drive) {
            let r_max = r0.abs().max(r_end.abs());
            let gen = self.generator(
                &drive,
                if r0.abs() > r_end.abs() { r0 } else { r_end },
                noisy,
            );
            let cap = if r_max > 0.0 {
                self.opts.frame_dt
            } else {
                self.opts.lab_dt
            };
            let bound = gen.rate_bound();
            let mut h = cap;
            if bound > 0.0 {
                h = h.min(self.opts.accuracy / bound);
            }
            h *= self.dt_scale;
            let steps = (duration / h).ceil().max(1.0) as usize;
            let h = duration / steps as f64;
            let split = frame_mode && noisy;
            if split {
                self.dephase(r_at(0.0), h / 2.0);
            }
            for k in 0..steps {
                let t = k as f64 * h;
                if rate == 0.0 {
                    self.rk4([&gen, &gen, &gen], h);
                } else {
                    let g1 = self.generator(&drive, r_at(t), noisy);
                    let g2 = self.generator(&drive, r_at(t + h / 2.0), noisy);
                    let g3 = self.generator(&drive, r_at(t + h), noisy);
                    self.rk4([&g1, &g2, &g3], h);
                }
                if split {
                    let tau = if k + 1 == steps { h / 2.0 } else { h };
                    self.dephase(r_at(t + h), tau);
                }
            }
            self.steps += steps;
        }
        self.frame.r = r_end;
        self.record_tail();
    }

    fn run_segment(&mut self, seg: &Segment) {
        let drive = match seg.kind {
            SegmentKind::Displace => {
                Drive::Displace(C64::from_polar(seg.strength / seg.duration, seg.phase))
            }
            SegmentKind::Squeeze => Drive::Squeeze {
                g: seg.strength,
                theta: seg.phase,
            },
            SegmentKind::Free => Drive::Free,
            _ => {
                self.to_joint();
                Drive::Pulse(seg.as_pulse().expect("spin segment"))
            }
        };
        self.run_drive(drive, seg.duration, seg.noisy);
    }
}

fn engine_for(
    rho: &DensityOperator,
    noise: NoiseParams,
    opts: EvolveOptions,
    dt_scale: f64,
) -> Engine {
    Engine {
        space: rho.space(),
        joint: rho.basis() == Basis::Joint,
        ops: LadderOps::new(rho.space().dim(), rho.basis() == Basis::Joint),
        rho: rho.matrix().clone(),
        frame: Frame { r: 0.0, axis: 0.0 },
        noise,
        opts,
        dt_scale,
        max_tail: 0.0,
        steps: 0,
    }
}

fn finish(engine: Engine) -> Result<(DensityOperator, f64, usize)> {
    let basis = if engine.joint {
        Basis::Joint
    } else {
        Basis::Oscillator
    };
    let rho = DensityOperator::new(engine.rho, engine.space, basis)?;
    Ok((rho, engine.max_tail, engine.steps))
}

fn check_tail(tail: f64, opts: &EvolveOptions, space: FockSpace) -> Result<()> {
    if tail > opts.tail_eps {
        return Err(Error::TruncationTail {
            tail,
            eps: opts.tail_eps,
            dim: space.dim(),
        });
    }
    Ok(())
}

fn with_convergence<F>(opts: &EvolveOptions, run: F) -> Result<(DensityOperator, f64, usize, f64)>
where
    F: Fn(f64) -> Result<(DensityOperator, f64, usize)>,
{
    let (mut rho, mut tail, mut steps) = run(1.0)?;
    if !opts.check_convergence {
        return Ok((rho, tail, steps, 0.0));
    }
    let mut scale = 1.0;
    let mut change = f64::INFINITY;
    for _ in 0..=opts.max_refinements {
        scale *= 0.5;
        let (fine, tail_f, steps_f) = run(scale)?;
        change = rho.trace_distance(&fine)?;
        rho = fine;
        tail = tail.max(tail_f);
        steps += steps_f;
        if change <= opts.convergence_tol {
            return Ok((rho, tail, steps, change));
        }
    }
    Err(Error::StepTooCoarse {
        change,
        tol: opts.convergence_tol,
    })
}

/// Evolves `rho` for time `t` under the constant Hamiltonian `h` (lab frame)
/// with heating and dephasing on the oscillator.
pub fn lindblad_evolve(
    rho: &DensityOperator,
    h: &CMatrix,
    noise: NoiseParams,
    t: f64,
    opts: &EvolveOptions,
) -> Result<DensityOperator> {
    if h.nrows() != rho.matrix().nrows() || !h.is_square() {
        return Err(Error::DimensionMismatch {
            expected: rho.matrix().nrows(),
            found: h.nrows(),
        });
    }
    let herm = crate::fock::hermiticity_error(h);
    if herm > 1e-12 {
        return Err(Error::NotHermitian(herm));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: format!("evolution time must be ≥ 0, got {t}"),
        });
    }
    let hb = Banded::from_dense(h);
    let (out, tail, _, _) = with_convergence(opts, |scale| {
        let mut e = engine_for(rho, noise, *opts, scale);
        if t > 0.0 {
            e.run_drive(Drive::Hamiltonian(hb.clone()), t, true);
        }
        finish(e)
    })?;
    check_tail(tail, opts, rho.space())?;
    Ok(out)
}

enum Pure {
    Motional(MotionalState),
    Joint(JointState),
}

fn run_pure(seq: &PulseSequence, init: Pure) -> Result<Pure> {
    let mut st = init;
    for seg in &seq.segments {
        st = match (seg.kind, st) {
            (SegmentKind::Free, s) => s,
            (SegmentKind::Displace, Pure::Motional(m)) => {
                let d = Displacement::polar(seg.strength, seg.phase);
                Pure::Motional(MotionalState::from_amps_unnormalized(
                    m.space(),
                    apply_displacement(d, m.amps()),
                )?)
            }
            (SegmentKind::Squeeze, Pure::Motional(m)) => {
                let xi = SqueezeParam::new(seg.strength * seg.duration, seg.phase);
                Pure::Motional(MotionalState::from_amps_unnormalized(
                    m.space(),
                    apply_squeeze(xi, m.amps()),
                )?)
            }
            (SegmentKind::Displace | SegmentKind::Squeeze, Pure::Joint(j)) => {
                let n = j.space().dim();
                let mut blocks = Vec::new();
                for b in 0..2 {
                    let v = j.amps().rows(b * n, n).into_owned();
                    let w = if seg.kind == SegmentKind::Displace {
                        apply_displacement(Displacement::polar(seg.strength, seg.phase), &v)
                    } else {
                        apply_squeeze(
                            SqueezeParam::new(seg.strength * seg.duration, seg.phase),
                            &v,
                        )
                    };
                    blocks.push(w);
                }
                let mut amps = j.amps().clone();
                amps.rows_mut(0, n).copy_from(&blocks[0]);
                amps.rows_mut(n, n).copy_from(&blocks[1]);
                Pure::Joint(JointState::from_amps(j.space(), amps)?)
            }
            (_, s) => {
                let j = match s {
                    Pure::Motional(m) => JointState::down(&m),
                    Pure::Joint(j) => j,
                };
                Pure::Joint(apply_pulse(&seg.as_pulse().expect("spin segment"), &j)?)
            }
        };
        let tail = match &st {
            Pure::Motional(m) => m.tail_mass(),
            Pure::Joint(j) => j.tail_mass(),
        };
        if tail > DEFAULT_TAIL_EPS {
            let dim = match &st {
                Pure::Motional(m) => m.space().dim(),
                Pure::Joint(j) => j.space().dim(),
            };
            return Err(Error::TruncationTail {
                tail,
                eps: DEFAULT_TAIL_EPS,
                dim,
            });
        }
    }
    Ok(st)
}

/// Runs a sequence with noise active during every segment not marked quiet.
/// Pure initial states with no active noise take the unitary path.
pub fn run_sequence(
    seq: &PulseSequence,
    noise: NoiseParams,
    initial: impl Into<InitialState>,
    opts: &EvolveOptions,
) -> Result<SequenceOutput> {
    let initial = initial.into();
    let noiseless = noise.is_zero() || seq.segments.iter().all(|s| !s.noisy);
    match (&initial, noiseless) {
        (InitialState::Motional(m), true) => {
            return pure_output(run_pure(seq, Pure::Motional(m.clone()))?)
        }
        (InitialState::Joint(j), true) => {
            return pure_output(run_pure(seq, Pure::Joint(j.clone()))?)
        }
        _ => {}
    }
    let rho0 = match initial {
        InitialState::Motional(m) => DensityOperator::from_motional(&m),
        InitialState::Joint(j) => DensityOperator::from_joint(&j),
        InitialState::Density(d) => d,
    };
    let (rho, max_tail, steps, step_change) = with_convergence(opts, |scale| {
        let mut e = engine_for(&rho0, noise, *opts, scale);
        for seg in &seq.segments {
            e.run_segment(seg);
        }
        e.materialize();
        finish(e)
    })?;
    check_tail(max_tail, opts, rho.space())?;
    Ok(SequenceOutput {
        rho,
        max_tail,
        step_change,
        steps,
    })
}

/// Unitary path with a density operator as output.
pub fn run_sequence_pure(
    seq: &PulseSequence,
    initial: impl Into<InitialState>,
) -> Result<SequenceOutput> {
    match initial.into() {
        InitialState::Motional(m) => pure_output(run_pure(seq, Pure::Motional(m))?),
        InitialState::Joint(j) => pure_output(run_pure(seq, Pure::Joint(j))?),
        InitialState::Density(_) => Err(Error::InvalidParameter {
            name: "initial",
            reason: "the unitary path needs a pure initial state".into(),
        }),
    }
}

fn pure_output(p: Pure) -> Result<SequenceOutput> {
    let (rho, tail) = match p {
        Pure::Motional(m) => (DensityOperator::from_motional(&m), m.tail_mass()),
        Pure::Joint(j) => (DensityOperator::from_joint(&j), j.tail_mass()),
    };
    Ok(SequenceOutput {
        rho,
        max_tail: tail,
        step_change: 0.0,
        steps: 0,
    })
}
