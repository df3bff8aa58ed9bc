//! Data analysis: Fock populations from blue-sideband Rabi traces, fits of
//! parameterized state models, fringe fits and projection-noise statistics.
//!
//! Weights are binomial. The variance of a measured probability `p̂` from
//! `shots` repetitions is estimated with the add-one rule
//! `p̃ = (p̂·shots + 1)/(shots + 2)`, `var = p̃(1 − p̃)/shots`, which stays finite
//! at `p̂ ∈ {0, 1}`.

use std::f64::consts::PI;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::FockSpace;
use crate::gaussian::{displaced_squeezed_populations, Displacement, SqueezeParam};
use crate::spin_motion::bsb_signal;

pub const FIT_SCHEMA_VERSION: u32 = 1;

/// Blue-sideband Rabi trace: `P↓` at each probe time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiTrace {
    /// Probe times in seconds, strictly increasing.
    pub times: Vec<f64>,
    pub pdown: Vec<f64>,
    pub shots_per_point: u32,
}

#[derive(Debug, Deserialize, Serialize)]
struct TraceRow {
    t_us: f64,
    p_down: f64,
    shots: u32,
}

impl RabiTrace {
    pub fn new(times: Vec<f64>, pdown: Vec<f64>, shots_per_point: u32) -> Result<Self> {
        if times.len() != pdown.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                found: pdown.len(),
            });
        }
        if times.is_empty() {
            return Err(Error::InvalidParameter {
                name: "times",
                reason: "trace is empty".into(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "times",
                reason: "probe times must be finite and strictly increasing".into(),
            });
        }
        if pdown.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter {
                name: "pdown",
                reason: "probabilities must lie in [0, 1]".into(),
            });
        }
        if shots_per_point == 0 {
            return Err(Error::InvalidParameter {
                name: "shots_per_point",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            times,
            pdown,
            shots_per_point,
        })
    }

    /// Parses the `t_us,p_down,shots` CSV form.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t_us", "p_down", "shots"] {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `t_us,p_down,shots`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let (mut times, mut pdown, mut shots) = (Vec::new(), Vec::new(), None);
        for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            match shots {
                None => shots = Some(row.shots),
                Some(s) if s != row.shots => {
                    return Err(Error::Parse {
                        line,
                        message: format!("shots changed from {s} to {} within one trace", row.shots),
                    })
                }
                _ => {}
            }
            times.push(row.t_us * 1e-6);
            pdown.push(row.p_down);
        }
        Self::new(times, pdown, shots.unwrap_or(0))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (t, p) in self.times.iter().zip(&self.pdown) {
            w.serialize(TraceRow {
                t_us: t * 1e6,
                p_down: *p,
                shots: self.shots_per_point,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }

    /// Binomial variance of each point (add-one estimate).
    pub fn variances(&self) -> Vec<f64> {
        self.pdown
            .iter()
            .map(|&p| binomial_variance(p, self.shots_per_point))
            .collect()
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Add-one binomial variance of an observed probability.
pub fn binomial_variance(p: f64, shots: u32) -> f64 {
    let n = shots as f64;
    let pt = (p * n + 1.0) / (n + 2.0);
    pt * (1.0 - pt) / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Unconstrained,
    Coherent,
    Squeezed,
    DisplacedSqueezed,
    Sinusoid,
}

/// Fit output shared by every estimator. `covariance` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub model_tag: ModelTag,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub stderr: Vec<f64>,
    pub covariance: Vec<f64>,
    /// `‖W^{1/2}(y − model)‖`.
    pub residual_norm: f64,
    /// Projected gradient norm at the optimum (KKT residual for population fits).
    pub gradient_norm: f64,
}

impl FitResult {
    fn from_parts(tag: ModelTag, names: &[&str], params: Vec<f64>, cov: &DMatrix<f64>, residual_norm: f64, gradient_norm: f64) -> Self {
        let k = params.len();
        let mut covariance = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                covariance.push(0.5 * (cov[(i, j)] + cov[(j, i)]));
            }
        }
        let stderr = (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        Self {
            schema_version: FIT_SCHEMA_VERSION,
            model_tag: tag,
            param_names: names.iter().map(|s| s.to_string()).collect(),
            params,
            stderr,
            covariance,
            residual_norm,
            gradient_norm,
        }
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i])
    }

    pub fn stderr_of(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.stderr[i])
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.params.len();
        DMatrix::from_row_slice(k, k, &self.covariance)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Inverse of a symmetric positive semidefinite matrix via its eigensystem;
/// null directions get zero variance rather than infinity.
fn psd_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = crate::fock::checked_eigen(a.clone());
    let top = e.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, &l) in e.eigenvalues.iter().enumerate() {
        if l > 1e-14 * top {
            let v = e.eigenvectors.column(k);
            out += (&v * v.transpose()) / l;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Population extraction

/// Lawson–Hanson nonnegative least squares `min ‖Ax − b‖, x ≥ 0`.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-13 * a.norm() * b.norm().max(1.0);
    let grad = |x: &DVector<f64>| a.transpose() * (b - a * x);
    let solve_on = |set: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| set[j]).collect();
        let sub = a.select_columns(&idx);
        let z = sub.svd(true, true).solve(b, 1e-15).expect("svd solve with U and V");
        let mut full = DVector::zeros(n);
        for (k, &j) in idx.iter().enumerate() {
            full[j] = z[k];
        }
        full
    };
    for _ in 0..(3 * n + 10) {
        let w = grad(&x);
        let pick = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]).then(j.cmp(&i)));
        let Some(t) = pick.filter(|&t| w[t] > tol) else {
            break;
        };
        passive[t] = true;
        loop {
            let z = solve_on(&passive);
            if (0..n).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            let mut step = f64::INFINITY;
            for j in (0..n).filter(|&j| passive[j] && z[j] <= 0.0) {
                step = step.min(x[j] / (x[j] - z[j]));
            }
            x += (&z - &x) * step;
            for j in 0..n {
                if passive[j] && x[j] <= 1e-15 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

/// KKT residual of `min ‖Ax − b‖, x ≥ 0`, relative to `‖A‖‖b‖`.
fn kkt_residual(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let w = a.transpose() * (b - a * x);
    let scale = (a.norm() * b.norm()).max(1e-300);
    let mut worst = 0.0_f64;
    for j in 0..x.len() {
        let v = if x[j] > 0.0 { w[j].abs() } else { w[j].max(0.0) };
        worst = worst.max(v);
    }
    worst / scale
}

/// Fock populations `P₀ … P_{nmax}` from a blue-sideband trace without a
/// distributional assumption: weighted nonnegative least squares on
/// `P↓(t) = ½(1 + Σ Pₙ e^{−γ√(n+1) t} cos(Ω√(n+1) t))`.
///
/// `Σ Pₙ ≤ 1` is imposed by the weighting method when the nonnegative
/// solution exceeds it. The reported `gradient_norm` is the KKT residual.
pub fn extract_populations(trace: &RabiTrace, omega: f64, gamma: f64, nmax: usize) -> Result<FitResult> {
    if !(omega > 0.0) || !(gamma >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "omega",
            reason: format!("need Ω > 0 and γ ≥ 0, got Ω = {omega}, γ = {gamma}"),
        });
    }
    let k = nmax + 1;
    let max_step = trace
        .times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(trace.times[0].abs(), f64::max);
    let limit = PI / (omega * (k as f64).sqrt());
    if max_step >= limit {
        return Err(Error::Nyquist { max_step, limit });
    }
    let m = trace.times.len();
    let sw: Vec<f64> = trace.variances().iter().map(|v| 1.0 / v.sqrt()).collect();
    let a = DMatrix::from_fn(m, k, |i, n| {
        let s = ((n + 1) as f64).sqrt();
        let t = trace.times[i];
        sw[i] * 0.5 * (-gamma * s * t).exp() * (omega * s * t).cos()
    });
    let b = DVector::from_fn(m, |i, _| sw[i] * (trace.pdown[i] - 0.5));
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = if m < k { 0.0 } else { sv.iter().cloned().fold(f64::INFINITY, f64::min) };
    if smin <= 1e-10 * smax {
        return Err(Error::DegenerateDesign(if smin > 0.0 { smax / smin } else { f64::INFINITY }));
    }
    let mut x = nnls(&a, &b);
    let (mut aa, mut bb) = (a.clone(), b.clone());
    if x.sum() > 1.0 + 1e-12 {
        let big = 1e6 * smax;
        aa = a.clone().insert_row(m, big);
        bb = b.clone().insert_row(m, big);
        x = nnls(&aa, &bb);
    }
    let kkt = kkt_residual(&aa, &bb, &x);
    let resid = (&b - &a * &x).norm();
    let free: Vec<usize> = (0..k).filter(|&j| x[j] > 0.0).collect();
    let mut cov = DMatrix::zeros(k, k);
    if !free.is_empty() {
        let af = a.select_columns(&free);
        let c = psd_inverse(&(af.transpose() * &af));
        for (p, &i) in free.iter().enumerate() {
            for (q, &j) in free.iter().enumerate() {
                cov[(i, j)] = c[(p, q)];
            }
        }
    }
    let names: Vec<String> = (0..k).map(|n| format!("p{n}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(FitResult::from_parts(ModelTag::Unconstrained, &name_refs, x.iter().copied().collect(), &cov, resid, kkt))
}

// ---------------------------------------------------------------------------
// Parameterized state models

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateModel {
    Coherent,
    Squeezed,
    DisplacedSqueezed,
}

impl StateModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coherent" => Ok(Self::Coherent),
            "squeezed" => Ok(Self::Squeezed),
            "displaced_squeezed" | "displaced-squeezed" => Ok(Self::DisplacedSqueezed),
            other => Err(Error::InvalidParameter {
                name: "model",
                reason: format!("unknown model `{other}` (coherent, squeezed, displaced_squeezed)"),
            }),
        }
    }

    pub fn tag(self) -> ModelTag {
        match self {
            Self::Coherent => ModelTag::Coherent,
            Self::Squeezed => ModelTag::Squeezed,
            Self::DisplacedSqueezed => ModelTag::DisplacedSqueezed,
        }
    }

    /// Parameter order; the state parameters come first, then `omega`
    /// (rad/s) and `gamma` (1/s).
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Self::Coherent => &["alpha", "omega", "gamma"],
            Self::Squeezed => &["r", "omega", "gamma"],
            Self::DisplacedSqueezed => &["alpha", "r", "theta", "omega", "gamma"],
        }
    }

    fn state_params(self) -> usize {
        self.param_names().len() - 2
    }

    /// `(α, r, θ)` of `D(α) S(r e^{iθ})|0⟩` for a parameter vector.
    fn state_of(self, p: &[f64]) -> (f64, f64, f64) {
        match self {
            Self::Coherent => (p[0], 0.0, 0.0),
            Self::Squeezed => (0.0, p[0], 0.0),
            Self::DisplacedSqueezed => (p[0], p[1], p[2]),
        }
    }
}

/// Number of Fock levels carrying all but 1e-12 of the population.
fn model_support(alpha: f64, r: f64) -> usize {
    let d = Displacement::real(alpha);
    let xi = SqueezeParam::new(r, 0.0);
    let mut n = FockSpace::default_for(alpha, r).dim();
    while n < 1 << 14 {
        let total: f64 = displaced_squeezed_populations(d, xi, n).iter().sum();
        if 1.0 - total < 1e-12 {
            break;
        }
        n *= 2;
    }
    n
}

fn populations(model: StateModel, p: &[f64], nmax: usize) -> Vec<f64> {
    let (alpha, r, theta) = model.state_of(p);
    displaced_squeezed_populations(Displacement::real(alpha), SqueezeParam::new(r, theta), nmax)
}

/// `∂Pₙ/∂(state parameter)` for each state parameter. Coherent and squeezed
/// populations are differentiated in closed form; the displaced-squeezed
/// family uses central differences.
fn population_derivatives(model: StateModel, p: &[f64], nmax: usize) -> Vec<Vec<f64>> {
    match model {
        StateModel::Coherent => {
            let a = p[0];
            let pops = populations(model, p, nmax);
            let d = (0..nmax)
                .map(|n| {
                    let lead = if n == 0 || a == 0.0 {
                        0.0
                    } else {
                        let nf = n as f64;
                        ((2.0 * nf).ln() + (2.0 * nf - 1.0) * a.ln() - crate::fock::ln_factorial(n) - a * a).exp()
                    };
                    lead - 2.0 * a * pops[n]
                })
                .collect();
            vec![d]
        }
        StateModel::Squeezed => {
            let r = p[0];
            let pops = populations(model, p, nmax);
            let d = (0..nmax)
                .map(|n| {
                    if r == 0.0 || pops[n] == 0.0 {
                        0.0
                    } else {
                        pops[n] * (n as f64 / (r.sinh() * r.cosh()) - r.tanh())
                    }
                })
                .collect();
            vec![d]
        }
        StateModel::DisplacedSqueezed => (0..3)
            .map(|k| {
                let h = 1e-6 * p[k].abs().max(1.0);
                let mut up = p.to_vec();
                let mut dn = p.to_vec();
                up[k] += h;
                dn[k] -= h;
                if k < 2 && dn[k] < 0.0 {
                    dn[k] = p[k];
                    let step = up[k] - dn[k];
                    let (pu, pd) = (populations(model, &up, nmax), populations(model, &dn, nmax));
                    return pu.iter().zip(&pd).map(|(u, d)| (u - d) / step).collect();
                }
                let (pu, pd) = (populations(model, &up, nmax), populations(model, &dn, nmax));
                pu.iter().zip(&pd).map(|(u, d)| (u - d) / (2.0 * h)).collect()
            })
            .collect(),
    }
}

/// Model `P↓(t)` for a parameter vector.
pub fn model_pdown(model: StateModel, params: &[f64], times: &[f64]) -> Vec<f64> {
    let (alpha, r, _) = model.state_of(params);
    let k = params.len();
    let nmax = model_support(alpha, r);
    bsb_signal(&populations(model, params, nmax), params[k - 2], params[k - 1], times)
}

/// Jacobian `∂P↓(tᵢ)/∂pⱼ`: exact in `Ω` and `γ`, via
/// [`population_derivatives`] for the state parameters.
pub fn model_jacobian(model: StateModel, params: &[f64], times: &[f64]) -> DMatrix<f64> {
    let (alpha, r, _) = model.state_of(params);
    let k = params.len();
    let (omega, gamma) = (params[k - 2], params[k - 1]);
    let nmax = model_support(alpha, r);
    let pops = populations(model, params, nmax);
    let dpops = population_derivatives(model, params, nmax);
    let ns = model.state_params();
    let mut j = DMatrix::zeros(times.len(), k);
    for (i, &t) in times.iter().enumerate() {
        for n in 0..nmax {
            let s = ((n + 1) as f64).sqrt();
            let decay = (-gamma * s * t).exp();
            let (sin, cos) = (omega * s * t).sin_cos();
            for (q, dp) in dpops.iter().enumerate().take(ns) {
                j[(i, q)] += 0.5 * dp[n] * decay * cos;
            }
            j[(i, k - 2)] -= 0.5 * pops[n] * decay * s * t * sin;
            j[(i, k - 1)] -= 0.5 * pops[n] * decay * s * t * cos;
        }
    }
    j
}

/// Largest relative disagreement between [`model_jacobian`] and a central
/// finite-difference Jacobian of [`model_pdown`].
pub fn jacobian_consistency(model: StateModel, params: &[f64], times: &[f64]) -> f64 {
    let analytic = model_jacobian(model, params, times);
    let mut worst = 0.0_f64;
    for q in 0..params.len() {
        let h = 1e-6 * params[q].abs().max(1e-3);
        let mut up = params.to_vec();
        let mut dn = params.to_vec();
        up[q] += h;
        dn[q] -= h;
        let (fu, fd) = (model_pdown(model, &up, times), model_pdown(model, &dn, times));
        let col = analytic.column(q);
        let scale = col.amax().max(1e-12);
        for i in 0..times.len() {
            let fd_val = (fu[i] - fd[i]) / (2.0 * h);
            worst = worst.max((fd_val - col[i]).abs() / scale);
        }
    }
    worst
}

/// Starting values and fit controls for [`fit_state_model`]. Missing state
/// parameters are seeded from a coarse grid scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FitInit {
    pub alpha: Option<f64>,
    pub r: Option<f64>,
    pub theta: Option<f64>,
    pub omega: f64,
    pub gamma: f64,
    /// Hold `Ω` at its initial value (a calibrated Rabi rate).
    pub fix_omega: bool,
    /// Hold `γ` at its initial value.
    pub fix_gamma: bool,
}

impl FitInit {
    pub fn new(omega: f64, gamma: f64) -> Self {
        Self {
            alpha: None,
            r: None,
            theta: None,
            omega,
            gamma,
            fix_omega: false,
            fix_gamma: false,
        }
    }

    /// Fills from `name=value` pairs (`alpha`, `r`, `theta`, `omega`, `gamma`).
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "alpha" => self.alpha = Some(value),
            "r" => self.r = Some(value),
            "theta" => self.theta = Some(value),
            "omega" => self.omega = value,
            "gamma" => self.gamma = value,
            _ => {
                return Err(Error::InvalidParameter {
                    name: "init",
                    reason: format!("unknown parameter `{name}`"),
                })
            }
        }
        Ok(())
    }
}

/// Search box for the state fits. The upper edges and the `Ω` window are
/// artificial and a solution on them raises [`Error::ParameterAtBound`]; the
/// zero floors of `α`, `r` and `γ` are physical.
#[derive(Debug, Clone, Copy)]
struct Bounds {
    lower: [f64; 5],
    upper: [f64; 5],
}

const ALPHA_MAX: f64 = 10.0;
const R_MAX: f64 = 3.5;
const OMEGA_WINDOW: (f64, f64) = (0.5, 2.0);
const MIN_STARTS: usize = 6;

fn bounds(model: StateModel, omega0: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let b = Bounds {
        lower: [0.0, 0.0, f64::NEG_INFINITY, OMEGA_WINDOW.0 * omega0, 0.0],
        upper: [ALPHA_MAX, R_MAX, f64::INFINITY, OMEGA_WINDOW.1 * omega0, omega0],
    };
    // indices into the five-slot layout (alpha, r, theta, omega, gamma)
    let slots: &[usize] = match model {
        StateModel::Coherent => &[0, 3, 4],
        StateModel::Squeezed => &[1, 3, 4],
        StateModel::DisplacedSqueezed => &[0, 1, 2, 3, 4],
    };
    let lo = slots.iter().map(|&s| b.lower[s]).collect();
    let hi = slots.iter().map(|&s| b.upper[s]).collect();
    // lower edges that are artificial (only the Ω window)
    let artificial_lo = slots.iter().map(|&s| s == 3).collect();
    (lo, hi, artificial_lo)
}

struct Problem<'a> {
    model: StateModel,
    times: &'a [f64],
    y: &'a [f64],
    sw: Vec<f64>,
    scale: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Problem<'_> {
    fn unscale(&self, q: &DVector<f64>) -> Vec<f64> {
        q.iter().zip(&self.scale).map(|(a, s)| a * s).collect()
    }

    fn project(&self, q: &mut DVector<f64>) {
        for i in 0..q.len() {
            q[i] = q[i].clamp(self.lo[i] / self.scale[i], self.hi[i] / self.scale[i]);
        }
    }

    fn residuals(&self, q: &DVector<f64>) -> DVector<f64> {
        let f = model_pdown(self.model, &self.unscale(q), self.times);
        DVector::from_fn(self.y.len(), |i, _| self.sw[i] * (self.y[i] - f[i]))
    }

    /// Jacobian of the residuals in scaled coordinates.
    fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut j = model_jacobian(self.model, &self.unscale(q), self.times);
        for c in 0..j.ncols() {
            // a pinned parameter contributes no search direction
            let pinned = self.lo[c] == self.hi[c];
            for r in 0..j.nrows() {
                j[(r, c)] *= if pinned { 0.0 } else { -self.sw[r] * self.scale[c] };
            }
        }
        j
    }

    /// Gradient of `½‖res‖²` with components that push against an active
    /// bound removed.
    fn projected_gradient(&self, q: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(q.len(), |i, _| {
            let at_lo = q[i] <= self.lo[i] / self.scale[i];
            let at_hi = q[i] >= self.hi[i] / self.scale[i];
            if (at_lo && g[i] > 0.0) || (at_hi && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
    }
}

struct LmOutcome {
    q: DVector<f64>,
    cost: f64,
    grad_norm: f64,
    res_norm: f64,
    converged: bool,
}

fn levenberg_marquardt(prob: &Problem, start: DVector<f64>) -> LmOutcome {
    let mut q = start;
    prob.project(&mut q);
    let mut res = prob.residuals(&q);
    let mut cost = 0.5 * res.norm_squared();
    let mut jac = prob.jacobian(&q);
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut stalled = 0;
    for _ in 0..500 {
        let g = jac.transpose() * &res;
        let pg = prob.projected_gradient(&q, &g);
        if pg.norm() < 1e-6 * (1.0 + res.norm()) {
            return LmOutcome {
                grad_norm: pg.norm(),
                res_norm: res.norm(),
                q,
                cost,
                converged: true,
            };
        }
        // coordinates held on a bound by the gradient are frozen for this step
        let mut a = jac.transpose() * &jac;
        let mut rhs = -&g;
        for i in 0..a.nrows() {
            if pg[i] == 0.0 && g[i] != 0.0 {
                a.row_mut(i).fill(0.0);
                a.column_mut(i).fill(0.0);
                rhs[i] = 0.0;
            }
        }
        let mut damped = a.clone();
        for i in 0..a.nrows() {
            damped[(i, i)] += lambda * a[(i, i)].max(1e-12);
        }
        let Some(delta) = damped.clone().cholesky().map(|c| c.solve(&rhs)) else {
            lambda *= nu;
            nu *= 2.0;
            continue;
        };
        let mut trial = &q + &delta;
        prob.project(&mut trial);
        let step = &trial - &q;
        let res_t = prob.residuals(&trial);
        let cost_t = 0.5 * res_t.norm_squared();
        let predicted = -(g.dot(&step) + 0.5 * step.dot(&(&a * &step)));
        if cost_t < cost {
            let rho = if predicted > 0.0 { (cost - cost_t) / predicted } else { 1.0 };
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            let tiny = cost - cost_t <= 1e-15 * cost;
            q = trial;
            res = res_t;
            cost = cost_t;
            jac = prob.jacobian(&q);
            stalled = if tiny { stalled + 1 } else { 0 };
        } else {
            lambda *= nu;
            nu *= 2.0;
            stalled += 1;
        }
        if stalled > 30 || lambda > 1e16 {
            break;
        }
    }
    let g = jac.transpose() * &res;
    let pg = prob.projected_gradient(&q, &g);
    LmOutcome {
        grad_norm: pg.norm(),
        res_norm: res.norm(),
        converged: pg.norm() < 1e-6 * (1.0 + res.norm()),
        q,
        cost,
    }
}

/// Coarse scan of the state parameters with `Ω`, `γ` held at their initial
/// values; returns the best grid point.
fn grid_seed(model: StateModel, init: &FitInit, trace: &RabiTrace, sw: &[f64]) -> Vec<f64> {
    let alphas: Vec<f64> = match init.alpha {
        Some(a) => vec![a],
        None => (0..=40).map(|k| 0.1 * k as f64).collect(),
    };
    let rs: Vec<f64> = match init.r {
        Some(r) => vec![r],
        None => (0..=30).map(|k| 0.1 * k as f64).collect(),
    };
    let thetas: Vec<f64> = match init.theta {
        Some(t) => vec![t],
        None => (0..8).map(|k| -PI + PI / 4.0 * k as f64).collect(),
    };
    let mut cands: Vec<Vec<f64>> = Vec::new();
    match model {
        StateModel::Coherent => alphas.iter().for_each(|&a| cands.push(vec![a, init.omega, init.gamma])),
        StateModel::Squeezed => rs.iter().for_each(|&r| cands.push(vec![r, init.omega, init.gamma])),
        StateModel::DisplacedSqueezed => {
            for &a in &alphas {
                for &r in &rs {
                    for &t in &thetas {
                        cands.push(vec![a, r, t, init.omega, init.gamma]);
                    }
                }
            }
        }
    }
    let cost = |p: &Vec<f64>| -> f64 {
        let f = model_pdown(model, p, &trace.times);
        f.iter()
            .zip(&trace.pdown)
            .zip(sw)
            .map(|((m, y), w)| (w * (y - m)).powi(2))
            .sum()
    };
    let mut best = cands[0].clone();
    let mut best_cost = f64::INFINITY;
    for c in cands {
        let v = cost(&c);
        if v < best_cost {
            best_cost = v;
            best = c;
        }
    }
    best
}

/// Weighted Levenberg–Marquardt fit of a parameterized Fock distribution to a
/// blue-sideband trace, with `Ω` and `γ` as shared nuisance parameters.
///
/// At least six deterministic starts are run (the seed, `Ω` scaled by
/// 0.9/1.1/0.95, and the state parameters scaled by 0.8/1.2); the lowest cost
/// among converged starts wins, ties going to the earlier start.
pub fn fit_state_model(trace: &RabiTrace, model: StateModel, init: &FitInit) -> Result<FitResult> {
    if !(init.omega > 0.0) || !(init.gamma >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "omega",
            reason: format!("initial Ω must be > 0 and γ ≥ 0, got {} and {}", init.omega, init.gamma),
        });
    }
    let k = model.param_names().len();
    if trace.times.len() <= k {
        return Err(Error::DegenerateDesign(f64::INFINITY));
    }
    let sw: Vec<f64> = trace.variances().iter().map(|v| 1.0 / v.sqrt()).collect();
    let seed = grid_seed(model, init, trace, &sw);
    let (mut lo, mut hi, artificial_lo) = bounds(model, init.omega);
    let mut fixed = vec![false; k];
    for (i, on, v) in [(k - 2, init.fix_omega, init.omega), (k - 1, init.fix_gamma, init.gamma)] {
        if on {
            lo[i] = v;
            hi[i] = v;
            fixed[i] = true;
        }
    }
    let mut scale = vec![1.0; k];
    scale[k - 2] = init.omega;
    scale[k - 1] = 0.01 * init.omega;
    let prob = Problem {
        model,
        times: &trace.times,
        y: &trace.pdown,
        sw,
        scale,
        lo: lo.clone(),
        hi: hi.clone(),
    };
    let ns = model.state_params();
    let factors: [(f64, f64); MIN_STARTS] = [(1.0, 1.0), (0.9, 1.0), (1.1, 1.0), (1.0, 0.8), (1.0, 1.2), (0.95, 1.05)];
    let mut best: Option<LmOutcome> = None;
    for (fo, fs) in factors {
        let mut p = seed.clone();
        p[k - 2] *= fo;
        for v in p.iter_mut().take(ns.min(2)) {
            *v *= fs;
        }
        let start = DVector::from_fn(k, |i, _| p[i] / prob.scale[i]);
        let out = levenberg_marquardt(&prob, start);
        if !out.converged {
            continue;
        }
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    let Some(best) = best else {
        return Err(Error::NoConvergence { starts: MIN_STARTS });
    };
    let mut params = prob.unscale(&best.q);
    for i in (0..k).filter(|&i| !fixed[i]) {
        let span = 1e-9 * prob.scale[i];
        let at_hi = hi[i].is_finite() && params[i] >= hi[i] - span;
        let at_lo = artificial_lo[i] && params[i] <= lo[i] + span;
        if at_hi || at_lo {
            return Err(Error::ParameterAtBound {
                name: model.param_names()[i].to_string(),
                value: params[i],
            });
        }
    }
    if model == StateModel::DisplacedSqueezed {
        params[2] = wrap_angle(params[2]);
    }
    let mut j = model_jacobian(model, &params, &trace.times);
    for r in 0..j.nrows() {
        for c in 0..k {
            j[(r, c)] *= prob.sw[r];
        }
    }
    let free: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
    let jf = j.select_columns(&free);
    let cf = psd_inverse(&(jf.transpose() * &jf));
    let mut cov = DMatrix::zeros(k, k);
    for (a, &i) in free.iter().enumerate() {
        for (b, &jj) in free.iter().enumerate() {
            cov[(i, jj)] = cf[(a, b)];
        }
    }
    Ok(FitResult::from_parts(model.tag(), model.param_names(), params, &cov, best.res_norm, best.grad_norm))
}

fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

// ---------------------------------------------------------------------------
// Fringes and noise

/// Weighted linear fit of `b + a cos φ`. The reported half-contrast is `|a|`;
/// a fringe `½ − A cos φ` gives `a = −A`. Phases that coincide modulo 2π are
/// distinct inputs but leave the design rank-deficient.
pub fn fit_sinusoid(phis: &[f64], pdown: &[f64], shots: u32) -> Result<FitResult> {
    if phis.len() != pdown.len() {
        return Err(Error::DimensionMismatch {
            expected: phis.len(),
            found: pdown.len(),
        });
    }
    if shots == 0 {
        return Err(Error::InvalidParameter {
            name: "shots",
            reason: "must be positive".into(),
        });
    }
    let mut distinct = phis.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if distinct.len() < 3 {
        return Err(Error::InvalidParameter {
            name: "phis",
            reason: format!("need at least 3 distinct phases, got {}", distinct.len()),
        });
    }
    let m = phis.len();
    let sw: Vec<f64> = pdown.iter().map(|&p| 1.0 / binomial_variance(p, shots).sqrt()).collect();
    let x = DMatrix::from_fn(m, 2, |i, c| sw[i] * if c == 0 { 1.0 } else { phis[i].cos() });
    let y = DVector::from_fn(m, |i, _| sw[i] * pdown[i]);
    let xtx = x.transpose() * &x;
    let det = xtx[(0, 0)] * xtx[(1, 1)] - xtx[(0, 1)] * xtx[(1, 0)];
    if det <= 1e-12 * xtx[(0, 0)] * xtx[(1, 1)] {
        return Err(Error::DegenerateDesign(f64::INFINITY));
    }
    let cov = xtx.clone().try_inverse().expect("nonsingular 2x2");
    let beta = &cov * (x.transpose() * &y);
    let resid = (&y - &x * &beta).norm();
    Ok(FitResult::from_parts(ModelTag::Sinusoid, &["b", "a"], vec![beta[0], beta[1]], &cov, resid, 0.0))
}

/// Projection-noise standard deviation of one probability estimate.
pub fn projection_sigma(p: f64, shots: u32) -> f64 {
    (p * (1.0 - p) / shots as f64).sqrt()
}

/// `C = pmax − pmin` and its projection-noise standard deviation.
pub fn contrast_and_noise(pmax: f64, pmin: f64, shots: u32) -> (f64, f64) {
    let s = projection_sigma(pmax, shots).hypot(projection_sigma(pmin, shots));
    (pmax - pmin, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub s_amp: f64,
    pub s_ref: f64,
    pub enhancement_db: f64,
}

/// SNR `s = C/σ(C)` of two contrasts measured on fringes centred at ½, and the
/// contrast-gain bound `20 log₁₀(C_amp/C_ref)` on the sensitivity enhancement.
pub fn snr_and_enhancement(c_amp: f64, c_ref: f64, shots: u32) -> Result<Snr> {
    if c_ref == 0.0 {
        return Err(Error::ZeroReference);
    }
    let snr = |c: f64| {
        let (cc, s) = contrast_and_noise(0.5 + c / 2.0, 0.5 - c / 2.0, shots);
        if s > 0.0 {
            cc / s
        } else {
            f64::INFINITY
        }
    };
    Ok(Snr {
        s_amp: snr(c_amp),
        s_ref: snr(c_ref),
        enhancement_db: 20.0 * (c_amp / c_ref).abs().log10(),
    })
}

pub const HBAR: f64 = 1.054_571_817e-34;
pub const AMU: f64 = 1.660_539_066_60e-27;

/// Ground-state extent `x₀ = √(ħ/(2mω))` in metres.
pub fn zero_point_extent(mass_amu: f64, omega_r: f64) -> f64 {
    (HBAR / (2.0 * mass_amu * AMU * omega_r)).sqrt()
}

/// Physical displacement `2 x₀ |α|` in metres.
pub fn alpha_to_length(alpha_abs: f64, mass_amu: f64, omega_r: f64) -> f64 {
    2.0 * zero_point_extent(mass_amu, omega_r) * alpha_abs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::C64;
    use crate::gaussian::{coherent_amplitudes, squeezed_vacuum_amplitudes};
    use std::f64::consts::TAU;

    const OMEGA: f64 = TAU * 1.1e3;

    fn times(n: usize, step: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * step).collect()
    }

    fn trace_for(model: StateModel, p: &[f64], ts: &[f64]) -> RabiTrace {
        RabiTrace::new(ts.to_vec(), model_pdown(model, p, ts), 300).unwrap()
    }

    #[test]
    fn trace_csv_roundtrip_and_errors() {
        let t = RabiTrace::new(vec![0.0, 1e-5, 2e-5], vec![1.0, 0.6, 0.25], 100).unwrap();
        let back = RabiTrace::from_csv(t.to_csv().as_bytes()).unwrap();
        assert_eq!(back.pdown, t.pdown);
        assert!(back.times.iter().zip(&t.times).all(|(a, b)| (a - b).abs() < 1e-18));
        assert!(matches!(RabiTrace::from_csv("t,p\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            RabiTrace::from_csv("t_us,p_down,shots\n0,0.5,10\n1,x,10\n".as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(RabiTrace::new(vec![0.0, 0.0], vec![0.5, 0.5], 1).is_err());
    }

    #[test]
    fn nnls_recovers_ground_state() {
        let ts = times(60, 10e-6);
        let tr = RabiTrace::new(ts.clone(), bsb_signal(&[1.0], OMEGA, 0.0, &ts), 300).unwrap();
        let fit = extract_populations(&tr, OMEGA, 0.0, 6).unwrap();
        assert!((fit.params[0] - 1.0).abs() < 1e-6);
        assert!(fit.gradient_norm < 1e-8);
    }

    #[test]
    fn nnls_recovers_coherent_populations() {
        let ts = times(120, 8e-6);
        let pops: Vec<f64> = coherent_amplitudes(C64::new(0.5, 0.0), 10).iter().map(|a| a.norm_sqr()).collect();
        let tr = RabiTrace::new(ts.clone(), bsb_signal(&pops, OMEGA, 0.0, &ts), 300).unwrap();
        let fit = extract_populations(&tr, OMEGA, 0.0, 9).unwrap();
        for n in 0..10 {
            assert!((fit.params[n] - pops[n]).abs() < 1e-4, "n = {n}");
        }
        assert!(fit.residual_norm < 1e-8);
    }

    #[test]
    fn nnls_errors() {
        let ts = times(40, 200e-6);
        let tr = RabiTrace::new(ts.clone(), bsb_signal(&[1.0], OMEGA, 0.0, &ts), 300).unwrap();
        assert!(matches!(extract_populations(&tr, OMEGA, 0.0, 10), Err(Error::Nyquist { .. })));
        let ts = times(3, 5e-6);
        let tr = RabiTrace::new(ts.clone(), bsb_signal(&[1.0], OMEGA, 0.0, &ts), 300).unwrap();
        assert!(matches!(extract_populations(&tr, OMEGA, 0.0, 8), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn squeezed_population_derivative_matches_difference() {
        let p = [1.3, OMEGA, 50.0];
        let d = population_derivatives(StateModel::Squeezed, &p, 40);
        let up: Vec<f64> = squeezed_vacuum_amplitudes(SqueezeParam::new(1.3 + 1e-6, 0.0), 40).iter().map(|a| a.norm_sqr()).collect();
        let dn: Vec<f64> = squeezed_vacuum_amplitudes(SqueezeParam::new(1.3 - 1e-6, 0.0), 40).iter().map(|a| a.norm_sqr()).collect();
        for n in 0..40 {
            assert!((d[0][n] - (up[n] - dn[n]) / 2e-6).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobians_agree_with_finite_differences() {
        let ts = times(50, 15e-6);
        for (model, p) in [
            (StateModel::Coherent, vec![0.7, OMEGA, 80.0]),
            (StateModel::Squeezed, vec![0.9, OMEGA, 80.0]),
            (StateModel::DisplacedSqueezed, vec![0.6, 0.5, 0.4, OMEGA, 80.0]),
        ] {
            let d = jacobian_consistency(model, &p, &ts);
            assert!(d < 1e-5, "{model:?}: {d:e}");
        }
    }

    #[test]
    fn coherent_round_trip() {
        let ts = times(100, 10e-6);
        let truth = [0.2, OMEGA, 0.0];
        let tr = trace_for(StateModel::Coherent, &truth, &ts);
        let mut init = FitInit::new(OMEGA * 1.05, 30.0);
        init.alpha = Some(0.24);
        let fit = fit_state_model(&tr, StateModel::Coherent, &init).unwrap();
        assert!((fit.get("alpha").unwrap() - 0.2).abs() < 1e-4);
        assert!((fit.get("omega").unwrap() / OMEGA - 1.0).abs() < 1e-6);
        assert_eq!(fit.model_tag, ModelTag::Coherent);
        let back = FitResult::from_json(&fit.to_json()).unwrap();
        assert_eq!(back, fit);
    }

    #[test]
    fn sinusoid_exact_and_degenerate() {
        let phis: Vec<f64> = (0..8).map(|k| k as f64 * TAU / 8.0).collect();
        let y: Vec<f64> = phis.iter().map(|p| 0.5 - 0.055 * p.cos()).collect();
        let fit = fit_sinusoid(&phis, &y, 100).unwrap();
        assert!((fit.get("b").unwrap() - 0.5).abs() < 1e-12);
        assert!((fit.get("a").unwrap() + 0.055).abs() < 1e-12);
        let flat = fit_sinusoid(&phis, &[0.5; 8], 100).unwrap();
        assert!(flat.get("a").unwrap().abs() < 1e-12);
        assert!(fit_sinusoid(&[0.0, 0.0, 0.0], &[0.5; 3], 100).is_err());
        assert!(matches!(fit_sinusoid(&[1.0, -1.0, 1.0 + TAU], &[0.5; 3], 100), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn noise_arithmetic() {
        let (c, s) = contrast_and_noise(0.5, 0.5, 100);
        assert_eq!(c, 0.0);
        assert!((s - (2.0f64 * 0.0025).sqrt()).abs() < 1e-12);
        assert_eq!(contrast_and_noise(1.0, 0.0, 100), (1.0, 0.0));
        let snr = snr_and_enhancement(0.0698, 0.0698, 100).unwrap();
        assert!((snr.s_amp - 1.0).abs() < 0.02);
        assert_eq!(snr.enhancement_db, 0.0);
        assert!((snr_and_enhancement(7.5, 1.0, 100).unwrap().enhancement_db - 17.50).abs() < 0.005);
        assert!((snr_and_enhancement(9.17, 1.0, 100).unwrap().enhancement_db - 19.25).abs() < 0.005);
        assert!(matches!(snr_and_enhancement(0.1, 0.0, 100), Err(Error::ZeroReference)));
    }

    #[test]
    fn lengths() {
        let x0 = zero_point_extent(25.0, TAU * 6.3e6);
        assert!((x0 * 1e9 - 5.66).abs() < 0.05);
        let bohr = alpha_to_length(0.00465, 25.0, TAU * 6.3e6);
        assert!((bohr / 0.0529e-9 - 1.0).abs() < 0.01);
        let vac = alpha_to_length(0.5, 25.0, TAU * 6.3e6);
        assert!((vac - x0).abs() < 1e-15);
        assert!((vac / bohr - 108.0).abs() < 1.0);
    }
}
