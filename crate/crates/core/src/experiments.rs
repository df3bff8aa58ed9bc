//! Scripted sweeps: configuration, seeded projection-noise sampling and the
//! experiment pipelines whose tables the CLI writes.
//!
//! Every stochastic draw comes from a ChaCha20 stream keyed by
//! `(seed, experiment, point index)`, so a point's samples do not depend on
//! the order in which the sweep is evaluated.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::drive::{simulate_full_vs_rwa_converged, DriveParams};
use crate::error::{Error, Result};
use crate::fit::{
    fit_sinusoid, fit_state_model, snr_and_enhancement, contrast_and_noise, FitInit, RabiTrace,
    StateModel,
};
use crate::fock::{DensityOperator, FockSpace, MotionalState, C64};
use crate::gaussian::{amplify_displacement, squeeze_db, SqueezeParam};
use crate::open_system::{
    run_sequence, run_sequence_pure, EvolveOptions, NoiseParams, PulseSequence, Segment,
    SegmentKind,
};
use crate::spin_motion::{
    bsb_signal, direct_rsb_pdown, f_alpha_auto, psrsb_lock_phase, Fringe, JointState, PulseKind,
    SidebandPulse,
};

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

/// How measured probabilities are produced from exact ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Binomial draws at the configured shot count.
    Binomial,
    /// Exact probabilities, as in the infinite-shot limit.
    Exact,
}

/// Flat `key = value` configuration. Units are part of the key names.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub g_khz: f64,
    pub omega_r_mhz: f64,
    pub omega_sb_khz: f64,
    pub heating_rate_per_s: f64,
    pub dephasing_rate_per_s: f64,
    pub noise: bool,
    pub noise_during_displace: bool,
    pub noise_during_readout: bool,
    /// Fock dimension for unitary runs; 0 picks one from the squeeze and displacement.
    pub truncation: usize,
    /// Fock dimension of the co-squeezed-frame density matrix in noisy runs.
    pub noisy_truncation: usize,
    pub noisy_tail_eps: f64,
    pub frame_dt_ns: f64,
    pub sampling: Sampling,
    pub shots: u32,
    pub trace_shots: u32,
    pub trace_points: usize,
    pub trace_step_us: f64,
    pub bsb_gamma_per_s: f64,
    /// Fit the sideband Rabi rate as a free nuisance parameter instead of
    /// holding it at the calibrated `omega_sb_khz`.
    pub fit_free_omega: bool,
    pub displace_us: f64,
    pub theta_rad: f64,
    pub beatnote_rad: f64,
    pub alpha: f64,
    pub gain_us: Vec<f64>,
    pub scan_alpha: f64,
    pub scan_us: f64,
    pub phi_points: usize,
    pub theta_points: usize,
    pub alphas: Vec<f64>,
    pub contrast_us: Vec<f64>,
    pub sensitivity_alphas: Vec<f64>,
    pub sensitivity_us: Vec<f64>,
    pub slope_threshold: f64,
    pub unitarity_us: Vec<f64>,
    pub background: f64,
    pub rwa_ratios: Vec<f64>,
    pub rwa_gt: f64,
    pub rwa_truncation: usize,
    pub rwa_steps_per_period: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            g_khz: 50.2,
            omega_r_mhz: 6.3,
            omega_sb_khz: 1.1,
            heating_rate_per_s: 20.0,
            dephasing_rate_per_s: 18.0,
            noise: true,
            noise_during_displace: true,
            noise_during_readout: true,
            truncation: 0,
            noisy_truncation: 64,
            noisy_tail_eps: 5e-2,
            frame_dt_ns: 5.0,
            sampling: Sampling::Binomial,
            shots: 100,
            trace_shots: 300,
            trace_points: 120,
            trace_step_us: 5.0,
            bsb_gamma_per_s: 0.0,
            fit_free_omega: false,
            displace_us: 5.0,
            theta_rad: 0.0,
            beatnote_rad: 0.0,
            alpha: 0.2,
            gain_us: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            scan_alpha: 0.055,
            scan_us: 0.0,
            phi_points: 16,
            theta_points: 16,
            alphas: (1..=10).map(|k| 0.002 * k as f64).collect(),
            contrast_us: vec![0.0, 8.0],
            sensitivity_alphas: vec![0.002, 0.004, 0.006],
            sensitivity_us: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            slope_threshold: 0.25,
            unitarity_us: vec![0.0, 2.0, 4.0, 6.0, 7.5],
            background: 0.02,
            rwa_ratios: vec![0.008, 0.05, 0.2],
            rwa_gt: 0.63,
            rwa_truncation: 48,
            rwa_steps_per_period: 64,
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn config_err(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| config_err(line, key, format!("expected a number, got `{v}`")))
}

fn parse_nonneg(line: usize, key: &str, v: &str) -> Result<f64> {
    let x = parse_f64(line, key, v)?;
    if x < 0.0 {
        return Err(config_err(line, key, format!("must be ≥ 0, got {x}")));
    }
    Ok(x)
}

fn parse_positive(line: usize, key: &str, v: &str) -> Result<f64> {
    let x = parse_f64(line, key, v)?;
    if x <= 0.0 {
        return Err(config_err(line, key, format!("must be > 0, got {x}")));
    }
    Ok(x)
}

fn parse_int<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| config_err(line, key, format!("expected a nonnegative integer, got `{v}`")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(config_err(line, key, format!("expected true/false, got `{v}`"))),
    }
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_nonneg(line, key, s.trim())).collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(config_err(line, content, "expected `key = value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(first) = seen.insert(k.to_string(), line) {
                return Err(config_err(line, k, format!("duplicate key (first set on line {first})")));
            }
            c.set(line, k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => self.seed = Some(parse_int(line, k, v)?),
            "g_khz" => self.g_khz = parse_nonneg(line, k, v)?,
            "omega_r_mhz" => self.omega_r_mhz = parse_positive(line, k, v)?,
            "omega_sb_khz" => self.omega_sb_khz = parse_positive(line, k, v)?,
            "heating_rate_per_s" => self.heating_rate_per_s = parse_nonneg(line, k, v)?,
            "dephasing_rate_per_s" => self.dephasing_rate_per_s = parse_nonneg(line, k, v)?,
            "noise" => self.noise = parse_bool(line, k, v)?,
            "noise_during_displace" => self.noise_during_displace = parse_bool(line, k, v)?,
            "noise_during_readout" => self.noise_during_readout = parse_bool(line, k, v)?,
            "truncation" => self.truncation = parse_int(line, k, v)?,
            "noisy_truncation" => self.noisy_truncation = parse_int(line, k, v)?,
            "noisy_tail_eps" => self.noisy_tail_eps = parse_positive(line, k, v)?,
            "frame_dt_ns" => self.frame_dt_ns = parse_positive(line, k, v)?,
            "sampling" => {
                self.sampling = match v {
                    "binomial" => Sampling::Binomial,
                    "exact" => Sampling::Exact,
                    _ => return Err(config_err(line, k, format!("expected binomial or exact, got `{v}`"))),
                }
            }
            "shots" => self.shots = parse_int(line, k, v)?,
            "trace_shots" => self.trace_shots = parse_int(line, k, v)?,
            "trace_points" => self.trace_points = parse_int(line, k, v)?,
            "trace_step_us" => self.trace_step_us = parse_positive(line, k, v)?,
            "bsb_gamma_per_s" => self.bsb_gamma_per_s = parse_nonneg(line, k, v)?,
            "fit_free_omega" => self.fit_free_omega = parse_bool(line, k, v)?,
            "displace_us" => self.displace_us = parse_positive(line, k, v)?,
            "theta_rad" => self.theta_rad = parse_f64(line, k, v)?,
            "beatnote_rad" => self.beatnote_rad = parse_f64(line, k, v)?,
            "alpha" => self.alpha = parse_positive(line, k, v)?,
            "gain_us" => self.gain_us = parse_list(line, k, v)?,
            "scan_alpha" => self.scan_alpha = parse_nonneg(line, k, v)?,
            "scan_us" => self.scan_us = parse_nonneg(line, k, v)?,
            "phi_points" => self.phi_points = parse_int(line, k, v)?,
            "theta_points" => self.theta_points = parse_int(line, k, v)?,
            "alphas" => self.alphas = parse_list(line, k, v)?,
            "contrast_us" => self.contrast_us = parse_list(line, k, v)?,
            "sensitivity_alphas" => self.sensitivity_alphas = parse_list(line, k, v)?,
            "sensitivity_us" => self.sensitivity_us = parse_list(line, k, v)?,
            "slope_threshold" => self.slope_threshold = parse_positive(line, k, v)?,
            "unitarity_us" => self.unitarity_us = parse_list(line, k, v)?,
            "background" => self.background = parse_nonneg(line, k, v)?,
            "rwa_ratios" => self.rwa_ratios = parse_list(line, k, v)?,
            "rwa_gt" => self.rwa_gt = parse_nonneg(line, k, v)?,
            "rwa_truncation" => self.rwa_truncation = parse_int(line, k, v)?,
            "rwa_steps_per_period" => self.rwa_steps_per_period = parse_int(line, k, v)?,
            _ => return Err(config_err(line, k, "unknown key")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("shots", self.shots as usize),
            ("trace_shots", self.trace_shots as usize),
            ("trace_points", self.trace_points),
            ("rwa_steps_per_period", self.rwa_steps_per_period),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config_err(0, k, "must be positive"));
            }
        }
        if self.background >= 1.0 {
            return Err(config_err(0, "background", "must be below 1"));
        }
        for (k, n) in [("noisy_truncation", self.noisy_truncation), ("rwa_truncation", self.rwa_truncation)] {
            if n < 8 {
                return Err(config_err(0, k, "must be at least 8"));
            }
        }
        if self.truncation != 0 && self.truncation < 8 {
            return Err(config_err(0, "truncation", "must be 0 (automatic) or at least 8"));
        }
        Ok(())
    }

    /// Canonical resolved form: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(seed) = self.seed {
            kv("seed", seed.to_string());
        }
        kv("g_khz", self.g_khz.to_string());
        kv("omega_r_mhz", self.omega_r_mhz.to_string());
        kv("omega_sb_khz", self.omega_sb_khz.to_string());
        kv("heating_rate_per_s", self.heating_rate_per_s.to_string());
        kv("dephasing_rate_per_s", self.dephasing_rate_per_s.to_string());
        kv("noise", self.noise.to_string());
        kv("noise_during_displace", self.noise_during_displace.to_string());
        kv("noise_during_readout", self.noise_during_readout.to_string());
        kv("truncation", self.truncation.to_string());
        kv("noisy_truncation", self.noisy_truncation.to_string());
        kv("noisy_tail_eps", self.noisy_tail_eps.to_string());
        kv("frame_dt_ns", self.frame_dt_ns.to_string());
        kv(
            "sampling",
            match self.sampling {
                Sampling::Binomial => "binomial",
                Sampling::Exact => "exact",
            }
            .to_string(),
        );
        kv("shots", self.shots.to_string());
        kv("trace_shots", self.trace_shots.to_string());
        kv("trace_points", self.trace_points.to_string());
        kv("trace_step_us", self.trace_step_us.to_string());
        kv("bsb_gamma_per_s", self.bsb_gamma_per_s.to_string());
        kv("fit_free_omega", self.fit_free_omega.to_string());
        kv("displace_us", self.displace_us.to_string());
        kv("theta_rad", self.theta_rad.to_string());
        kv("beatnote_rad", self.beatnote_rad.to_string());
        kv("alpha", self.alpha.to_string());
        kv("gain_us", fmt_list(&self.gain_us));
        kv("scan_alpha", self.scan_alpha.to_string());
        kv("scan_us", self.scan_us.to_string());
        kv("phi_points", self.phi_points.to_string());
        kv("theta_points", self.theta_points.to_string());
        kv("alphas", fmt_list(&self.alphas));
        kv("contrast_us", fmt_list(&self.contrast_us));
        kv("sensitivity_alphas", fmt_list(&self.sensitivity_alphas));
        kv("sensitivity_us", fmt_list(&self.sensitivity_us));
        kv("slope_threshold", self.slope_threshold.to_string());
        kv("unitarity_us", fmt_list(&self.unitarity_us));
        kv("background", self.background.to_string());
        kv("rwa_ratios", fmt_list(&self.rwa_ratios));
        kv("rwa_gt", self.rwa_gt.to_string());
        kv("rwa_truncation", self.rwa_truncation.to_string());
        kv("rwa_steps_per_period", self.rwa_steps_per_period.to_string());
        s
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }

    /// Squeezing rate in rad/s (`r = g t`).
    pub fn g(&self) -> f64 {
        TAU * self.g_khz * 1e3
    }

    pub fn omega_r(&self) -> f64 {
        TAU * self.omega_r_mhz * 1e6
    }

    pub fn omega_sb(&self) -> f64 {
        TAU * self.omega_sb_khz * 1e3
    }

    pub fn noise_params(&self) -> Result<NoiseParams> {
        NoiseParams::new(self.heating_rate_per_s, self.dephasing_rate_per_s)
    }

    fn seed_for_sampling(&self) -> Result<u64> {
        match (self.sampling, self.seed) {
            (Sampling::Exact, s) => Ok(s.unwrap_or(0)),
            (Sampling::Binomial, Some(s)) => Ok(s),
            (Sampling::Binomial, None) => Err(config_err(0, "seed", "required for sampled runs")),
        }
    }

    fn evolve_options(&self) -> EvolveOptions {
        EvolveOptions {
            frame_dt: self.frame_dt_ns * 1e-9,
            tail_eps: self.noisy_tail_eps,
            ..EvolveOptions::default()
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// ChaCha20 stream for one sweep point.
pub fn point_rng(seed: u64, experiment: &str, index: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((experiment.len() as u64).to_le_bytes());
    h.update(experiment.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Fraction of `shots` Bernoulli(p) trials that succeed.
pub fn sample_probability(p: f64, shots: u32, rng: &mut ChaCha20Rng) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let k = Binomial::new(shots as u64, p).expect("p clamped to [0, 1]").sample(rng);
    k as f64 / shots as f64
}

fn measure(p: f64, shots: u32, sampling: Sampling, rng: &mut ChaCha20Rng) -> f64 {
    match sampling {
        Sampling::Binomial => sample_probability(p, shots, rng),
        Sampling::Exact => p.clamp(0.0, 1.0),
    }
}

/// Synthetic blue-sideband trace from Fock populations.
pub fn synthetic_trace(
    populations: &[f64],
    omega: f64,
    gamma: f64,
    times: &[f64],
    shots: u32,
    sampling: Sampling,
    rng: &mut ChaCha20Rng,
) -> Result<RabiTrace> {
    let exact = bsb_signal(populations, omega, gamma, times);
    let y = exact.iter().map(|&p| measure(p, shots, sampling, rng)).collect();
    RabiTrace::new(times.to_vec(), y, shots)
}

/// Tabular sweep output with provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub experiment: String,
    pub code_version: String,
    pub config_hash: String,
    pub config: String,
    pub columns: Vec<String>,
    /// Failed values are NaN in CSV and `null` in JSON.
    pub rows: Vec<Vec<f64>>,
    /// `ok` or the error that stopped the point.
    pub status: Vec<String>,
    pub summary: BTreeMap<String, f64>,
}

impl SweepResult {
    fn new(experiment: &str, cfg: &ExperimentConfig, columns: &[&str]) -> Self {
        Self {
            schema_version: SWEEP_SCHEMA_VERSION,
            experiment: experiment.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config: cfg.to_text(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            status: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    fn push(&mut self, row: Vec<f64>, status: Result<()>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
        self.status.push(match status {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        });
    }

    /// Orders rows by the leading sweep columns.
    fn sort_by_keys(&mut self, keys: usize) {
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| {
            (0..keys)
                .map(|k| self.rows[a][k].total_cmp(&self.rows[b][k]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.rows = idx.iter().map(|&i| self.rows[i].clone()).collect();
        self.status = idx.iter().map(|&i| self.status[i].clone()).collect();
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.columns.clone();
        header.push("status".into());
        w.write_record(&header).expect("in-memory csv write");
        for (row, st) in self.rows.iter().zip(&self.status) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(st.clone());
            w.write_record(&rec).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep result serializes")
    }
}

// ---------------------------------------------------------------------------
// Shared pipeline

/// What the experiment reads out after the motional preparation.
enum Readout {
    /// Motional density only.
    Motion,
    /// PSRSB fringe after an RSB π-pulse with the given phase.
    Fringe { rsb_phase: f64 },
}

struct Prepared {
    /// Motional density after preparation (traced over the spin for fringe readouts).
    motion: DensityOperator,
    fringe: Option<Fringe>,
    max_tail: f64,
}

/// `S(r e^{iθ})`, `D(α)`, `S(−r e^{iθ})` with squeeze duration `t_sq` each.
fn amplification_sequence(cfg: &ExperimentConfig, t_sq: f64, theta: f64, alpha: C64) -> Result<PulseSequence> {
    let mut seq = PulseSequence::default();
    if t_sq > 0.0 {
        seq.push(Segment::squeeze(cfg.g(), theta, t_sq)?);
    }
    if alpha.norm() > 0.0 {
        let d = Segment::displace(alpha, cfg.displace_us * 1e-6)?;
        seq.push(if cfg.noise_during_displace { d } else { d.quiet() });
    }
    if t_sq > 0.0 {
        seq.push(Segment::squeeze(cfg.g(), theta + PI, t_sq)?);
    }
    Ok(seq)
}

fn pure_space(cfg: &ExperimentConfig, alpha_f: f64, r: f64) -> Result<FockSpace> {
    if cfg.truncation > 0 {
        FockSpace::new(cfg.truncation)
    } else {
        Ok(FockSpace::for_tail(alpha_f, r, 1e-10))
    }
}

/// Runs a preparation sequence, noisy or not, and the requested readout.
fn prepare(
    cfg: &ExperimentConfig,
    seq: PulseSequence,
    noisy: bool,
    alpha_f: f64,
    r: f64,
    readout: Readout,
) -> Result<Prepared> {
    let noise = if noisy { cfg.noise_params()? } else { NoiseParams::none() };
    let rsb = match readout {
        Readout::Motion => None,
        Readout::Fringe { rsb_phase } => Some(SidebandPulse::pi_pulse(PulseKind::Rsb, cfg.omega_sb(), rsb_phase)?),
    };
    if !noisy || seq.segments.is_empty() && !cfg.noise_during_readout {
        let space = pure_space(cfg, alpha_f, r)?;
        let out = run_sequence_pure(&seq, MotionalState::vacuum(space))?;
        let fringe = rsb.map(|p| Fringe::from_motional_density(&out.rho, p.phase));
        return Ok(Prepared {
            motion: out.rho,
            fringe,
            max_tail: out.max_tail,
        });
    }
    let space = FockSpace::new(cfg.noisy_truncation)?;
    let opts = cfg.evolve_options();
    match rsb {
        Some(p) if cfg.noise_during_readout => {
            let mut seq = seq;
            seq.push(Segment::pulse(&p)?);
            let out = run_sequence(&seq, noise, MotionalState::vacuum(space), &opts)?;
            let fringe = Fringe::from_joint_density(&out.rho);
            Ok(Prepared {
                motion: out.rho.motional(),
                fringe: Some(fringe),
                max_tail: out.max_tail,
            })
        }
        _ => {
            let out = if seq.segments.is_empty() {
                run_sequence_pure(&seq, MotionalState::vacuum(space))?
            } else {
                run_sequence(&seq, noise, MotionalState::vacuum(space), &opts)?
            };
            let fringe = rsb.map(|p| Fringe::from_motional_density(&out.rho, p.phase));
            Ok(Prepared {
                motion: out.rho,
                fringe,
                max_tail: out.max_tail,
            })
        }
    }
}

fn lock_phase(cfg: &ExperimentConfig, alpha: C64) -> f64 {
    psrsb_lock_phase(alpha.arg(), cfg.beatnote_rad)
}

fn nan_row(n: usize) -> Vec<f64> {
    vec![f64::NAN; n]
}

/// Least-squares slope of `C = s·α` through the origin, optionally weighted.
fn slope_through_origin(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Option<(f64, f64)> {
    let w: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 0.0 }).collect(),
        None => vec![1.0; x.len()],
    };
    let sxx: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).zip(&w).map(|((x, y), w)| w * x * y).sum();
    let s = sxy / sxx;
    let err = match sigma {
        Some(_) => 1.0 / sxx.sqrt(),
        None => 0.0,
    };
    Some((s, err))
}

/// Contrast of a fringe measured at its extremes: exact value, sampled value
/// and projection-noise standard deviation.
fn sampled_contrast(f: &Fringe, shots: u32, sampling: Sampling, rng: &mut ChaCha20Rng) -> (f64, f64, f64) {
    let phi_max = -f.k.arg();
    let (pmax, pmin) = (f.pdown(phi_max), f.pdown(phi_max + PI));
    let (mmax, mmin) = (measure(pmax, shots, sampling, rng), measure(pmin, shots, sampling, rng));
    let (c, s) = contrast_and_noise(mmax, mmin, shots);
    (pmax - pmin, c, s)
}

// ---------------------------------------------------------------------------
// Experiments

/// Gain `α_f/α_i` against squeeze duration, with `α_f` from a coherent-state
/// fit to a synthetic blue-sideband trace of the final motional state.
pub fn run_gain_curve(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "gain_curve";
    let seed = cfg.seed_for_sampling()?;
    let cols = [
        "t_us", "r_ideal", "alpha_f_fit", "alpha_f_err", "gain", "gain_err", "alpha_f_ideal", "gain_ideal", "max_tail",
    ];
    let mut out = SweepResult::new(NAME, cfg, &cols);
    let times: Vec<f64> = (0..cfg.trace_points).map(|k| k as f64 * cfg.trace_step_us * 1e-6).collect();
    let alpha = C64::new(cfg.alpha, 0.0);
    let rows: Vec<(Vec<f64>, Result<()>)> = cfg
        .gain_us
        .par_iter()
        .enumerate()
        .map(|(i, &t_us)| {
            let r = cfg.g() * t_us * 1e-6;
            let af = amplify_displacement(alpha, SqueezeParam::new(r, cfg.theta_rad)).norm();
            let point = || -> Result<Vec<f64>> {
                let seq = amplification_sequence(cfg, t_us * 1e-6, cfg.theta_rad, alpha)?;
                let prep = prepare(cfg, seq, cfg.noise, af, r, Readout::Motion)?;
                let pops = prep.motion.motional_populations();
                let mut rng = point_rng(seed, NAME, i as u64);
                let trace = synthetic_trace(&pops, cfg.omega_sb(), cfg.bsb_gamma_per_s, &times, cfg.trace_shots, cfg.sampling, &mut rng)?;
                let mut init = FitInit::new(cfg.omega_sb(), cfg.bsb_gamma_per_s);
                init.alpha = Some(af);
                init.fix_omega = !cfg.fit_free_omega;
                let fit = fit_state_model(&trace, StateModel::Coherent, &init)?;
                let (a, e) = (fit.params[0], fit.stderr[0]);
                Ok(vec![t_us, r, a, e, a / cfg.alpha, e / cfg.alpha, af, af / cfg.alpha, prep.max_tail])
            };
            match point() {
                Ok(row) => (row, Ok(())),
                Err(e) => {
                    let mut row = nan_row(cols.len());
                    row[0] = t_us;
                    row[1] = r;
                    row[6] = af;
                    row[7] = af / cfg.alpha;
                    (row, Err(e))
                }
            }
        })
        .collect();
    for (row, st) in rows {
        out.push(row, st);
    }
    out.sort_by_keys(1);
    Ok(out)
}

/// `P↓(φ)` against the carrier analysis phase for one displacement, with a
/// `b + a cos φ` fit and the max/min contrast.
pub fn run_phase_scan(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "phase_scan";
    if cfg.phi_points < 8 {
        return Err(config_err(0, "phi_points", "phase scan needs at least 8 points"));
    }
    let seed = cfg.seed_for_sampling()?;
    let mut out = SweepResult::new(NAME, cfg, &["phi_rad", "pdown_exact", "pdown", "pdown_err"]);
    let alpha = C64::new(cfg.scan_alpha, 0.0);
    let t_sq = cfg.scan_us * 1e-6;
    let r = cfg.g() * t_sq;
    let af = amplify_displacement(alpha, SqueezeParam::new(r, cfg.theta_rad));
    let seq = amplification_sequence(cfg, t_sq, cfg.theta_rad, alpha)?;
    let prep = prepare(cfg, seq, cfg.noise, af.norm(), r, Readout::Fringe { rsb_phase: lock_phase(cfg, alpha) })?;
    let fringe = prep.fringe.expect("fringe readout requested");
    let phis: Vec<f64> = (0..cfg.phi_points).map(|k| TAU * k as f64 / cfg.phi_points as f64).collect();
    let mut measured = Vec::with_capacity(phis.len());
    for (i, &phi) in phis.iter().enumerate() {
        let p = fringe.pdown(phi);
        let mut rng = point_rng(seed, NAME, i as u64);
        let m = measure(p, cfg.shots, cfg.sampling, &mut rng);
        measured.push(m);
        out.push(vec![phi, p, m, crate::fit::projection_sigma(m, cfg.shots)], Ok(()));
    }
    let fit = fit_sinusoid(&phis, &measured, cfg.shots)?;
    let mut rng = point_rng(seed, NAME, phis.len() as u64);
    let (c_exact, c, c_err) = sampled_contrast(&fringe, cfg.shots, cfg.sampling, &mut rng);
    let s = &mut out.summary;
    s.insert("b".into(), fit.params[0]);
    s.insert("b_err".into(), fit.stderr[0]);
    s.insert("a".into(), fit.params[1]);
    s.insert("a_err".into(), fit.stderr[1]);
    s.insert("amplitude".into(), fit.params[1].abs());
    s.insert("amplitude_exact".into(), fringe.k.norm());
    s.insert("amplitude_theory".into(), af.norm() * f_alpha_auto(af.norm()));
    s.insert("contrast_exact".into(), c_exact);
    s.insert("contrast_maxmin".into(), c);
    s.insert("contrast_maxmin_err".into(), c_err);
    s.insert("contrast_fit".into(), 2.0 * fit.params[1].abs());
    s.insert("max_tail".into(), prep.max_tail);
    Ok(out)
}

/// Fringe contrast against the squeeze phase θ at fixed displacement.
pub fn run_squeeze_phase_scan(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "squeeze_phase_scan";
    if cfg.theta_points < 4 {
        return Err(config_err(0, "theta_points", "squeeze-phase scan needs at least 4 points"));
    }
    let seed = cfg.seed_for_sampling()?;
    let cols = ["theta_rad", "contrast_exact", "contrast", "contrast_err", "alpha_f_ideal", "max_tail"];
    let mut out = SweepResult::new(NAME, cfg, &cols);
    let alpha = C64::new(cfg.scan_alpha, 0.0);
    let t_sq = cfg.scan_us * 1e-6;
    let r = cfg.g() * t_sq;
    let thetas: Vec<f64> = (0..cfg.theta_points).map(|k| TAU * k as f64 / cfg.theta_points as f64).collect();
    let rows: Vec<(Vec<f64>, Result<()>)> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| {
            let af = amplify_displacement(alpha, SqueezeParam::new(r, theta)).norm();
            let point = || -> Result<Vec<f64>> {
                let seq = amplification_sequence(cfg, t_sq, theta, alpha)?;
                let prep = prepare(cfg, seq, cfg.noise, af, r, Readout::Fringe { rsb_phase: lock_phase(cfg, alpha) })?;
                let fringe = prep.fringe.expect("fringe readout requested");
                let mut rng = point_rng(seed, NAME, i as u64);
                let (ce, c, s) = sampled_contrast(&fringe, cfg.shots, cfg.sampling, &mut rng);
                Ok(vec![theta, ce, c, s, af, prep.max_tail])
            };
            match point() {
                Ok(row) => (row, Ok(())),
                Err(e) => {
                    let mut row = nan_row(cols.len());
                    row[0] = theta;
                    row[4] = af;
                    (row, Err(e))
                }
            }
        })
        .collect();
    for (row, st) in rows {
        out.push(row, st);
    }
    out.sort_by_keys(1);
    let c = out.column("contrast_exact").expect("column exists");
    let (imax, cmax) = c.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let cmin = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let n = c.len();
    let peaks = (0..n).filter(|&i| c[i] > c[(i + n - 1) % n] && c[i] >= c[(i + 1) % n]).count();
    let s = &mut out.summary;
    s.insert("contrast_max".into(), cmax);
    s.insert("contrast_min".into(), cmin);
    s.insert("ratio_max_min".into(), cmax / cmin);
    s.insert("ratio_ideal".into(), (2.0 * r).exp());
    s.insert("theta_at_max".into(), thetas[imax]);
    s.insert("maxima_per_period".into(), peaks as f64);
    Ok(out)
}

struct ContrastPoint {
    exact: f64,
    measured: f64,
    sigma: f64,
    max_tail: f64,
}

fn contrast_point(cfg: &ExperimentConfig, name: &str, seed: u64, index: u64, t_us: f64, alpha: f64) -> Result<ContrastPoint> {
    let a = C64::new(alpha, 0.0);
    let r = cfg.g() * t_us * 1e-6;
    let af = amplify_displacement(a, SqueezeParam::new(r, cfg.theta_rad)).norm();
    let seq = amplification_sequence(cfg, t_us * 1e-6, cfg.theta_rad, a)?;
    let prep = prepare(cfg, seq, cfg.noise, af, r, Readout::Fringe { rsb_phase: lock_phase(cfg, a) })?;
    let fringe = prep.fringe.expect("fringe readout requested");
    let mut rng = point_rng(seed, name, index);
    let (exact, measured, sigma) = sampled_contrast(&fringe, cfg.shots, cfg.sampling, &mut rng);
    Ok(ContrastPoint {
        exact,
        measured,
        sigma,
        max_tail: prep.max_tail,
    })
}

/// Linear-regime slopes of `C(α)`: exact and from the sampled points, using
/// only points with exact contrast at or below the threshold.
fn linear_slopes(alphas: &[f64], pts: &[Option<ContrastPoint>], threshold: f64) -> (f64, f64, f64, usize) {
    let mut x = Vec::new();
    let (mut ye, mut ym, mut sg) = (Vec::new(), Vec::new(), Vec::new());
    for (a, p) in alphas.iter().zip(pts) {
        if let Some(p) = p {
            if p.exact <= threshold && *a > 0.0 {
                x.push(*a);
                ye.push(p.exact);
                ym.push(p.measured);
                sg.push(p.sigma);
            }
        }
    }
    let exact = slope_through_origin(&x, &ye, None).map_or(f64::NAN, |s| s.0);
    let weighted = if sg.iter().all(|s| *s > 0.0) { Some(sg.as_slice()) } else { None };
    let (m, e) = slope_through_origin(&x, &ym, weighted).unwrap_or((f64::NAN, f64::NAN));
    (exact, m, e, x.len())
}

fn us_key(prefix: &str, t_us: f64) -> String {
    format!("{prefix}_{t_us}us")
}

/// Fringe contrast against displacement amplitude for each squeeze duration,
/// with the linear-regime slope per duration. Contrast gain is slope/2, the
/// small-α slope without squeezing.
pub fn run_contrast_vs_alpha(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "contrast_alpha";
    let seed = cfg.seed_for_sampling()?;
    let cols = ["t_us", "alpha", "contrast_exact", "contrast", "contrast_err", "max_tail"];
    let mut out = SweepResult::new(NAME, cfg, &cols);
    let grid: Vec<(f64, f64)> = cfg
        .contrast_us
        .iter()
        .flat_map(|&t| cfg.alphas.iter().map(move |&a| (t, a)))
        .collect();
    let pts: Vec<Result<ContrastPoint>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(t, a))| contrast_point(cfg, NAME, seed, i as u64, t, a))
        .collect();
    let mut by_t: BTreeMap<usize, Vec<Option<ContrastPoint>>> = BTreeMap::new();
    for (i, ((t, a), p)) in grid.iter().zip(pts).enumerate() {
        let ti = i / cfg.alphas.len().max(1);
        match p {
            Ok(p) => {
                out.push(vec![*t, *a, p.exact, p.measured, p.sigma, p.max_tail], Ok(()));
                by_t.entry(ti).or_default().push(Some(p));
            }
            Err(e) => {
                let mut row = nan_row(cols.len());
                row[0] = *t;
                row[1] = *a;
                out.push(row, Err(e));
                by_t.entry(ti).or_default().push(None);
            }
        }
    }
    for (ti, pts) in &by_t {
        let t = cfg.contrast_us[*ti];
        let (exact, m, e, used) = linear_slopes(&cfg.alphas, pts, cfg.slope_threshold);
        let s = &mut out.summary;
        s.insert(us_key("slope_exact", t), exact);
        s.insert(us_key("slope", t), m);
        s.insert(us_key("slope_err", t), e);
        s.insert(us_key("contrast_gain", t), exact / 2.0);
        s.insert(us_key("points_in_fit", t), used as f64);
    }
    out.sort_by_keys(2);
    Ok(out)
}

/// Sensitivity enhancement against squeeze duration: linear-regime slope at
/// each duration relative to the unsqueezed slope under the same noise.
pub fn run_sensitivity_curve(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "sensitivity";
    let seed = cfg.seed_for_sampling()?;
    let cols = [
        "t_us", "gain_ideal", "ideal_db", "slope_exact", "contrast_gain", "enhancement_db", "s_amp", "s_ref", "slope", "slope_err", "max_tail",
    ];
    let mut out = SweepResult::new(NAME, cfg, &cols);
    let durations: Vec<f64> = std::iter::once(0.0).chain(cfg.sensitivity_us.iter().copied()).collect();
    let grid: Vec<(usize, f64)> = (0..durations.len())
        .flat_map(|d| cfg.sensitivity_alphas.iter().map(move |&a| (d, a)))
        .collect();
    let pts: Vec<Result<ContrastPoint>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(d, a))| contrast_point(cfg, NAME, seed, i as u64, durations[d], a))
        .collect();
    let mut per: Vec<Vec<Option<ContrastPoint>>> = (0..durations.len()).map(|_| Vec::new()).collect();
    let mut errors: Vec<Option<Error>> = vec![None; durations.len()];
    for ((d, _), p) in grid.iter().zip(pts) {
        match p {
            Ok(p) => per[*d].push(Some(p)),
            Err(e) => {
                per[*d].push(None);
                errors[*d].get_or_insert(e);
            }
        }
    }
    let slopes: Vec<(f64, f64, f64, usize)> = per
        .iter()
        .map(|p| linear_slopes(&cfg.sensitivity_alphas, p, cfg.slope_threshold))
        .collect();
    let ref_slope = slopes[0].0;
    let probe = cfg.sensitivity_alphas.first().copied().unwrap_or(0.0);
    out.summary.insert("slope_reference".into(), ref_slope);
    for (d, &t) in durations.iter().enumerate().skip(1) {
        let r = cfg.g() * t * 1e-6;
        let g_ideal = r.exp();
        let tail = per[d].iter().flatten().map(|p| p.max_tail).fold(0.0, f64::max);
        let (se, sm, serr, _) = slopes[d];
        let status = match errors[d].take().or_else(|| errors[0].clone()) {
            Some(e) => Err(e),
            None => Ok(()),
        };
        let row = match snr_and_enhancement(se * probe, ref_slope * probe, cfg.shots) {
            Ok(snr) if status.is_ok() => vec![t, g_ideal, squeeze_db(r), se, se / ref_slope, snr.enhancement_db, snr.s_amp, snr.s_ref, sm, serr, tail],
            _ => {
                let mut row = nan_row(cols.len());
                row[0] = t;
                row[1] = g_ideal;
                row[2] = squeeze_db(r);
                row
            }
        };
        let status = if status.is_ok() && row[5].is_nan() { Err(Error::ZeroReference) } else { status };
        out.push(row, status);
    }
    out.sort_by_keys(1);
    let db = out.column("enhancement_db").expect("column exists");
    let ts = out.column("t_us").expect("column exists");
    if let Some((imax, &best)) = db
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
    {
        out.summary.insert("peak_t_us".into(), ts[imax]);
        out.summary.insert("peak_enhancement_db".into(), best);
        let interior = imax > 0 && imax + 1 < db.len();
        out.summary.insert("interior_maximum".into(), if interior { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Ground-state return after squeeze and antisqueeze of equal duration, read
/// out by a red-sideband π-pulse on `|↓⟩ ⊗ ρ`. The reported `P↓` includes
/// a state-preparation background: `P↓ = (1 − background) Σ Pₙ cos²(π√n/2)`.
pub fn run_unitarity_check(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "unitarity";
    let seed = cfg.seed_for_sampling()?;
    let cols = [
        "t_us", "r_ideal", "p0_noiseless", "p0_noisy", "pdown_noiseless", "pdown_noisy", "pdown", "pdown_err", "max_tail",
    ];
    let mut out = SweepResult::new(NAME, cfg, &cols);
    let rows: Vec<(Vec<f64>, Result<()>)> = cfg
        .unitarity_us
        .par_iter()
        .enumerate()
        .map(|(i, &t_us)| {
            let r = cfg.g() * t_us * 1e-6;
            let point = || -> Result<Vec<f64>> {
                let seq = amplification_sequence(cfg, t_us * 1e-6, cfg.theta_rad, C64::new(0.0, 0.0))?;
                let clean = prepare(cfg, seq.clone(), false, 0.0, r, Readout::Motion)?;
                let noisy = if seq.segments.is_empty() {
                    prepare(cfg, seq, false, 0.0, r, Readout::Motion)?
                } else {
                    prepare(cfg, seq, true, 0.0, r, Readout::Motion)?
                };
                let (pc, pn) = (clean.motion.motional_populations(), noisy.motion.motional_populations());
                let keep = 1.0 - cfg.background;
                let (dc, dn) = (keep * direct_rsb_pdown(&pc), keep * direct_rsb_pdown(&pn));
                let p = if cfg.noise { dn } else { dc };
                let mut rng = point_rng(seed, NAME, i as u64);
                let m = measure(p, cfg.shots, cfg.sampling, &mut rng);
                Ok(vec![t_us, r, pc[0], pn[0], dc, dn, m, crate::fit::projection_sigma(m, cfg.shots), noisy.max_tail])
            };
            match point() {
                Ok(row) => (row, Ok(())),
                Err(e) => {
                    let mut row = nan_row(cols.len());
                    row[0] = t_us;
                    row[1] = r;
                    (row, Err(e))
                }
            }
        })
        .collect();
    for (row, st) in rows {
        out.push(row, st);
    }
    out.sort_by_keys(1);
    Ok(out)
}

/// Lab-frame parametric drive against the RWA squeezed vacuum for each
/// `g/ω_r` ratio at fixed `g t`.
pub fn rwa_check(cfg: &ExperimentConfig) -> Result<SweepResult> {
    const NAME: &str = "rwa_check";
    let cols = ["g_over_omega_r", "gt", "fidelity", "r_effective", "steps_per_period", "step_change"];
    let mut out = SweepResult::new(NAME, cfg, &cols);
    let space = FockSpace::new(cfg.rwa_truncation)?;
    let omega_r = cfg.omega_r();
    let rows: Vec<(Vec<f64>, Result<()>)> = cfg
        .rwa_ratios
        .par_iter()
        .map(|&ratio| {
            let point = || -> Result<Vec<f64>> {
                let g = ratio * omega_r;
                if !(g > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "rwa_ratios",
                        reason: "ratios must be positive".into(),
                    });
                }
                let p = DriveParams::resonant(omega_r, g, cfg.theta_rad, cfg.rwa_gt / g)?;
                let res = simulate_full_vs_rwa_converged(&p, space, cfg.rwa_steps_per_period, 4)?;
                Ok(vec![ratio, cfg.rwa_gt, res.fidelity, res.r_effective, res.steps_per_period as f64, res.step_change])
            };
            match point() {
                Ok(row) => (row, Ok(())),
                Err(e) => {
                    let mut row = nan_row(cols.len());
                    row[0] = ratio;
                    row[1] = cfg.rwa_gt;
                    (row, Err(e))
                }
            }
        })
        .collect();
    for (row, st) in rows {
        out.push(row, st);
    }
    out.sort_by_keys(1);
    let f = out.column("fidelity").expect("column exists");
    let monotone = f.windows(2).all(|w| w[1] < w[0]);
    out.summary.insert("monotone_decreasing".into(), if monotone { 1.0 } else { 0.0 });
    Ok(out)
}

/// Runs a pulse sequence from `|↓⟩|0⟩` (or `|0⟩` if the sequence has no spin
/// pulses) with the configured noise; reports Fock populations and `P↓`.
pub fn run_simulation(cfg: &ExperimentConfig, seq: &PulseSequence) -> Result<SweepResult> {
    const NAME: &str = "simulate";
    let mut out = SweepResult::new(NAME, cfg, &["n", "population"]);
    let spin = seq
        .segments
        .iter()
        .any(|s| matches!(s.kind, SegmentKind::Rsb | SegmentKind::Bsb | SegmentKind::Carrier));
    let space = FockSpace::new(if cfg.truncation > 0 { cfg.truncation } else { cfg.noisy_truncation })?;
    let noise = if cfg.noise { cfg.noise_params()? } else { NoiseParams::none() };
    let opts = EvolveOptions {
        tail_eps: cfg.noisy_tail_eps,
        ..cfg.evolve_options()
    };
    let res = if spin {
        run_sequence(seq, noise, JointState::down(&MotionalState::vacuum(space)), &opts)?
    } else {
        run_sequence(seq, noise, MotionalState::vacuum(space), &opts)?
    };
    let pops = res.rho.motional_populations();
    let mean_n: f64 = pops.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
    for (n, p) in pops.iter().enumerate() {
        out.push(vec![n as f64, *p], Ok(()));
    }
    if spin {
        let n = space.dim();
        let m = res.rho.matrix();
        let pd: f64 = (0..n).map(|j| m[(j, j)].re).sum();
        out.summary.insert("p_down".into(), pd);
    }
    out.summary.insert("mean_n".into(), mean_n);
    out.summary.insert("trace".into(), res.rho.trace());
    out.summary.insert("max_tail".into(), res.max_tail);
    out.summary.insert("step_change".into(), res.step_change);
    Ok(out)
}
