//! Simulation and analysis toolkit for squeezing-based amplification of
//! small displacements of a trapped-ion motional mode.
//!
//! The library is organised bottom-up: [`fock`] holds the truncated Fock
//! space and state containers, [`gaussian`] the displacement/squeeze
//! algebra, [`spin_motion`] the sideband readout, [`drive`] the parametric
//! drive, [`open_system`] the Lindblad model, [`fit`] the analysis pipeline
//! and [`experiments`] the scripted sweeps used by the CLI.

pub mod banded;
pub mod drive;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod fock;
pub mod gaussian;
pub mod open_system;
pub mod spin_motion;

pub use error::{Error, Result};
pub use fock::{
    expectation, fidelity, ladder_lowering, ladder_raising, matrix_exponential_apply,
    number_operator, Basis, CMatrix, CVector, DensityOperator, FockSpace, MotionalState,
    StateVector, C64,
};
pub use gaussian::{
    amplification_identity_check, amplify_displacement, coherent_state,
    displaced_squeezed_populations, displacement_operator, squeeze_db, squeeze_operator,
    squeezed_vacuum, Displacement, SqueezeParam,
};
pub use spin_motion::{
    bsb_signal, f_alpha, psrsb_contrast, psrsb_exact_pdown, u_carrier, u_sideband, JointState,
    PulseKind, SidebandPulse,
};
pub use drive::DriveParams;
pub use experiments::{ExperimentConfig, Sampling, SweepResult};
pub use fit::{FitInit, FitResult, ModelTag, RabiTrace, StateModel};
pub use open_system::{EvolveOptions, NoiseParams, PulseSequence, Segment, SegmentKind};
