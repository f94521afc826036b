//! Desk-scale benchmark for neural emulation of Eulerian atmospheric CO₂
//! transport.
//!
//! The crate provides a complete, self-contained loop:
//!
//! 1. [`refsolver`] generates synthetic "worlds" — trajectories of a
//!    conservative finite-volume tracer-advection solver driven by analytic
//!    winds and surface fluxes on a lat–lon sphere ([`sphere`]).
//! 2. [`pipeline`] stores trajectories in a chunked on-disk format, regrids,
//!    coarsens, staggers fluxes, audits the mass ledger, and computes
//!    normalization statistics.
//! 3. [`zoo`] defines neural emulators (UNet, shifted-window attention,
//!    spherical Fourier neural operator) on a hand-rolled reverse-mode
//!    autodiff tape ([`tensor`]) with spherical-harmonic transforms
//!    ([`harmonics`]).
//! 4. [`train`] fits emulators to predict one-step tracer deltas (optionally
//!    with a spectral loss), then fine-tunes on multi-step rollouts.
//! 5. [`stepper`] rolls a trained emulator forward autoregressively with
//!    tracer-mass centering, explicit flux injection, and a global mass
//!    fixer around a double-precision mass ledger.
//! 6. [`evalsuite`] scores trajectories (RMSE, R², bias/variability ratios,
//!    decorrelation time), extracts virtual station series, and runs
//!    ablation sweeps.
//!
//! The `tracerbench` binary exposes the same capabilities as subcommands;
//! the `examples/` directory shows one runnable program per capability.

pub mod config;
pub mod evalsuite;
pub mod harmonics;
pub mod pipeline;
pub mod refsolver;
pub mod sphere;
pub mod stepper;
pub mod tensor;
pub mod train;
pub mod util;
pub mod zoo;

/// Crate-level error for CLI plumbing: every failure maps onto one of the
/// process exit codes documented on [`ExitCode`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Process exit codes used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    ConfigError = 2,
    NumericalAbort = 3,
    IoError = 4,
}

impl Error {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Config(_) => ExitCode::ConfigError,
            Error::Numerical(_) => ExitCode::NumericalAbort,
            Error::Io(_) => ExitCode::IoError,
        }
    }
}
