//! Pseudo-spectral laboratory for ∂ₜu − ∂ₓD^αu + uuₓ = 0 on a large periodic box.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod quadrature;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use rustfft::num_complex::Complex64;
pub use spectral::{
    apply_multiplier, apply_multiplier_complex, coordinate_multiply, frac_deriv, hilbert,
    projector_low, truncated_weight, CutoffSpec, Field, Grid, MultiplierSymbol, Spectrum,
    TruncatedWeight,
};
pub use solver::{solve, solve_from, InitialCondition, SimConfig, Trajectory};
pub use diagnostics::{DecayFit, DiagnosticsRecord, Invariants, SpectralJump, WeightSpec};
pub use asymptotics::{
    GrowthTable, ProbeKind, ProbeParams, PropagatorBound, QuadSpec, Regime, SlopeFit, SteinRequest,
    SteinResult, SteinTarget,
};
pub use experiments::{Check, ExperimentReport, Metric, TStarReport};
