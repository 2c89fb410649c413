//! Pseudo-spectral laboratory for the semiclassical WKB system of the
//! logarithmic nonlinear Schrödinger equation in Riemann-like variables:
//! weighted analytic norms on a periodic box, the iterative existence scheme
//! with its energy diagnostics, phase reconstruction, the first-order
//! corrector, a split-step reference solver, and an epsilon-sweep experiment
//! harness with rate fitting.

pub mod corrector;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod lognls;
pub mod output;
pub mod profiles;
pub mod reconstruct;
pub mod scheme;
pub mod spectral;
pub mod toolbox;

pub use error::{Error, Result};
pub use fields::{HydroState, Params, PhaseState, Trajectory};
pub use profiles::{DataFamily, Profile, ProfileSpec};
pub use spectral::{
    analytic_inner, analytic_norm, forward_transform, inverse_transform, spectral_derivative,
    DeltaSchedule, DerivativeKind, GridField, SpectralGrid, Spectrum, WeightParams,
};
