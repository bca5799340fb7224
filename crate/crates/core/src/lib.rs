//! Innovation-saturated extended Kalman filtering.
//!
//! The filters in this crate correct their state prediction with an
//! element-wise *saturated* innovation. Each measurement channel carries an
//! adaptive clip level `sqrt(sigma_i)` driven by a two-layer recursion: a
//! tracking value `epsilon_i` follows the squared innovation, and `sigma_i`
//! responds to it through the shaping term `epsilon_i * exp(-epsilon_i)`.
//! Persistent outliers inflate `epsilon_i`, which collapses the bound and
//! keeps the outlier from dragging the estimate away.
//!
//! Modules:
//!
//! - [`saturation`]: clipping primitives and the continuous/discrete bound dynamics.
//! - [`filters`]: discrete and continuous IS-EKF plus the plain EKF and the
//!   `l`-sigma gated EKF baselines.
//! - [`stability`]: Riccati solvers, certificate matrices and the closed-form
//!   error bounds for the linear observer case.
//! - [`scenario`]: the unicycle localization truth model with a staged
//!   outlier schedule and seeded simulation.

pub mod error;
pub mod filters;
pub mod linalg;
pub mod ode;
pub mod saturation;
pub mod scenario;
pub mod stability;

pub use error::{Error, Result};
pub use filters::{FilterState, NonlinearModel, SystemModel};
pub use saturation::{BoundParams, SaturationState, TimeMode};
pub use stability::{CertificateCandidate, LinearSystem, StabilityCertificate};
