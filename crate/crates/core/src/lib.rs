//! Numerical laboratory for the Eulerian heat equation of closed (d-1)-forms
//! on the flat torus.
//!
//! The crate is organised around the objects the equation couples together:
//!
//! * [`loops`]: winding loops evolved by the 1-D heat equation (spectrally
//!   exact, plus an explicit finite-difference cross-check).
//! * [`fields`]: the periodic grid, mollified deposition of loop ensembles
//!   into the Eulerian triple `(rho, B, P)` and the grid snapshot format.
//! * [`pde`]: direct explicit solvers for the degenerate parabolic
//!   non-conservative system and residuals of the conservative form.
//! * [`energy`]: the energy functional, its dual representation, the
//!   transport metric and the dissipation identity.
//! * [`trial`] and [`entropy`]: trial fields, the `L` operators, the `Q_r`
//!   matrix, relative entropy, the dissipative-inequality certifier and the
//!   per-loop identity checks.

pub mod energy;
pub mod entropy;
pub mod fields;
pub mod loops;
pub mod pde;
pub mod snapshot;
pub mod trial;
pub mod vector;

pub use energy::{DualTestPair, EnergyError, MetricNorms};
pub use entropy::{EntropyError, EntropyReport, LOperators, QMatrix, R0Estimate, R0Sampling};
pub use fields::{DepositionKernel, FieldsError, GridFields, KernelKind, PeriodicGrid};
pub use loops::{LoopEnsemble, LoopError, LoopSamples, WindingLoop};
pub use pde::{PdeConfig, PdeError, ReducedState};
pub use trial::{TrialFields, TrialPoint, TrigField, TrigTerm};
pub use vector::{Vector, MAX_DIM};
