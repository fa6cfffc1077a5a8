//! Scenario configuration and run orchestration for the `eulerheat` CLI.

pub mod run;
pub mod scenario;

pub use run::{
    compare, run_certify, run_identity, run_loops, run_pde, CertifyRun, CompareReport, HarnessError, IdentityRun,
    LoopRun, PdeRun,
};
pub use scenario::{builtin_names, Overrides, Scenario, ScenarioError};
