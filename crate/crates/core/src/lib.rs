//! Cache leakage detection for cryptographic kernels.
//!
//! The pipeline has four stages. Dynamic taint tracking lists the memory and
//! code locations whose use depends on the secret. Every suspect line is then
//! evicted before the targeted code runs against a simulated cache, and probed
//! afterwards. The binary probe traces are scored against the secret with
//! mutual information. Finally the score is compared with a noise threshold
//! calibrated on an always-cached control variable.
//!
//! Kernels are written directly against the [`exec`] harness, so every
//! memory access, branch and instruction fetch is visible to observers such as
//! the [`cache::CacheState`] and the [`taint::TaintCollector`].

pub mod cache;
pub mod detector;
pub mod exec;
pub mod kernels;
pub mod keysplit;
pub mod mia;
pub mod registry;
pub mod rng;
pub mod taint;

pub use cache::{CacheConfig, CacheState, LineId, ProbeOutcome};
pub use detector::{does_it_leak, ExperimentConfig, LeakReport, ProbeSchedule, Verdict};
pub use exec::{build_address_space, run_kernel, AddressSpace, ExecError, KernelSpec};
pub use kernels::KernelVariant;
pub use mia::{calibrate_threshold, mutual_information, CalibrationParams, Threshold};
pub use taint::{list_secret_tainted_memory, SuspectLocation, Taint};
