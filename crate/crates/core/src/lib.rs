//! Simulation and numerical verification of bifurcating Markov chains.
//!
//! A bifurcating Markov chain is a process `(X_i)` indexed by the full binary
//! tree in which the two children of every node are drawn jointly from a
//! kernel `P(x, dy, dz)` given the parent state. This crate samples the
//! symmetric Gaussian autoregressive chain generation by generation, computes
//! exact moments of its additive functionals through the many-to-one
//! formulas, evaluates the asymptotic variances of its central limit
//! theorems in the sub-critical and critical regimes, and follows the
//! martingale that drives the super-critical regime.

pub mod error;
pub mod experiment;
pub mod hermite;
pub mod kernels;
pub mod limit_variance;
pub mod moment_oracle;
pub mod rng;
pub mod simulator;
pub mod supercritical;
pub mod tree_index;

pub use error::{BmcError, Result};
pub use hermite::{Observable, ObservableSequence, SequenceTail};
pub use kernels::{BarKernel, BranchingKernel, Gaussian, Regime};
pub use simulator::{Ensemble, Functionals, InitialLaw, ReplicateStatistics, SimulationConfig};
pub use tree_index::NodeId;
