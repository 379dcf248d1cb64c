//! Quantum-state readout for chains of trapped ions imaged on a camera.
//!
//! The crate covers the whole pipeline: synthetic frame generation and PGM
//! I/O ([`imaging`]), ion localisation ([`localization`]), per-ion feature
//! extraction ([`features`]), four conventional classifiers
//! ([`classical`]), QUBO/Ising machinery with exact and heuristic solvers
//! ([`qubo`]), the QUBO-based "Quant" classifier and an annealing-trained
//! SVM ([`quantum`]), and metrics plus a benchmark harness
//! ([`evaluation`]). [`cli`] wires everything into the `ion-readout` binary.

pub mod classical;
pub mod cli;
pub mod evaluation;
pub mod features;
pub mod imaging;
pub mod localization;
pub mod quantum;
pub mod qubo;
pub mod rng;
pub mod state;

pub use state::IonState;
