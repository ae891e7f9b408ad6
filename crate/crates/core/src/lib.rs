//! Dynamic-graph spiking network engine.
//!
//! Layers of leaky integrate-and-fire nodes exchange signals through a
//! symmetric, degree-normalized diffusion operator whose adjacency is
//! re-inferred at every timestep from node activity (structural plasticity).
//! Around that core sit the Dirichlet-energy instrumentation, the
//! topology-prototype OOD detector with its baselines, perturbation
//! protocols and synaptic-operation energy accounting.

pub mod diffusion;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod neuron;
pub mod numgrad;
pub mod ood;
pub mod stsp;
pub mod training;

pub use error::{Error, Result};
pub use numgrad::{Matrix, Rng, Tape, Var};

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
