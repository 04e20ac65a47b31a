//! Sequential transfer and interference in small recurrent networks.
//!
//! A network learns task A, then a related task B, then A again. Each task
//! maps six stimuli to angles on a ring, with a "summer" and a "winter" output
//! related by a task-specific rotation. The crate trains single and
//! task-partitioned (modular) tanh RNNs across initialization scales and
//! measures transfer, interference and the geometry of the hidden states.

pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod runner;
pub mod taskgen;
pub mod training;

pub use network::{Arch, NetworkConfig};
pub use runner::{CellKey, SweepConfig};
pub use taskgen::{Condition, Phase, TaskConfig};
pub use training::Hyper;
