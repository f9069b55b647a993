//! Joint low-rank and mixed-precision compression of sequential linear
//! layer chains.
//!
//! The search runs in two stages. Per layer, every quantized and
//! quantized-low-rank option is scored by a Hessian-weighted local loss and
//! its memory footprint, and only the Pareto front is kept. Across layers,
//! front members are scored by the network output error they cause and an
//! exact knapsack program picks one per layer under a memory budget. An
//! optional adaptive-rounding pass then refines the integer codes.

pub mod error;
pub mod inter;
pub mod intra;
pub mod lorada;
pub mod lowrank;
pub mod netsim;
pub mod pipeline;
pub mod quantizer;
pub mod report;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
