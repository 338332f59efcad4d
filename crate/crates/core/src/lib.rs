//! Feature-mover distance for adversarial sequence generation.
//!
//! The crate pairs optimal-transport solvers (IPOT proximal iterations,
//! entropic Sinkhorn, an exact enumeration oracle) with a
//! feature-matching critic whose gradients treat the solved transport
//! plan as a constant, and builds the full training stack on top: a
//! reverse-mode tape, an LSTM generator with soft-argmax decoding, a
//! multi-window convolutional feature extractor, corpus/BLEU tooling,
//! the alternating min-max training loop, and conditional extensions
//! (style transfer, cipher cracking) as loss compositions.

pub mod error;
pub mod ndgrad;
pub mod nets;
pub mod fmd;
pub mod ot;
pub mod textdata;
pub mod train;
pub mod seeds;

pub use error::{Error, Result};
pub use ndgrad::{Gradients, LeafMap, NodeId, ParamSet, Tape, Tensor};
pub use fmd::FeatureBatch;
pub use nets::{Checkpoint, Extractor, Generator, NetsConfig};
pub use ot::{CostMatrix, SolverConfig, TransportPlan};
pub use textdata::{Corpus, MarkovChain, Split, Vocab};
pub use train::{EmbeddingOwner, TrainConfig, TrainData, TrainHistory, Trainer};
