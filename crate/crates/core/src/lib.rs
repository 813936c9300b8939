//! Associative recurrent memory transformer and its segment-recurrent
//! baselines, on a small reverse-mode substrate, plus the associative
//! retrieval task generators used to train and probe them.

pub mod assoc;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod tensor;

pub use assoc::{phi, AssocProjections, AssociativeState, FeatureMap, FeatureMapSpec};
pub use checkpoint::{load_checkpoint, load_checkpoint_matching, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use graph::{GammaMode, Graph, Var};
pub use model::{Carry, CarrySnapshot, Model, ModelConfig, SegmentBatch, Variant};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tasks::{RetrievalSample, SegmentedSample, TaskKind, TaskSpec};
pub use tensor::{Precision, Real, Tensor};
