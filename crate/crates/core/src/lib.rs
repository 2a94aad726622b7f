//! Cross-modal alignment by decoupling embeddings into semantic and modal
//! components.

pub mod decoupler;
pub mod embed_io;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod semalign;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use decoupler::{DecoderPath, DecoupledSet, DecoupledVars, Decoupler, DecouplerConfig};
pub use embed_io::{generate_synthetic, EmbeddingBatch, SyntheticConfig, SyntheticGroundTruth};
pub use error::{Error, Result};
pub use nn::{Init, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
pub use eval::{evaluate, Aggregation, DirectionRecall, RetrievalReport};
pub use objectives::{LossBreakdown, LossWeights, ModalForm, SemanticForm};
pub use semalign::{Axis, CorrelationState, Sparsified};
pub use trainer::{Ablation, CddsModel, Checkpoint, CorrelationMode, StepRecord, TrainConfig, Trainer};
