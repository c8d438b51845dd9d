//! Zero-shot cross-domain sequential recommendation over semantic item
//! embeddings.

pub mod config;
pub mod corpus;
pub mod evalkit;
pub mod model;
pub mod objective;
pub mod patterns;
pub mod pipeline;
pub mod semstore;
pub mod tensor;
pub mod trainer;

pub use config::{RunConfig, Variant};
pub use corpus::{Corpus, CorpusError, DomainId, SplitSpec, SynthConfig};
pub use evalkit::{EvalConfig, EvalReport};
pub use model::{Checkpoint, EncoderKind, ModelParams, ModelSpec};
pub use objective::{GenLossConfig, LossBreakdown};
pub use patterns::PatternBank;
pub use semstore::{BoundEmbeddings, SemanticStore};
pub use trainer::{TrainConfig, TrainOutcome};
