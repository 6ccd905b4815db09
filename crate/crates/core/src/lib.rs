//! AU-prompt guided emotion recognition over precomputed embedding sequences,
//! with entropy-driven test-time prompt tuning.

pub mod data;
pub mod diffcore;
mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod tta;
pub mod verify;

pub use data::{EmbeddingSequence, Manifest, ManifestRecord, PromptKind, PromptSet, Role, SynthSpec};
pub use diffcore::{Tape, Tensor};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsBundle};
pub use model::{Checkpoint, ClassifierKind, ModelConfig, ModelParams};
pub use pretrain::{TrainConfig, TrainReport};
pub use tta::{ResetPolicy, Scoring, TtaConfig, WindowSelection};
