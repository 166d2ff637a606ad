//! Sequential next-element prediction with peer transformer encoders.
//!
//! Two (or more) differently initialized encoder stacks share an element
//! embedding table, a positional table and a tied prediction head. Each peer
//! learns from the ground truth with a cloze objective and, in addition, from
//! its peers' *unlikelihood* of the correct answer (mutual exclusivity
//! distillation). The crate covers the whole pipeline: event-log ingestion,
//! cloze masking, the encoder with hand-written backpropagation, the losses,
//! the Adam/Noam trainer with checkpoints, and sampled-negative ranking
//! evaluation.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod masking;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use corpus::{InteractionSequence, RawEventLog, SplitSet, Vocabulary};
pub use encoder::{DualModel, ModelShape, Params, ProbabilityRow};
pub use error::{HailError, Result};
pub use eval::{EvalReport, RankedCase};
pub use losses::{DistillMode, LossBreakdown, TruncationFlags, TruncationRule};
pub use masking::{MaskedBatch, MaskedSample};
pub use trainer::{Checkpoint, TrainConfig};
