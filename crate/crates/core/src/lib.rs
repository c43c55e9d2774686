//! Sticker response selection: rank candidate sticker images against a
//! multi-turn dialog context.
//!
//! The pipeline encodes stickers into a spatial grid plus a flat vector,
//! encodes each utterance with self-attention, lets every utterance interact
//! with the sticker grid, fuses the per-utterance results into one score and
//! trains with a hinge ranking loss plus an emoji classification loss.

pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod interaction;
pub mod model;
pub mod numerics;
pub mod sticker_encoder;
pub mod trainer;
pub mod utterance_encoder;

pub use corpus::{Corpus, Dialog, DialogContext, Sticker, StickerId, Utterance, Vocab};
pub use error::{Error, Result};
pub use evaluator::{EvalReport, Metrics, RankingResult};
pub use model::{Ablations, ModelConfig, ModelMeta, SrsModel};
pub use numerics::{Graph, ParamStore, Tensor, Var};
pub use sticker_encoder::{StickerRepr, StickerTensors};
pub use trainer::{EpochRecord, TrainConfig};
