//! Test-time training of small soft prompts for visual question answering.
//!
//! Every test sample gets its own adaptation episode. A grounding model
//! predicts an evidence box on the image, validates it on a white-padded crop,
//! and its prompts are trained on the validated box string. An answer model's
//! prompts are then aligned across the original and cropped views with
//! targets decoded by an exponential-moving-average teacher. Backbone weights
//! never change.
//!
//! The crate is backbone agnostic: anything implementing [`Backbone`] can be
//! adapted. Two reference backbones ship with it, a [`ScriptedBackbone`]
//! whose conditionals are given as a table, and a small differentiable
//! [`ToyBackbone`] with analytic prompt gradients.

pub mod backbone;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod objectives;
pub mod prompt;

pub use backbone::registry::{build_backbone, BackboneSpec};
pub use backbone::scripted::{ScriptRule, ScriptedBackbone};
pub use backbone::toy::ToyBackbone;
pub use backbone::{
    greedy_decode, grounding_predict_box, teacher_forced_logprobs, Backbone, BackboneDescriptor,
    BackboneKind, DecodeState, GroundingOutput, TokenSequence, EOS_TOKEN,
};
pub use engine::{
    answer_step, evidence_step, native_answer, run_episode, run_episode_observed, AnsReduction, EngineConfig,
    Episode, EpisodeAbort, EpisodeObserver, EpisodeTrace, EpochRecord, Phase,
};
pub use error::{Error, Result};
pub use eval::dataset::{load_dataset, AnswerType, QaRecord, SplitStats};
pub use eval::metrics::{closed_accuracy, open_recall, MetricReport, MetricRow};
pub use eval::tables::{check_result_table, ResultTable};
pub use geometry::{
    crop_and_pad, parse_box_string, serialize_box, BoundingBox, BoxString, Image, ParseFlag, ParsedBox,
};
pub use objectives::{answer_loss, answer_view_loss, box_loss, total_loss, LossValue, LossWeights};
pub use prompt::{ema_update, init_prompt, sgd_step, sync_teacher, OptimizerConfig, PromptRole, SoftPrompt};
