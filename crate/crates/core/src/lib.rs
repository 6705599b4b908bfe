//! Reasoning-augmented reprompting on a toy text-to-image stand-in.
//!
//! A log-linear policy reads a templated user prompt and writes
//! `<reason> H </reason> <prompt> P' </prompt>`. The enhanced prompt `P'` is
//! rendered by a frozen, deterministic [`synthesizer`] into a grid scene,
//! scored by the ensemble [`rewards`], and the policy is trained by
//! supervised warm start ([`sft`]) followed by [`grpo`].

pub mod config;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod grpo;
pub mod io;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod sft;
pub mod synthesizer;
pub mod variance;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{EvalReport, Pathway};
pub use grammar::{PromptSpec, TaskCategory, TokenId, UserPrompt, Vocabulary};
pub use grpo::{GrpoConfig, GroupSample, TrainLogRecord};
pub use policy::{PolicyParams, Trajectory};
pub use rewards::{ParsedOutput, RewardBreakdown, RewardConfig, RewardContext, RewardNormalizer};
pub use synthesizer::{Scene, SceneObject};
pub use variance::VarianceReport;
