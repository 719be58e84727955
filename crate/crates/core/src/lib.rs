//! Component attribution, amplification and activation patching for GPT-2
//! style decoders on bracket-completion and arithmetic tasks.
//!
//! The pipeline: generate a task suite ([`tasks`]), run the decomposed
//! forward pass ([`engine`]), score every attention head and FF neuron by
//! projecting its contribution onto the vocabulary ([`attribution`]), rank
//! them ([`ranking`]), amplify the top components ([`steering`]), and
//! cross-check with activation patching ([`patching`]).

pub mod attribution;
pub mod engine;
pub mod error;
pub mod harness;
pub mod numerics;
mod par;
pub mod patching;
pub mod pipeline;
pub mod ranking;
pub mod steering;
pub mod tasks;
pub mod tokenizer;
pub mod weights;

pub use engine::{ActivationPatch, Capture, ComponentId, ForwardOptions, Model, SteerPlan, Trace};
pub use error::{Error, Result};
pub use numerics::Matrix;
pub use tokenizer::{AnswerTokenSet, TokenId, Tokenizer};
pub use weights::{ModelConfig, Weights};
