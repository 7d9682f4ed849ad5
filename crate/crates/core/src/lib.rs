//! Dual-adapter multimodal model for multitask crash video analysis.
//!
//! Six tasks are split into a linguistic-centric group (recognition,
//! description, causal and prevention reasoning) and a perception-centric group
//! (crash and pre-crash localization). Each group owns a projector and a
//! low-rank adapter over a frozen backbone; inference runs the linguistic path
//! first and only grounds crashes in time for videos it judged positive.

pub mod datasetkit;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod schema;
pub mod templates;
pub mod tokenizer;
pub mod training;

pub use schema::{group_of, TaskGroup, TaskId};
