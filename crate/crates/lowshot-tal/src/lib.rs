//! Low-shot temporal action localization on pre-extracted video features.
//!
//! The pipeline detects *where* actions happen with a category-agnostic
//! localizer (a multi-scale transformer pyramid over RGB and optical-flow
//! features, plus actionness/offset heads), and decides *what* they are with
//! an open-vocabulary classifier built by prompting a frozen text encoder.
//! RGB, Flow, and Text embeddings are pulled into one shared space with an
//! InfoNCE objective so that novel categories — never seen in training —
//! can be recognized zero-shot from their names and descriptions, or
//! few-shot from a handful of support videos.
//!
//! Encoders are deliberately frozen: only the pyramid, the detection heads,
//! the prompt module, and the cross-modal aligners train. Feature files are
//! raw little-endian f32 matrices so that genuine pretrained features drop
//! in without code changes; [`synthdata`] generates deterministic synthetic
//! datasets at desk scale for end-to-end verification.
//!
//! See the `book/` guide for a narrative walkthrough, and the `lowshot-tal`
//! binary for the command-line pipeline (`gen-data`, `split`, `train`,
//! `adapt`, `infer`, `eval`, `check-descriptions`).

pub mod alignment;
pub mod checkpoint;
pub mod classifiers;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod localizer;
pub mod params;
pub mod pipeline;
pub mod pyramid;
pub mod synthdata;
pub mod training;

pub use config::Config;
pub use data::{ActionInstance, SplitSpec, VideoFeatures};
pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod fdcheck;
