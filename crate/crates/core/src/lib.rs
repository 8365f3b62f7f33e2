//! Grounded visual reasoning primitives.
//!
//! The crate covers the replay path of a grounded-reasoning multimodal model
//! (AnyRes feature pools, `<sot>…<eot>` signal parsing, region replay and SFT
//! sequence assembly), the auxiliary box-regression loss, and the tooling
//! that curates grounded reasoning data by rejection sampling.
//!
//! Trained components are replaced by small traits ([`CropEncoder`],
//! [`Generator`], [`JudgeClient`]) with deterministic implementations so every
//! path can be verified exactly.

pub mod datakit;
pub mod det_loss;
pub mod feature_pool;
pub mod geometry;
pub mod replay_engine;
pub mod replay_parser;

pub use datakit::{JudgeClient, SampleRecord};
pub use det_loss::{det_loss, giou_loss, l1_loss, DetectionHead, LossValue};
pub use feature_pool::{
    build_pool, replay_tokens, select_grid, token_budget, BudgetReport, CropEncoder, FeaturePool,
    GridSpec, PoolingConfig, TokenGrid, TokenSequence,
};
pub use geometry::{CellRange, CenterBox, ImageFrame, PixelBox};
pub use replay_engine::{Generator, ReplayPolicy, SftSequence, Transcript};
pub use replay_parser::{ReplaySignal, SignalParser, StreamEvent};
