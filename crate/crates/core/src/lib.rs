//! Interactive, gradient-driven photo enhancement.
//!
//! A small vector of filter intensities ([`ParamVector`]) is applied to an
//! image by a differentiable filter pipeline, the result is rated by a
//! [`QualityAssessor`], and projected Nesterov descent moves the intensities
//! towards a higher aesthetic score. Users may set, fix or override any
//! intensity between iterations.

pub mod api;
pub mod assessor;
mod error;
pub mod filters;
pub mod image;
pub mod metrics;
pub mod normalization;
pub mod optimizer;
pub mod session;
pub mod stats;

pub use crate::assessor::{emd, mean_score, Assessment, AssessorKind, QualityAssessor, ScoreDistribution};
pub use crate::error::{Error, Result};
pub use crate::filters::{FilterId, ImageContext, ParamVector};
pub use crate::image::ImageBuffer;
pub use crate::normalization::{AbnAction, AbnConfig, AbnReport};
pub use crate::optimizer::{IterationRecord, OptimizerConfig, Observer, OptimizerState, ParamEdit, StopReason};
pub use crate::session::{Session, SessionOptions, Status};
