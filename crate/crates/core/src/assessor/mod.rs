//! Aesthetic quality assessment: score distributions, the EMD loss and the
//! assessors that produce them.

mod distribution;
#[cfg(feature = "onnx")]
mod external;
mod proxy;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, FilterId, ImageContext, ParamVector};
use crate::image::{resize, ImageBuffer};

pub use distribution::{emd, emd_gradient, mean_score, ScoreDistribution, BUCKETS};
#[cfg(feature = "onnx")]
pub use external::{ExternalModelAssessor, ExternalModelConfig};
pub use proxy::{ProxyAssessor, ProxyFeatures};

/// Side length of the square image the assessors rate.
pub const ASSESSMENT_SIZE: usize = 224;
/// Step for parameter-space central differences when an assessor exposes
/// no input gradient.
pub const PARAM_FD_STEP: f64 = 1e-2;

/// What an assessor says about one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assessment {
    Distribution { buckets: ScoreDistribution },
    /// Single-output assessors; the loss is `-score`.
    Scalar { score: f64 },
}

impl Assessment {
    pub fn mean_score(&self) -> f64 {
        match self {
            Assessment::Distribution { buckets } => buckets.mean(),
            Assessment::Scalar { score } => *score,
        }
    }

    /// Quality part of the loss against `target`.
    pub fn quality_loss(&self, target: &ScoreDistribution) -> f64 {
        match self {
            Assessment::Distribution { buckets } => emd(buckets, target),
            Assessment::Scalar { score } => -score,
        }
    }

    pub fn distribution(&self) -> Option<&ScoreDistribution> {
        match self {
            Assessment::Distribution { buckets } => Some(buckets),
            Assessment::Scalar { .. } => None,
        }
    }
}

/// A deterministic image rater.
///
/// `assess` takes images at [`ASSESSMENT_SIZE`]; [`QualityAssessor::score`]
/// resizes other inputs first.
pub trait QualityAssessor: Send + Sync {
    fn assess(&self, img: &ImageBuffer) -> Result<Assessment>;

    /// Whether [`QualityAssessor::loss_and_pixel_gradient`] is available.
    fn has_input_gradient(&self) -> bool {
        false
    }

    /// Assessment plus the gradient of the quality loss w.r.t. every sample
    /// of `img` (row-major RGB).
    fn loss_and_pixel_gradient(&self, _img: &ImageBuffer, _target: &ScoreDistribution) -> Result<(Assessment, Vec<f64>)> {
        Err(Error::Assessor("assessor has no input gradient".into()))
    }

    fn score(&self, img: &ImageBuffer) -> Result<Assessment> {
        if img.is_empty() {
            return Err(Error::EmptyInput);
        }
        if img.width() == ASSESSMENT_SIZE && img.height() == ASSESSMENT_SIZE {
            self.assess(img)
        } else {
            self.assess(&resize(img, ASSESSMENT_SIZE, ASSESSMENT_SIZE)?)
        }
    }
}

/// Which assessor to build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssessorKind {
    Proxy,
    ExternalModel {
        path: PathBuf,
        #[serde(default = "default_mean")]
        mean: [f32; 3],
        #[serde(default = "default_std")]
        std: [f32; 3],
    },
}

fn default_mean() -> [f32; 3] {
    [0.485, 0.456, 0.406]
}

fn default_std() -> [f32; 3] {
    [0.229, 0.224, 0.225]
}

impl AssessorKind {
    pub fn external(path: impl Into<PathBuf>) -> Self {
        AssessorKind::ExternalModel {
            path: path.into(),
            mean: default_mean(),
            std: default_std(),
        }
    }

    /// Parse `proxy` or `model:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec == "proxy" {
            Ok(AssessorKind::Proxy)
        } else if let Some(path) = spec.strip_prefix("model:") {
            Ok(AssessorKind::external(path))
        } else {
            Err(Error::InvalidConfig(format!("unknown assessor `{spec}` (expected proxy or model:<path>)")))
        }
    }

    /// Build a fresh assessor. Every call loads its own inference context.
    pub fn build(&self) -> Result<Box<dyn QualityAssessor>> {
        match self {
            AssessorKind::Proxy => Ok(Box::new(ProxyAssessor)),
            #[cfg(feature = "onnx")]
            AssessorKind::ExternalModel { path, mean, std } => Ok(Box::new(ExternalModelAssessor::load(
                &ExternalModelConfig {
                    path: path.clone(),
                    mean: *mean,
                    std: *std,
                },
            )?)),
            #[cfg(not(feature = "onnx"))]
            AssessorKind::ExternalModel { .. } => {
                Err(Error::AssessorLoad("built without the `onnx` feature".into()))
            }
        }
    }
}

/// Gradient of `L = L_QA(assess(apply(img, K))) + gamma * sum k^2` with
/// respect to the eight intensities. Fixed intensities get exactly zero.
///
/// Differentiable assessors are chained through the filter Jacobian; the
/// others fall back to central differences in parameter space
/// ([`PARAM_FD_STEP`], 16 evaluations).
pub fn loss_gradient_wrt_params(
    assessor: &dyn QualityAssessor,
    img: &ImageBuffer,
    params: &ParamVector,
    ctx: &ImageContext,
    gamma: f64,
    target: &ScoreDistribution,
) -> Result<[f64; 8]> {
    let mut grad = if assessor.has_input_gradient() {
        filters::pullback(img, params, ctx, |filtered| {
            assessor.loss_and_pixel_gradient(filtered, target).map(|(_, g)| g)
        })?
    } else {
        parameter_space_gradient(assessor, img, params, ctx, target)?
    };

    for id in FilterId::ALL {
        let i = id.index();
        grad[i] = if params.is_fixed(id) {
            0.0
        } else {
            grad[i] + gamma * 2.0 * params.get(id)
        };
    }
    Ok(grad)
}

fn parameter_space_gradient(
    assessor: &dyn QualityAssessor,
    img: &ImageBuffer,
    params: &ParamVector,
    ctx: &ImageContext,
    target: &ScoreDistribution,
) -> Result<[f64; 8]> {
    let mut grad = [0.0; 8];
    for id in FilterId::ALL {
        if params.is_fixed(id) {
            continue;
        }
        let base = params.get(id);
        let (lo, hi) = id.bounds();
        let (kp, km) = ((base + PARAM_FD_STEP).min(hi), (base - PARAM_FD_STEP).max(lo));
        let mut probe = *params;
        probe.set(id, kp)?;
        let plus = assessor.assess(&filters::apply(img, &probe, ctx)?)?.quality_loss(target);
        probe.set(id, km)?;
        let minus = assessor.assess(&filters::apply(img, &probe, ctx)?)?.quality_loss(target);
        grad[id.index()] = (plus - minus) / (kp - km);
    }
    Ok(grad)
}
