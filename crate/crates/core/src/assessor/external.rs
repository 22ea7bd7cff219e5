//! Adapter for aesthetic models stored as ONNX graphs.
//!
//! Expected signature: one `1x3x224x224` float input (NCHW, channels
//! normalised as `(v - mean) / std`) and either ten logits, which are
//! softmax-normalised into a [`ScoreDistribution`], or a single scalar score.

use std::path::PathBuf;
use std::sync::Arc;

use tract_onnx::prelude::*;

use super::distribution::{ScoreDistribution, BUCKETS};
use super::{Assessment, QualityAssessor, ASSESSMENT_SIZE};
use crate::error::{Error, Result};
use crate::image::{resize, ImageBuffer};

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalModelConfig {
    pub path: PathBuf,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

type Plan = Arc<TypedRunnableModel>;

/// One loaded inference context. Build one per session.
pub struct ExternalModelAssessor {
    plan: Plan,
    mean: [f32; 3],
    std: [f32; 3],
}

impl std::fmt::Debug for ExternalModelAssessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalModelAssessor").field("mean", &self.mean).field("std", &self.std).finish()
    }
}

fn load_err(e: impl std::fmt::Display) -> Error {
    Error::AssessorLoad(e.to_string())
}

impl ExternalModelAssessor {
    pub fn load(cfg: &ExternalModelConfig) -> Result<Self> {
        if cfg.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::AssessorLoad("normalisation std must be positive".into()));
        }
        let shape = [1, 3, ASSESSMENT_SIZE, ASSESSMENT_SIZE];
        let plan = tract_onnx::onnx()
            .model_for_path(&cfg.path)
            .and_then(|m| m.with_input_fact(0, f32::fact(shape).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(load_err)?;
        Ok(ExternalModelAssessor {
            plan,
            mean: cfg.mean,
            std: cfg.std,
        })
    }

    fn input_tensor(&self, img: &ImageBuffer) -> Result<Tensor> {
        let plane = img.pixel_count();
        let mut data = vec![0f32; plane * 3];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = (px[c] as f32 - self.mean[c]) / self.std[c];
            }
        }
        Tensor::from_shape(&[1, 3, img.height(), img.width()], &data).map_err(|e| Error::Assessor(e.to_string()))
    }
}

fn softmax(logits: &[f32]) -> [f64; BUCKETS] {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut w = [0.0; BUCKETS];
    for (o, &l) in w.iter_mut().zip(logits) {
        *o = (l as f64 - max).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

impl QualityAssessor for ExternalModelAssessor {
    fn assess(&self, img: &ImageBuffer) -> Result<Assessment> {
        let resized;
        let img = if img.width() == ASSESSMENT_SIZE && img.height() == ASSESSMENT_SIZE {
            img
        } else {
            resized = resize(img, ASSESSMENT_SIZE, ASSESSMENT_SIZE)?;
            &resized
        };
        let input = self.input_tensor(img)?;
        let outputs = self.plan.run(tvec!(input.into())).map_err(|e| Error::Assessor(e.to_string()))?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(|e| Error::Assessor(e.to_string()))?;
        let values: Vec<f32> = view.iter().copied().collect();
        match values.len() {
            BUCKETS => Ok(Assessment::Distribution {
                buckets: ScoreDistribution::new(softmax(&values))?,
            }),
            1 => Ok(Assessment::Scalar { score: values[0] as f64 }),
            n => Err(Error::Assessor(format!("model produced {n} outputs, expected {BUCKETS} or 1"))),
        }
    }
}
