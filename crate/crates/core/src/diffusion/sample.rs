//! Ancestral x0-renoising sampler with classifier-free guidance.

use serde::{Deserialize, Serialize};

use lipcycle_grad::Mat;

use super::model::{denoise, DenoiserModel};
use super::schedule::NoiseSchedule;
use crate::audio::AudioFeatureSeq;
use crate::error::{invalid, Result};
use crate::face::ExpressionSequence;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Audio guidance scale `s_a`.
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            seed: 0,
        }
    }
}

/// Draws one expression sequence for the given audio features.
pub fn sample(
    model: &DenoiserModel,
    audio: &AudioFeatureSeq,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<ExpressionSequence> {
    if !(cfg.guidance >= 0.0 && cfg.guidance.is_finite()) {
        return Err(invalid!("guidance scale must be non-negative, got {}", cfg.guidance));
    }
    if schedule.steps != model.config.steps {
        return Err(invalid!(
            "schedule has {} steps but the model was trained with {}",
            schedule.steps,
            model.config.steps
        ));
    }
    if audio.is_empty() {
        return Err(invalid!("cannot sample for empty audio"));
    }
    if !model.params.all_finite() {
        return Err(invalid!("denoiser parameters are not finite"));
    }
    let t = audio.len();
    let mut rng = seed::rng(seed::stream_seed(cfg.seed, "sample"));
    let mut x = seed::standard_normal(&mut rng, t, model.param_dim);
    let mut x0 = Mat::zeros((t, model.param_dim));
    for d in (1..=schedule.steps).rev() {
        let cond = denoise(model, &x, d, Some(audio))?;
        x0 = if cfg.guidance == 1.0 {
            cond
        } else {
            let uncond = denoise(model, &x, d, None)?;
            cond * cfg.guidance + uncond * (1.0 - cfg.guidance)
        };
        if d > 1 {
            let a = schedule.alpha[d - 1];
            let eps = seed::standard_normal(&mut rng, t, model.param_dim);
            x = &x0 * a.sqrt() + eps * (1.0 - a).sqrt();
        }
    }
    ExpressionSequence::new(model.norm.denormalize(&x0))
}
