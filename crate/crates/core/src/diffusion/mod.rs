//! Audio-conditioned diffusion over expression-parameter sequences.

pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use model::{cross_mask, denoise, DenoiserConfig, DenoiserModel, Normalization};
pub use sample::{sample, SampleConfig};
pub use schedule::{make_linear_schedule, noising, velocity, NoiseSchedule};
pub use train::{
    fit_thunder, reconstruction_loss, thunder_loss_var, thunder_samples, train_thunder, LossContext,
    ThunderHistory, ThunderLossVars, ThunderSample, ThunderTrainOptions,
};

#[cfg(test)]
pub(crate) mod testutil {
    use std::rc::Rc;

    use super::{DenoiserConfig, DenoiserModel};
    use crate::audio::{AudioEncoder, EncoderMode, SpeakerEmbedding, MEL_BINS, SPEAKER_DIM};
    use crate::diffusion::ThunderSample;
    use crate::face::{make_synthetic_template, FaceTemplate};
    use crate::m2s::{InputSpace, M2SConfig, M2SModel};
    use crate::seed;

    pub fn tiny_template() -> Rc<FaceTemplate> {
        Rc::new(make_synthetic_template(4, 120, 8).unwrap())
    }

    pub fn tiny_model(tpl: &FaceTemplate, with_m2s: bool, mode: EncoderMode) -> DenoiserModel {
        let cfg = DenoiserConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            audio_dim: 6,
            steps: 10,
            with_m2s,
            encoder_mode: mode,
            ..Default::default()
        };
        DenoiserModel::new(cfg, tpl.param_dim(), AudioEncoder::new(1, 6, mode), 3).unwrap()
    }

    pub fn tiny_m2s(tpl: &FaceTemplate) -> M2SModel {
        let mut cfg = M2SConfig::new(InputSpace::Mouth, tpl, 4);
        cfg.hidden = 8;
        cfg.heads = 2;
        cfg.blocks = 1;
        cfg.kernel = 3;
        M2SModel::new(cfg, 5).unwrap()
    }

    pub fn tiny_samples(tpl: &FaceTemplate, n: usize, frames: usize, seed_value: u64) -> Vec<ThunderSample> {
        let mut r = seed::rng(seed_value);
        (0..n)
            .map(|i| {
                let mut spk = vec![0.0; SPEAKER_DIM];
                spk[i % SPEAKER_DIM] = 1.0;
                let mel = seed::standard_normal(&mut r, 2 * frames, MEL_BINS) - 3.0;
                ThunderSample {
                    expressions: seed::standard_normal(&mut r, frames, tpl.param_dim()) * 0.3,
                    mel: mel.mapv(|v| v.max(-10.0)),
                    units: (0..2 * frames).map(|t| (t / 3 + i) % 4).collect(),
                    speaker: SpeakerEmbedding { vec: spk },
                }
            })
            .collect()
    }
}
