//! Convolutional audio feature encoder, 50 Hz mel to 25 Hz features.

use lipcycle_grad::nn::Conv1d;
use lipcycle_grad::{Bound, Graph, Mat, ParamSet, Var};
use serde::{Deserialize, Serialize};

use super::dsp::{MelSpectrogram, MEL_BINS};
use crate::error::{invalid, Result};
use crate::seed;

pub const DEFAULT_FEATURE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Parameters stay at their seeded initialization.
    Frozen,
    /// Parameters are updated together with the denoiser.
    Trainable,
}

impl std::str::FromStr for EncoderMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(Self::Frozen),
            "trainable" => Ok(Self::Trainable),
            other => Err(format!("unknown encoder mode `{other}` (expected frozen or trainable)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSeq {
    pub feats: Mat,
}

impl AudioFeatureSeq {
    pub fn len(&self) -> usize {
        self.feats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.nrows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub params: ParamSet,
    pub mode: EncoderMode,
    pub feature_dim: usize,
    /// Per-bin input standardization, `1 x 80` each.
    pub mel_mean: Mat,
    pub mel_std: Mat,
    layers: [Conv1d; 3],
}

impl AudioEncoder {
    pub fn new(seed: u64, feature_dim: usize, mode: EncoderMode) -> Self {
        let mut r = seed::rng(seed::stream_seed(seed, "audio-encoder"));
        let mut params = ParamSet::new();
        let layers = [
            Conv1d::new(&mut params, "enc.conv0", MEL_BINS, feature_dim, 4, 2, 1, &mut r),
            Conv1d::new(&mut params, "enc.conv1", feature_dim, feature_dim, 3, 1, 1, &mut r),
            Conv1d::new(&mut params, "enc.conv2", feature_dim, feature_dim, 3, 1, 1, &mut r),
        ];
        Self {
            params,
            mode,
            feature_dim,
            mel_mean: Mat::zeros((1, MEL_BINS)),
            mel_std: Mat::ones((1, MEL_BINS)),
            layers,
        }
    }

    /// Fits the per-bin standardization on pooled frames.
    pub fn with_standardization(mut self, mels: &[&MelSpectrogram]) -> Result<Self> {
        let total: usize = mels.iter().map(|m| m.len()).sum();
        if total < 2 {
            return Err(invalid!("standardization needs at least 2 frames"));
        }
        let mut sum = Mat::zeros((1, MEL_BINS));
        for m in mels {
            sum += &m.frames.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        }
        let mean = sum / total as f64;
        let mut var = Mat::zeros((1, MEL_BINS));
        for m in mels {
            for row in m.frames.rows() {
                for j in 0..MEL_BINS {
                    var[[0, j]] += (row[j] - mean[[0, j]]).powi(2);
                }
            }
        }
        self.mel_std = (var / total as f64).mapv(|v| v.sqrt().max(1e-3));
        self.mel_mean = mean;
        Ok(self)
    }

    pub fn trainable(&self) -> bool {
        self.mode == EncoderMode::Trainable
    }

    pub fn standardize(&self, frames: &Mat) -> Mat {
        (frames - &self.mel_mean) / &self.mel_std
    }

    /// Graph forward over a mel already placed on `g` (raw log-mel values).
    pub fn forward(&self, g: &mut Graph, p: &Bound, mel: &Mat) -> Result<Var> {
        let t = mel.nrows();
        if t < 2 || !t.is_multiple_of(2) {
            return Err(invalid!("mel length {t} must be even and at least 2"));
        }
        if mel.ncols() != MEL_BINS {
            return Err(invalid!("mel has {} bins, expected {MEL_BINS}", mel.ncols()));
        }
        let x = g.constant(self.standardize(mel));
        let h = self.layers[0].forward(g, p, x);
        let h = g.gelu(h);
        let h = self.layers[1].forward(g, p, h);
        let h = g.gelu(h);
        Ok(self.layers[2].forward(g, p, h))
    }
}

pub fn encode_audio(mel: &MelSpectrogram, encoder: &AudioEncoder) -> Result<AudioFeatureSeq> {
    encode_frames(&mel.frames, encoder)
}

pub fn encode_frames(frames: &Mat, encoder: &AudioEncoder) -> Result<AudioFeatureSeq> {
    let mut g = Graph::new();
    let p = encoder.params.bind(&mut g, false);
    let out = encoder.forward(&mut g, &p, frames)?;
    Ok(AudioFeatureSeq {
        feats: g.value(out).clone(),
    })
}
