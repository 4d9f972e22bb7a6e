//! Statistics-based speaker embedding.

use lipcycle_grad::Mat;
use serde::{Deserialize, Serialize};

use super::dsp::{MelSpectrogram, MEL_BINS};
use crate::error::{invalid, Error, Result};
use crate::seed;

pub const SPEAKER_DIM: usize = 16;
pub const STATS_DIM: usize = 2 * MEL_BINS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vec: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        self.vec.iter().zip(&other.vec).map(|(a, b)| a * b).sum()
    }

    pub fn as_row(&self) -> Mat {
        Mat::from_shape_vec((1, self.vec.len()), self.vec.clone()).expect("row shape")
    }
}

/// Mean and population std per bin. Each column is sorted before summing so
/// the result does not depend on frame order, bit for bit.
pub fn mel_statistics(frames: &Mat) -> Result<Vec<f64>> {
    let t = frames.nrows();
    if t < 2 {
        return Err(invalid!("speaker statistics need at least 2 frames, got {t}"));
    }
    let mut stats = vec![0.0; 2 * frames.ncols()];
    for (j, col) in frames.columns().into_iter().enumerate() {
        let mut v = col.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / t as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
        stats[j] = mean;
        stats[frames.ncols() + j] = var.sqrt();
    }
    Ok(stats)
}

/// Fixed seeded `160 -> 16` projection of mel statistics, measured relative
/// to a background statistics vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedder {
    pub projection: Mat,
    pub background: Vec<f64>,
}

impl SpeakerEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut r = seed::rng(seed::stream_seed(seed, "speaker-projection"));
        let projection = seed::standard_normal(&mut r, STATS_DIM, SPEAKER_DIM) / (STATS_DIM as f64).sqrt();
        Self {
            projection,
            background: vec![0.0; STATS_DIM],
        }
    }

    /// Sets the background to the statistics of all given frames pooled.
    pub fn with_background(mut self, mels: &[&MelSpectrogram]) -> Result<Self> {
        let total: usize = mels.iter().map(|m| m.len()).sum();
        let mut pooled = Mat::zeros((total, MEL_BINS));
        let mut at = 0;
        for m in mels {
            pooled.slice_mut(ndarray::s![at..at + m.len(), ..]).assign(&m.frames);
            at += m.len();
        }
        self.background = mel_statistics(&pooled)?;
        Ok(self)
    }

    pub fn embed(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        self.embed_frames(&mel.frames)
    }

    pub fn embed_frames(&self, frames: &Mat) -> Result<SpeakerEmbedding> {
        if frames.ncols() != MEL_BINS {
            return Err(invalid!("speaker embedding expects {MEL_BINS} bins, got {}", frames.ncols()));
        }
        let stats = mel_statistics(frames)?;
        let mut out = vec![0.0; SPEAKER_DIM];
        for (i, s) in stats.iter().enumerate() {
            let c = s - self.background[i];
            for (o, p) in out.iter_mut().zip(self.projection.row(i)) {
                *o += c * p;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateInput(
                "mel statistics coincide with the background; embedding undefined".into(),
            ));
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Ok(SpeakerEmbedding { vec: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn random_mel(seed: u64, t: usize) -> MelSpectrogram {
        let mut r = seed::rng(seed);
        MelSpectrogram::new(seed::standard_normal(&mut r, t, MEL_BINS)).unwrap()
    }

    #[test]
    fn reversed_frames_embed_identically() {
        let e = SpeakerEmbedder::new(1);
        let m = random_mel(3, 40);
        let rev = MelSpectrogram::new(m.frames.slice(s![..;-1, ..]).to_owned()).unwrap();
        assert_eq!(e.embed(&m).unwrap(), e.embed(&rev).unwrap());
    }

    #[test]
    fn embedding_has_unit_norm() {
        let e = SpeakerEmbedder::new(2)
            .with_background(&[&random_mel(5, 20)])
            .unwrap();
        for k in 0..10 {
            let v = e.embed(&random_mel(10 + k, 30)).unwrap();
            let n: f64 = v.vec.iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn statistics_match_direct_formulas() {
        let m = random_mel(8, 12);
        let st = mel_statistics(&m.frames).unwrap();
        for j in 0..MEL_BINS {
            let col: Vec<f64> = m.frames.column(j).to_vec();
            let mean = col.iter().sum::<f64>() / 12.0;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0).sqrt();
            assert!((st[j] - mean).abs() < 1e-12);
            assert!((st[MEL_BINS + j] - sd).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_is_rejected() {
        let e = SpeakerEmbedder::new(0);
        assert!(e.embed_frames(&Mat::zeros((1, MEL_BINS))).is_err());
    }
}
