//! Procedural sequences: phoneme timelines rendered to expressions and mels.

use lipcycle_grad::Mat;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bank::PhonemeSpec;
use crate::audio::{MelSpectrogram, SpeechUnits, UnitCodebook, LOG_FLOOR, MEL_BINS};
use crate::error::{invalid, Error, Result};
use crate::face::{ExpressionSequence, FaceTemplate};
use crate::seed;

pub const MIN_DURATION: usize = 3;
pub const MAX_DURATION: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub phoneme_ids: Vec<usize>,
    /// Frame counts at 25 fps.
    pub durations: Vec<usize>,
}

impl Utterance {
    pub fn new(phoneme_ids: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        if phoneme_ids.is_empty() || phoneme_ids.len() != durations.len() {
            return Err(invalid!(
                "utterance needs matching non-empty phoneme and duration lists ({} vs {})",
                phoneme_ids.len(),
                durations.len()
            ));
        }
        if let Some(d) = durations.iter().find(|d| !(MIN_DURATION..=MAX_DURATION).contains(*d)) {
            return Err(invalid!("duration {d} outside [{MIN_DURATION}, {MAX_DURATION}]"));
        }
        Ok(Self {
            phoneme_ids,
            durations,
        })
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Phoneme id of every 25 fps frame.
    pub fn frame_phonemes(&self) -> Vec<usize> {
        self.phoneme_ids
            .iter()
            .zip(&self.durations)
            .flat_map(|(p, d)| std::iter::repeat_n(*p, *d))
            .collect()
    }
}

/// Random utterance of total length drawn from `[min_frames, max_frames]`,
/// with no phoneme repeated back to back.
pub fn random_utterance(k: usize, min_frames: usize, max_frames: usize, seed: u64) -> Result<Utterance> {
    if min_frames < MIN_DURATION || min_frames > max_frames || k < 2 {
        return Err(invalid!(
            "cannot draw an utterance with {k} phonemes in [{min_frames}, {max_frames}] frames"
        ));
    }
    let mut r = seed::rng(seed);
    let total = r.random_range(min_frames..=max_frames);
    let mut durations = Vec::new();
    let mut remaining = total;
    while remaining > MAX_DURATION {
        let d = r.random_range(MIN_DURATION..=MAX_DURATION.min(remaining - MIN_DURATION));
        durations.push(d);
        remaining -= d;
    }
    durations.push(remaining);
    let mut ids = Vec::with_capacity(durations.len());
    for _ in 0..durations.len() {
        let prev = ids.last().copied();
        let mut p = r.random_range(0..k);
        while Some(p) == prev {
            p = r.random_range(0..k);
        }
        ids.push(p);
    }
    Utterance::new(ids, durations)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: usize,
    pub split: Split,
    /// Additive log-mel offset per bin.
    pub tilt: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_vertices: usize,
    pub psi_dim: usize,
    pub phonemes: usize,
    pub n_units: usize,
    pub speakers: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub mel_noise: f64,
    pub tilt_norm: f64,
    pub mouth_sigma: f64,
    pub upper_sigma: f64,
    pub upper_amplitude: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_vertices: 300,
            psi_dim: 16,
            phonemes: 8,
            n_units: 8,
            speakers: 4,
            train_sequences: 200,
            val_sequences: 40,
            test_sequences: 40,
            min_frames: 40,
            max_frames: 70,
            mel_noise: 0.1,
            tilt_norm: 2.5,
            mouth_sigma: 1.5,
            upper_sigma: 6.0,
            upper_amplitude: 0.3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(invalid!("corpus.{key}: {why}"));
        if self.n_vertices < 50 {
            return bad("n_vertices", "must be at least 50");
        }
        if self.psi_dim < 8 {
            return bad("psi_dim", "must be at least 8");
        }
        if self.n_units < 2 {
            return bad("n_units", "must be at least 2");
        }
        if self.phonemes < 2 || self.phonemes > self.n_units {
            return bad("phonemes", "must lie in [2, n_units]");
        }
        if self.speakers < 3 {
            return bad("speakers", "need at least 3 so every split has a speaker");
        }
        if self.train_sequences == 0 || self.val_sequences == 0 || self.test_sequences == 0 {
            return bad("train_sequences", "every split needs at least one sequence");
        }
        if self.min_frames < MIN_DURATION || self.min_frames > self.max_frames {
            return bad("min_frames", "must be at least 3 and not above max_frames");
        }
        if !(self.mel_noise >= 0.0 && self.mel_noise.is_finite()) {
            return bad("mel_noise", "must be finite and non-negative");
        }
        if !(self.tilt_norm >= 0.0 && self.tilt_norm.is_finite()) {
            return bad("tilt_norm", "must be finite and non-negative");
        }
        if !(self.mouth_sigma > 0.0 && self.upper_sigma > 0.0) {
            return bad("mouth_sigma", "smoothing widths must be positive");
        }
        if !(self.upper_amplitude >= 0.0 && self.upper_amplitude.is_finite()) {
            return bad("upper_amplitude", "must be finite and non-negative");
        }
        Ok(())
    }

    /// Speakers per split, 70/15/15 rounded with at least one each.
    pub fn speaker_counts(&self) -> [usize; 3] {
        let held = ((0.15 * self.speakers as f64).round() as usize).max(1);
        [self.speakers - 2 * held, held, held]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub expressions: ExpressionSequence,
    pub mel: MelSpectrogram,
    pub units: SpeechUnits,
    pub speaker_id: usize,
    pub utterance: Utterance,
}

impl SequenceRecord {
    pub fn frames(&self) -> usize {
        self.expressions.len()
    }
}

/// Everything a sequence render needs besides the utterance itself.
pub struct SynthContext<'a> {
    pub config: &'a CorpusConfig,
    pub template: &'a FaceTemplate,
    pub phonemes: &'a [PhonemeSpec],
    pub speakers: &'a [SpeakerProfile],
    pub codebook: &'a UnitCodebook,
}

/// Normalized Gaussian taps over `[-4σ, 4σ]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Convolution with edge replication, output length equals input length.
pub fn smooth_replicate(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * x[(t + j as isize - r).clamp(0, n - 1) as usize])
                .sum()
        })
        .collect()
}

/// Smooth noise of unit marginal variance: white noise convolved with a
/// unit-L2 Gaussian kernel.
pub fn smooth_noise(rng: &mut seed::Rng, len: usize, sigma: f64) -> Vec<f64> {
    let mut k = gaussian_kernel(sigma);
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().for_each(|v| *v /= norm);
    let white: Vec<f64> = (0..len + k.len() - 1)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    (0..len)
        .map(|t| k.iter().enumerate().map(|(j, w)| w * white[t + j]).sum())
        .collect()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Noise-free mel of an utterance for one speaker, two rows per frame.
pub fn clean_mel(utt: &Utterance, phonemes: &[PhonemeSpec], tilt: &[f64]) -> Result<Mat> {
    let per_frame = utt.frame_phonemes();
    let mut mel = Mat::zeros((2 * per_frame.len(), MEL_BINS));
    for (t, p) in per_frame.iter().enumerate() {
        let spec = phonemes
            .get(*p)
            .ok_or_else(|| invalid!("phoneme {p} is not in the bank"))?;
        for row in [2 * t, 2 * t + 1] {
            for j in 0..MEL_BINS {
                mel[[row, j]] = round_f32((spec.mel_template[j] + tilt[j]).max(LOG_FLOOR));
            }
        }
    }
    Ok(mel)
}

pub fn synth_sequence(utt: &Utterance, speaker_id: usize, ctx: &SynthContext, seed: u64) -> Result<SequenceRecord> {
    let speaker = ctx
        .speakers
        .iter()
        .find(|s| s.id == speaker_id)
        .ok_or_else(|| Error::NotFound(format!("speaker {speaker_id}")))?;
    let t = utt.frames();
    let template = ctx.template;
    let psi = template.psi_dim();
    let per_frame = utt.frame_phonemes();
    let mut frames = Mat::zeros((t, template.param_dim()));

    let kernel = gaussian_kernel(ctx.config.mouth_sigma);
    let mouth_dims = template.mouth_channels.len();
    for c in 0..=mouth_dims {
        let target: Vec<f64> = per_frame
            .iter()
            .map(|p| ctx.phonemes[*p].viseme[c])
            .collect();
        let col = if c < mouth_dims {
            template.mouth_channels[c]
        } else {
            psi
        };
        for (i, v) in smooth_replicate(&target, &kernel).into_iter().enumerate() {
            frames[[i, col]] = round_f32(v);
        }
    }

    let mut upper_rng = seed::rng(seed::stream_seed(seed, "upper-face"));
    for &c in &template.upper_channels {
        let noise = smooth_noise(&mut upper_rng, t, ctx.config.upper_sigma);
        for (i, v) in noise.into_iter().enumerate() {
            frames[[i, c]] = round_f32(ctx.config.upper_amplitude * v);
        }
    }

    let clean = clean_mel(utt, ctx.phonemes, &speaker.tilt)?;
    let units = crate::audio::units::quantize_frames(&clean, ctx.codebook)?;
    let mut noisy = clean;
    if ctx.config.mel_noise > 0.0 {
        let mut r = seed::rng(seed::stream_seed(seed, "mel-noise"));
        let n = Normal::new(0.0, ctx.config.mel_noise).map_err(|e| invalid!("mel noise: {e}"))?;
        noisy.mapv_inplace(|v| round_f32((v + n.sample(&mut r)).max(LOG_FLOOR)));
    }
    let mel = MelSpectrogram::new(noisy)?;
    Ok(SequenceRecord {
        expressions: ExpressionSequence::new(frames)?,
        mel,
        units,
        speaker_id,
        utterance: utt.clone(),
    })
}

/// Smooth random spectral offset with the requested L2 norm.
pub fn random_tilt(norm: f64, seed: u64) -> Vec<f64> {
    let mut r = seed::rng(seed);
    let slope = r.random_range(-1.0..1.0);
    let wobble = smooth_noise(&mut r, MEL_BINS, 8.0);
    let raw: Vec<f64> = (0..MEL_BINS)
        .map(|j| slope * (j as f64 / (MEL_BINS - 1) as f64 - 0.5) * 2.0 + wobble[j])
        .collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let target = norm * r.random_range(0.8..1.2);
    raw.into_iter().map(|v| round_f32(v * target / n)).collect()
}
