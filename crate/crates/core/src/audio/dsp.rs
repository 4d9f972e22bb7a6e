//! Waveforms, log-mel analysis and a sinusoid-bank resynthesis.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use lipcycle_grad::Mat;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP: usize = 320;
pub const WINDOW: usize = 640;
pub const MEL_BINS: usize = 80;
pub const MEL_FPS: u32 = 50;
pub const LOG_FLOOR: f64 = -10.0;
const F_MAX: f64 = 8000.0;
const SPEC_BINS: usize = WINDOW / 2 + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < HOP {
            return Err(invalid!(
                "waveform has {} samples, need at least one hop ({HOP})",
                samples.len()
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(invalid!("sample {i} is {} (must be finite and within [-1, 1])", samples[i]));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }
}

/// Log-mel frames at 50 Hz, `T50 x 80`, never below [`LOG_FLOOR`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub frames: Mat,
}

impl MelSpectrogram {
    pub fn new(frames: Mat) -> Result<Self> {
        let (t, bins) = frames.dim();
        if bins != MEL_BINS {
            return Err(invalid!("mel has {bins} bins, expected {MEL_BINS}"));
        }
        if t < 2 || t % 2 != 0 {
            return Err(invalid!("mel length {t} must be even and at least 2"));
        }
        if frames.iter().any(|v| !v.is_finite() || *v < LOG_FLOOR) {
            return Err(invalid!("mel values must be finite and at least {LOG_FLOOR}"));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Number of 25 fps animation frames this mel pairs with.
    pub fn animation_frames(&self) -> usize {
        self.len() / 2
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// The 82 corner frequencies of the filterbank; band `b` spans `[c[b], c[b+2]]`
/// and peaks at `c[b+1]`.
fn corner_frequencies() -> Vec<f64> {
    let top = hz_to_mel(F_MAX);
    (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BINS + 1) as f64))
        .collect()
}

pub fn band_center_frequencies() -> Vec<f64> {
    corner_frequencies()[1..=MEL_BINS].to_vec()
}

struct Analysis {
    window: Vec<f64>,
    window_energy: f64,
    filters: Mat,
    fft: Arc<dyn Fft<f64>>,
}

fn analysis() -> &'static Analysis {
    static CELL: OnceLock<Analysis> = OnceLock::new();
    CELL.get_or_init(|| {
        let window: Vec<f64> = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let window_energy = window.iter().map(|w| w * w).sum();
        let c = corner_frequencies();
        let mut filters = Mat::zeros((SPEC_BINS, MEL_BINS));
        for k in 0..SPEC_BINS {
            let f = k as f64 * SAMPLE_RATE as f64 / WINDOW as f64;
            for b in 0..MEL_BINS {
                let (lo, mid, hi) = (c[b], c[b + 1], c[b + 2]);
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filters[[k, b]] = w;
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(WINDOW);
        Analysis {
            window,
            window_energy,
            filters,
            fft,
        }
    })
}

/// Triangular mel filterbank, `321 x 80`, unnormalized (unit peaks).
pub fn mel_filterbank() -> &'static Mat {
    &analysis().filters
}

/// Number of frames `stft_mel` produces before even truncation.
pub fn raw_frame_count(samples: usize) -> usize {
    samples / HOP + 1
}

/// Window-energy-normalized power spectra, one row per centered frame.
pub fn power_spectrogram(wave: &Waveform) -> Result<Mat> {
    let x = wave.samples();
    if x.len() < WINDOW {
        return Err(invalid!(
            "waveform has {} samples, shorter than one {WINDOW}-sample window",
            x.len()
        ));
    }
    let a = analysis();
    let frames = raw_frame_count(x.len());
    let half = WINDOW as isize / 2;
    let mut out = Mat::zeros((frames, SPEC_BINS));
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    for t in 0..frames {
        let start = (t * HOP) as isize - half;
        for (n, slot) in buf.iter_mut().enumerate() {
            let i = start + n as isize;
            let s = if i >= 0 && (i as usize) < x.len() {
                x[i as usize]
            } else {
                0.0
            };
            *slot = Complex::new(s * a.window[n], 0.0);
        }
        a.fft.process(&mut buf);
        for k in 0..SPEC_BINS {
            out[[t, k]] = buf[k].norm_sqr() / a.window_energy;
        }
    }
    Ok(out)
}

/// Linear mel energies (before the log), truncated to an even frame count.
pub fn mel_energies(wave: &Waveform) -> Result<Mat> {
    let power = power_spectrogram(wave)?;
    let mut mel = power.dot(mel_filterbank());
    let even = mel.nrows() - mel.nrows() % 2;
    mel = mel.slice(ndarray::s![..even, ..]).to_owned();
    Ok(mel)
}

pub fn log_with_floor(e: f64) -> f64 {
    if e > 0.0 {
        e.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

/// Hann-640 / hop-320 STFT, 80 HTK mel bands over 0-8 kHz, natural log with
/// a floor of -10. Frames are centered on multiples of the hop.
pub fn stft_mel(wave: &Waveform) -> Result<MelSpectrogram> {
    let mel = mel_energies(wave)?.mapv(log_with_floor);
    MelSpectrogram::new(mel)
}

/// Sinusoid bank before peak normalization: one oscillator per band at its
/// center frequency, amplitude `exp(log-mel)` interpolated across each hop.
pub fn render_sinusoid_bank(mel: &MelSpectrogram) -> Vec<f64> {
    let t50 = mel.len();
    let n = t50 * HOP;
    let centers = band_center_frequencies();
    let mut out = vec![0.0; n];
    let amps = mel.frames.mapv(f64::exp);
    for (b, f) in centers.iter().enumerate() {
        let w = 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
        for (i, slot) in out.iter_mut().enumerate() {
            let t = i / HOP;
            let frac = (i % HOP) as f64 / HOP as f64;
            let a0 = amps[[t, b]];
            let a1 = amps[[(t + 1).min(t50 - 1), b]];
            *slot += (a0 + (a1 - a0) * frac) * (w * i as f64).sin();
        }
    }
    out
}

/// Audible stand-in for a vocoder, peak-normalized to 0.9.
pub fn synth_waveform(mel: &MelSpectrogram) -> Result<Waveform> {
    let mut raw = render_sinusoid_bank(mel);
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        raw.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(raw)
}

/// 16-bit PCM mono RIFF at 16 kHz.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for s in wave.samples() {
        w.write_sample((s * i16::MAX as f64).round() as i16)
            .map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
