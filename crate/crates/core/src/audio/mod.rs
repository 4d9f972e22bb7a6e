//! Local substitutes for a pretrained speech stack: log-mel analysis,
//! discrete units, speaker embedding and the conditioning feature encoder.

pub mod dsp;
pub mod encoder;
pub mod speaker;
pub mod units;

pub use dsp::{stft_mel, synth_waveform, MelSpectrogram, Waveform, LOG_FLOOR, MEL_BINS};
pub use encoder::{encode_audio, encode_frames, AudioEncoder, AudioFeatureSeq, EncoderMode, DEFAULT_FEATURE_DIM};
pub use speaker::{SpeakerEmbedder, SpeakerEmbedding, SPEAKER_DIM};
pub use units::{fit_unit_codebook, quantize_units, SpeechUnits, UnitCodebook};
