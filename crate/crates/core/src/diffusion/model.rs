//! Transformer-decoder denoiser predicting clean expression sequences.

use lipcycle_grad::nn::{alibi_bias, sinusoidal_embedding, LayerNorm, Linear, MultiHeadAttention};
use lipcycle_grad::{Bound, Graph, Mat, ParamId, ParamSet, Var};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioEncoder, AudioFeatureSeq, EncoderMode, DEFAULT_FEATURE_DIM};
use crate::corpus::Lineage;
use crate::error::{invalid, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    /// Model width `f`.
    pub dim: usize,
    /// Width of the audio features fed to the cross-attention.
    pub audio_dim: usize,
    /// Diffusion step count `D`.
    pub steps: usize,
    pub cond_dropout: f64,
    pub w_m2s: f64,
    pub with_m2s: bool,
    pub encoder_mode: EncoderMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            audio_dim: DEFAULT_FEATURE_DIM,
            steps: 100,
            cond_dropout: 0.2,
            w_m2s: 0.02,
            with_m2s: true,
            encoder_mode: EncoderMode::Frozen,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(invalid!("diffusion.layers must be positive"));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid!(
                "diffusion.dim ({}) must be a positive multiple of diffusion.heads ({})",
                self.dim,
                self.heads
            ));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(invalid!("diffusion.dim must be even for the timestep embedding"));
        }
        if self.audio_dim == 0 {
            return Err(invalid!("diffusion.audio_dim must be positive"));
        }
        if self.steps == 0 {
            return Err(invalid!("diffusion.steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(invalid!("diffusion.cond_dropout must lie in [0, 1], got {}", self.cond_dropout));
        }
        if !(self.w_m2s >= 0.0 && self.w_m2s.is_finite()) {
            return Err(invalid!("diffusion.w_m2s must be non-negative, got {}", self.w_m2s));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct Net {
    in_x: Linear,
    in_audio: Linear,
    in_step: Linear,
    null: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    out: Linear,
}

/// Per-channel z-normalization of expression parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Mat,
    pub std: Mat,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Mat::zeros((1, dim)),
            std: Mat::ones((1, dim)),
        }
    }

    /// Pooled per-channel statistics, std floored at 1e-4.
    pub fn fit(sequences: &[&Mat]) -> Result<Self> {
        let n: usize = sequences.iter().map(|s| s.nrows()).sum();
        if n < 2 {
            return Err(invalid!("normalization needs at least 2 frames"));
        }
        let d = sequences[0].ncols();
        let mut mean = Mat::zeros((1, d));
        for s in sequences {
            mean += &s.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        }
        mean /= n as f64;
        let mut var = Mat::zeros((1, d));
        for s in sequences {
            for row in s.rows() {
                for j in 0..d {
                    var[[0, j]] += (row[j] - mean[[0, j]]).powi(2);
                }
            }
        }
        Ok(Self {
            mean,
            std: (var / n as f64).mapv(|v| v.sqrt().max(1e-4)),
        })
    }

    pub fn normalize(&self, x: &Mat) -> Mat {
        (x - &self.mean) / &self.std
    }

    pub fn denormalize(&self, z: &Mat) -> Mat {
        z * &self.std + &self.mean
    }

    pub fn denormalize_var(&self, g: &mut Graph, z: Var) -> Var {
        let s = g.constant(self.std.clone());
        let m = g.constant(self.mean.clone());
        let y = g.mul_row(z, s);
        g.add_row(y, m)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    /// `|psi| + 3`.
    pub param_dim: usize,
    pub params: ParamSet,
    pub norm: Normalization,
    pub encoder: AudioEncoder,
    pub lineage: Option<Lineage>,
    net: Net,
}

/// Cross-attention mask: query `t` sees audio position `t` and the trailing
/// timestep position only.
pub fn cross_mask(t: usize) -> Mat {
    Mat::from_shape_fn((t, t + 1), |(i, j)| if j == i || j == t { 0.0 } else { f64::NEG_INFINITY })
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, param_dim: usize, encoder: AudioEncoder, seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.feature_dim != config.audio_dim {
            return Err(invalid!(
                "audio encoder width {} does not match diffusion.audio_dim {}",
                encoder.feature_dim,
                config.audio_dim
            ));
        }
        if param_dim < 4 {
            return Err(invalid!("expression width {param_dim} is too small"));
        }
        let mut r = seed::rng(seed::stream_seed(seed, "denoiser-init"));
        let mut ps = ParamSet::new();
        let f = config.dim;
        let in_x = Linear::new(&mut ps, "den.in_x", param_dim, f, &mut r);
        let in_audio = Linear::new(&mut ps, "den.in_audio", config.audio_dim, f, &mut r);
        let in_step = Linear::new(&mut ps, "den.in_step", f, f, &mut r);
        let null = ps.normal("den.null", 1, f, 0.02, &mut r);
        let layers = (0..config.layers)
            .map(|l| {
                let n = format!("den.layer{l}");
                DecoderLayer {
                    ln_self: LayerNorm::new(&mut ps, &format!("{n}.ln_self"), f),
                    self_attn: MultiHeadAttention::new(&mut ps, &format!("{n}.self"), f, config.heads, &mut r),
                    ln_cross: LayerNorm::new(&mut ps, &format!("{n}.ln_cross"), f),
                    cross_attn: MultiHeadAttention::new(&mut ps, &format!("{n}.cross"), f, config.heads, &mut r),
                    ln_ff: LayerNorm::new(&mut ps, &format!("{n}.ln_ff"), f),
                    ff_in: Linear::new(&mut ps, &format!("{n}.ff_in"), f, 2 * f, &mut r),
                    ff_out: Linear::new(&mut ps, &format!("{n}.ff_out"), 2 * f, f, &mut r),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(&mut ps, "den.ln_out", f);
        let out = Linear::new(&mut ps, "den.out", f, param_dim, &mut r);
        Ok(Self {
            norm: Normalization::identity(param_dim),
            param_dim,
            params: ps,
            encoder,
            lineage: None,
            net: Net {
                in_x,
                in_audio,
                in_step,
                null,
                layers,
                ln_out,
                out,
            },
            config,
        })
    }

    pub fn null_id(&self) -> ParamId {
        self.net.null
    }

    /// Graph forward in normalized space. `cond = None` is the null condition.
    pub fn forward(&self, g: &mut Graph, p: &Bound, noisy: Var, d: usize, cond: Option<Var>) -> Result<Var> {
        let (t, w) = g.shape(noisy);
        if w != self.param_dim {
            return Err(invalid!("noisy sequence has {w} channels, expected {}", self.param_dim));
        }
        if t == 0 {
            return Err(invalid!("noisy sequence is empty"));
        }
        if d == 0 || d > self.config.steps {
            return Err(invalid!("diffusion step {d} outside [1, {}]", self.config.steps));
        }
        let n = &self.net;
        let audio = match cond {
            Some(c) => {
                let (tc, wc) = g.shape(c);
                if tc != t {
                    return Err(invalid!("audio features have {tc} frames but the sequence has {t}"));
                }
                if wc != self.config.audio_dim {
                    return Err(invalid!("audio features have {wc} channels, expected {}", self.config.audio_dim));
                }
                n.in_audio.forward(g, p, c)
            }
            None => g.repeat_row(p[n.null], t),
        };
        let step = g.constant(sinusoidal_embedding(d, self.config.dim));
        let step = n.in_step.forward(g, p, step);
        let memory = g.concat_rows(&[audio, step]);

        let self_bias = alibi_bias(t, self.config.heads);
        let mask = [cross_mask(t)];
        let mut h = n.in_x.forward(g, p, noisy);
        for l in &n.layers {
            let a = l.ln_self.forward(g, p, h);
            let a = l.self_attn.forward(g, p, a, a, &self_bias);
            h = g.add(h, a);
            let c = l.ln_cross.forward(g, p, h);
            let c = l.cross_attn.forward(g, p, c, memory, &mask);
            h = g.add(h, c);
            let f = l.ln_ff.forward(g, p, h);
            let f = l.ff_in.forward(g, p, f);
            let f = g.gelu(f);
            let f = l.ff_out.forward(g, p, f);
            h = g.add(h, f);
        }
        let h = n.ln_out.forward(g, p, h);
        Ok(n.out.forward(g, p, h))
    }

    /// Audio features of a mel through this model's encoder.
    pub fn encode(&self, mel: &Mat) -> Result<AudioFeatureSeq> {
        crate::audio::encode_frames(mel, &self.encoder)
    }
}

/// Predicted clean sequence (normalized space) for one noisy input.
pub fn denoise(model: &DenoiserModel, noisy: &Mat, d: usize, cond: Option<&AudioFeatureSeq>) -> Result<Mat> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(noisy.clone());
    let c = cond.map(|c| g.constant(c.feats.clone()));
    let out = model.forward(&mut g, &p, x, d, c)?;
    Ok(g.value(out).clone())
}
