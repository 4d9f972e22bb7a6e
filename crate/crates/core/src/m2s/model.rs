//! Mesh-to-speech network: 25 fps facial input to 50 Hz mel and unit logits.

use std::rc::Rc;

use lipcycle_grad::nn::{alibi_bias, Conv1d, DepthwiseConv1d, LayerNorm, Linear, MultiHeadAttention};
use lipcycle_grad::{Bound, Graph, Mat, ParamSet, Var};
use serde::{Deserialize, Serialize};

use crate::audio::{SpeakerEmbedding, MEL_BINS, SPEAKER_DIM};
use crate::corpus::Lineage;
use crate::error::{invalid, Result};
use crate::face::{decode_rows, decode_var, FaceTemplate};
use crate::seed;

pub const W_MEL: f64 = 10.0;
pub const W_UNIT: f64 = 1.0;

/// What the network sees of the face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSpace {
    /// Flattened coordinates of the mouth vertices.
    Mouth,
    /// Flattened coordinates of every vertex.
    Face,
    /// Raw expression parameters.
    Exp,
}

impl InputSpace {
    pub fn dim(self, template: &FaceTemplate) -> usize {
        match self {
            InputSpace::Mouth => 3 * template.mouth_idx.len(),
            InputSpace::Face => 3 * template.num_vertices(),
            InputSpace::Exp => template.param_dim(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputSpace::Mouth => "mouth",
            InputSpace::Face => "face",
            InputSpace::Exp => "exp",
        }
    }
}

impl std::str::FromStr for InputSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mouth" => Ok(Self::Mouth),
            "face" => Ok(Self::Face),
            "exp" => Ok(Self::Exp),
            other => Err(format!("unknown input space `{other}` (expected mouth, face or exp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct M2SConfig {
    pub input_space: InputSpace,
    pub input_dim: usize,
    pub n_units: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub kernel: usize,
}

impl M2SConfig {
    pub fn new(input_space: InputSpace, template: &FaceTemplate, n_units: usize) -> Self {
        Self {
            input_space,
            input_dim: input_space.dim(template),
            n_units,
            hidden: 96,
            blocks: 2,
            heads: 4,
            kernel: 5,
        }
    }

    pub fn validate(&self, template: &FaceTemplate) -> Result<()> {
        if self.input_dim != self.input_space.dim(template) {
            return Err(invalid!(
                "m2s input_dim {} does not match {} space of the template ({})",
                self.input_dim,
                self.input_space.name(),
                self.input_space.dim(template)
            ));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid!("m2s.hidden ({}) must be a positive multiple of m2s.heads ({})", self.hidden, self.heads));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid!("m2s.kernel must be odd, got {}", self.kernel));
        }
        if self.n_units < 2 {
            return Err(invalid!("m2s needs at least 2 units"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConformerBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_conv: LayerNorm,
    pw_in: Linear,
    dw: DepthwiseConv1d,
    pw_out: Linear,
    ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
struct Net {
    in1: Linear,
    in2: Linear,
    spk: Linear,
    blocks: Vec<ConformerBlock>,
    up: Conv1d,
    mel: Linear,
    unit: Linear,
}

#[derive(Clone, Debug)]
pub struct M2SModel {
    pub config: M2SConfig,
    pub params: ParamSet,
    /// Fixed input standardization, `1 x input_dim`.
    pub input_mean: Mat,
    pub input_std: Mat,
    /// Corpus the model was fitted on, once trained.
    pub lineage: Option<Lineage>,
    net: Net,
}

#[derive(Clone, Debug, PartialEq)]
pub struct M2SOutput {
    pub mel_hat: Mat,
    pub unit_logits: Mat,
}

impl M2SModel {
    pub fn new(config: M2SConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.heads == 0 || !config.hidden.is_multiple_of(config.heads) || config.kernel.is_multiple_of(2) {
            return Err(invalid!("invalid m2s architecture {config:?}"));
        }
        let mut r = seed::rng(seed::stream_seed(seed, "m2s-init"));
        let mut ps = ParamSet::new();
        let h = config.hidden;
        let in1 = Linear::new(&mut ps, "m2s.in1", config.input_dim, h, &mut r);
        let in2 = Linear::new(&mut ps, "m2s.in2", h, h, &mut r);
        let spk = Linear::new(&mut ps, "m2s.spk", SPEAKER_DIM, h, &mut r);
        let blocks = (0..config.blocks)
            .map(|b| {
                let n = format!("m2s.block{b}");
                ConformerBlock {
                    ln_attn: LayerNorm::new(&mut ps, &format!("{n}.ln_attn"), h),
                    attn: MultiHeadAttention::new(&mut ps, &format!("{n}.attn"), h, config.heads, &mut r),
                    ln_conv: LayerNorm::new(&mut ps, &format!("{n}.ln_conv"), h),
                    pw_in: Linear::new(&mut ps, &format!("{n}.pw_in"), h, 2 * h, &mut r),
                    dw: DepthwiseConv1d::new(&mut ps, &format!("{n}.dw"), h, config.kernel, &mut r),
                    pw_out: Linear::new(&mut ps, &format!("{n}.pw_out"), h, h, &mut r),
                    ln_out: LayerNorm::new(&mut ps, &format!("{n}.ln_out"), h),
                }
            })
            .collect();
        let up = Conv1d::new(&mut ps, "m2s.up", h, h, 3, 1, 1, &mut r);
        let mel = Linear::new(&mut ps, "m2s.mel", h, MEL_BINS, &mut r);
        let unit = Linear::new(&mut ps, "m2s.unit", h, config.n_units, &mut r);
        Ok(Self {
            input_mean: Mat::zeros((1, config.input_dim)),
            input_std: Mat::ones((1, config.input_dim)),
            lineage: None,
            config,
            params: ps,
            net: Net {
                in1,
                in2,
                spk,
                blocks,
                up,
                mel,
                unit,
            },
        })
    }

    /// Sets the mel head bias, typically to the per-bin training mean.
    pub fn set_mel_bias(&mut self, bias: &Mat) {
        self.params.get_mut(self.net.mel.b).assign(bias);
    }

    /// Makes every unit logit zero regardless of input.
    pub fn zero_unit_head(&mut self) {
        self.params.get_mut(self.net.unit.w).fill(0.0);
        self.params.get_mut(self.net.unit.b).fill(0.0);
    }

    /// Graph forward from an input-space sequence `T x input_dim`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, spk: &SpeakerEmbedding) -> Result<(Var, Var)> {
        let (t, d) = g.shape(input);
        if d != self.config.input_dim {
            return Err(invalid!("m2s input has {d} columns, expected {}", self.config.input_dim));
        }
        if t == 0 {
            return Err(invalid!("m2s input is empty"));
        }
        if spk.vec.len() != SPEAKER_DIM {
            return Err(invalid!("speaker embedding has {} entries, expected {SPEAKER_DIM}", spk.vec.len()));
        }
        let neg_mean = g.constant(-&self.input_mean);
        let inv_std = g.constant(self.input_std.mapv(|s| 1.0 / s));
        let z = g.add_row(input, neg_mean);
        let z = g.mul_row(z, inv_std);

        let n = &self.net;
        let h = n.in1.forward(g, p, z);
        let h = g.gelu(h);
        let mut h = n.in2.forward(g, p, h);
        let s = g.constant(spk.as_row());
        let s = n.spk.forward(g, p, s);
        h = g.add_row(h, s);

        let bias = alibi_bias(t, self.config.heads);
        for b in &n.blocks {
            let a = b.ln_attn.forward(g, p, h);
            let a = b.attn.forward(g, p, a, a, &bias);
            h = g.add(h, a);
            let c = b.ln_conv.forward(g, p, h);
            let c = b.pw_in.forward(g, p, c);
            let c = g.glu(c);
            let c = b.dw.forward(g, p, c);
            let c = g.silu(c);
            let c = b.pw_out.forward(g, p, c);
            h = g.add(h, c);
            h = b.ln_out.forward(g, p, h);
        }

        let dup: Rc<[Option<usize>]> = (0..2 * t).map(|i| Some(i / 2)).collect();
        let u = g.gather_rows(h, dup);
        let u = n.up.forward(g, p, u);
        let u = g.gelu(u);
        let mel = n.mel.forward(g, p, u);
        let logits = n.unit.forward(g, p, u);
        Ok((mel, logits))
    }
}

/// Input-space features of expression frames (values only).
pub fn input_features(template: &FaceTemplate, frames: &Mat, space: InputSpace) -> Mat {
    match space {
        InputSpace::Mouth => decode_rows(template, frames, &template.mouth_idx),
        InputSpace::Face => {
            let all: Vec<usize> = (0..template.num_vertices()).collect();
            decode_rows(template, frames, &all)
        }
        InputSpace::Exp => frames.clone(),
    }
}

/// Differentiable counterpart of [`input_features`].
pub fn input_features_var(g: &mut Graph, template: &Rc<FaceTemplate>, x: Var, space: InputSpace) -> Var {
    match space {
        InputSpace::Mouth => {
            let idx: Rc<[usize]> = template.mouth_idx.clone().into();
            decode_var(g, template, x, idx)
        }
        InputSpace::Face => {
            let idx: Rc<[usize]> = (0..template.num_vertices()).collect();
            decode_var(g, template, x, idx)
        }
        InputSpace::Exp => x,
    }
}

pub fn m2s_forward(model: &M2SModel, input_seq: &Mat, spk: &SpeakerEmbedding) -> Result<M2SOutput> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(input_seq.clone());
    let (mel, logits) = model.forward(&mut g, &p, x, spk)?;
    Ok(M2SOutput {
        mel_hat: g.value(mel).clone(),
        unit_logits: g.value(logits).clone(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mel: Var,
    pub unit: Var,
    pub total: Var,
}

/// `10·L1(mel) + CE(units)` placed on the graph.
pub fn m2s_loss_var(g: &mut Graph, mel_hat: Var, logits: Var, mel: &Mat, units: &[usize]) -> Result<LossVars> {
    let t = g.shape(mel_hat).0;
    if mel.nrows() != t || units.len() != t {
        return Err(invalid!(
            "m2s output has {t} frames but targets have {} mel frames and {} units",
            mel.nrows(),
            units.len()
        ));
    }
    if mel.ncols() != g.shape(mel_hat).1 {
        return Err(invalid!("mel target has {} bins, prediction {}", mel.ncols(), g.shape(mel_hat).1));
    }
    let n_u = g.shape(logits).1;
    if let Some(u) = units.iter().find(|u| **u >= n_u) {
        return Err(invalid!("unit id {u} out of range for {n_u} logits"));
    }
    let target = g.constant(mel.clone());
    let l_mel = g.l1(mel_hat, target);
    let l_unit = g.cross_entropy(logits, units.into());
    let weighted = g.scale(l_mel, W_MEL);
    let weighted_unit = g.scale(l_unit, W_UNIT);
    let total = g.add(weighted, weighted_unit);
    Ok(LossVars {
        mel: l_mel,
        unit: l_unit,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct M2SLoss {
    pub mel: f64,
    pub unit: f64,
    pub total: f64,
}

pub fn m2s_loss(out: &M2SOutput, mel: &Mat, units: &[usize]) -> Result<M2SLoss> {
    let mut g = Graph::new();
    let m = g.constant(out.mel_hat.clone());
    let l = g.constant(out.unit_logits.clone());
    let v = m2s_loss_var(&mut g, m, l, mel, units)?;
    Ok(M2SLoss {
        mel: g.scalar(v.mel),
        unit: g.scalar(v.unit),
        total: g.scalar(v.total),
    })
}
