//! Analysis-by-audio-synthesis: recover expressions whose synthesized audio
//! matches a target, through a frozen M2S model.

use std::rc::Rc;

use lipcycle_grad::{Adam, AdamConfig, Graph, Mat, ParamId, ParamSet, Var};
use serde::{Deserialize, Serialize};

use super::model::{input_features_var, m2s_loss_var, M2SModel};
use crate::audio::SpeakerEmbedding;
use crate::error::{invalid, Error, Result};
use crate::face::{ExpressionSequence, FaceTemplate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbasOptions {
    pub lr: f64,
    pub steps: usize,
    /// Weight of the mean squared frame-to-frame velocity.
    pub smoothness: f64,
}

impl Default for AbasOptions {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps: 2000,
            smoothness: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AbasResult {
    pub expressions: ExpressionSequence,
    pub initial_objective: f64,
    pub best_objective: f64,
    /// Objective of every iterate, starting with the zero initialization.
    pub history: Vec<f64>,
}

/// Mean squared forward difference of the rows of `x`; zero for one row.
fn velocity_penalty(g: &mut Graph, x: Var) -> Var {
    let t = g.shape(x).0;
    if t < 2 {
        let z = g.constant(Mat::zeros((1, 1)));
        return g.sum(z);
    }
    let next: Rc<[Option<usize>]> = (1..t).map(Some).collect();
    let prev: Rc<[Option<usize>]> = (0..t - 1).map(Some).collect();
    let a = g.gather_rows(x, next);
    let b = g.gather_rows(x, prev);
    g.mse(a, b)
}

fn objective(
    model: &M2SModel,
    template: &Rc<FaceTemplate>,
    x: &ParamSet,
    id: ParamId,
    target: (&Mat, &[usize]),
    spk: &SpeakerEmbedding,
    smoothness: f64,
    with_grad: bool,
) -> Result<(f64, Option<Mat>)> {
    let mut g = Graph::new();
    let mp = model.params.bind(&mut g, false);
    let xb = x.bind(&mut g, with_grad);
    let xv = xb[id];
    let feats = input_features_var(&mut g, template, xv, model.config.input_space);
    let (mel, logits) = model.forward(&mut g, &mp, feats, spk)?;
    let l = m2s_loss_var(&mut g, mel, logits, target.0, target.1)?.total;
    let v = velocity_penalty(&mut g, xv);
    let v = g.scale(v, smoothness);
    let total = g.add(l, v);
    let value = g.scalar(total);
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = g.backward(total);
    Ok((value, grads.take(xv)))
}

/// Adam on the expression sequence from zeros; returns the iterate with the
/// lowest objective.
#[allow(clippy::too_many_arguments)]
pub fn analysis_by_audio_synthesis(
    model: &M2SModel,
    template: &Rc<FaceTemplate>,
    target_mel: &Mat,
    target_units: &[usize],
    spk: &SpeakerEmbedding,
    frames: usize,
    opts: &AbasOptions,
) -> Result<AbasResult> {
    if frames == 0 {
        return Err(invalid!("ABAS needs at least one frame"));
    }
    if target_mel.nrows() != 2 * frames || target_units.len() != 2 * frames {
        return Err(invalid!(
            "target has {} mel frames and {} units; expected {} for {frames} animation frames",
            target_mel.nrows(),
            target_units.len(),
            2 * frames
        ));
    }
    if !(opts.lr > 0.0) || !(opts.smoothness >= 0.0) {
        return Err(invalid!("ABAS needs a positive learning rate and non-negative smoothness"));
    }
    let mut x = ParamSet::new();
    let id = x.zeros("expressions", frames, template.param_dim());
    let mut adam = Adam::new(
        AdamConfig {
            clip_norm: None,
            ..AdamConfig::with_lr(opts.lr)
        },
        &x,
    );
    let target = (target_mel, target_units);
    let mut history = Vec::with_capacity(opts.steps + 1);
    let mut best: Option<(f64, Mat)> = None;
    for step in 0..=opts.steps {
        let last = step == opts.steps;
        let (value, grad) = objective(model, template, &x, id, target, spk, opts.smoothness, !last)?;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                what: "ABAS objective".into(),
            });
        }
        history.push(value);
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, x.get(id).clone()));
        }
        if let Some(gx) = grad {
            adam.update(&mut x, &[gx], &[]);
        }
    }
    let (best_objective, frames) = best.expect("at least the initial iterate");
    Ok(AbasResult {
        expressions: ExpressionSequence::new(frames)?,
        initial_objective: history[0],
        best_objective,
        history,
    })
}
