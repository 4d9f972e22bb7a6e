//! M2S training with validation-based checkpoint selection, and evaluation.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use lipcycle_grad::{Adam, AdamConfig, Graph, Mat, ParamSet};

use super::model::{input_features, m2s_loss_var, M2SConfig, M2SModel};
use crate::audio::{SpeakerEmbedding, MEL_BINS};
use crate::corpus::{Corpus, SequenceRecord, Split};
use crate::error::{invalid, Error, Result};
use crate::face::FaceTemplate;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct M2STrainOptions {
    pub lr: f64,
    pub batch: usize,
    /// Longest training window in 25 fps frames.
    pub max_window: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for M2STrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            max_window: 125,
            epochs: 30,
            seed: 0,
        }
    }
}

impl M2STrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("m2s.lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return Err(invalid!("m2s.batch must be positive"));
        }
        if self.max_window == 0 {
            return Err(invalid!("m2s.max_window must be positive"));
        }
        Ok(())
    }
}

/// One training pair in the model's input space.
#[derive(Clone, Debug)]
pub struct M2SSample {
    pub input: Mat,
    pub speaker: SpeakerEmbedding,
    pub mel: Mat,
    pub units: Vec<usize>,
}

impl M2SSample {
    pub fn from_record(rec: &SequenceRecord, template: &FaceTemplate, config: &M2SConfig, speaker: SpeakerEmbedding) -> Self {
        Self {
            input: input_features(template, &rec.expressions.frames, config.input_space),
            speaker,
            mel: rec.mel.frames.clone(),
            units: rec.units.ids.clone(),
        }
    }

    fn window(&self, start: usize, len: usize) -> M2SSample {
        M2SSample {
            input: self.input.slice(ndarray::s![start..start + len, ..]).to_owned(),
            speaker: self.speaker.clone(),
            mel: self.mel.slice(ndarray::s![2 * start..2 * (start + len), ..]).to_owned(),
            units: self.units[2 * start..2 * (start + len)].to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct M2SHistory {
    /// Mean training L_m2s per epoch.
    pub train: Vec<f64>,
    /// Validation L_m2s per epoch.
    pub val: Vec<f64>,
    /// Running minimum of `val`.
    pub best_val: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

fn batch_loss(model: &M2SModel, params: &ParamSet, batch: &[M2SSample], trainable: bool) -> Result<(f64, Option<Vec<Mat>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, trainable);
    let mut total = None;
    for s in batch {
        let x = g.constant(s.input.clone());
        let (mel, logits) = model.forward(&mut g, &p, x, &s.speaker)?;
        let l = m2s_loss_var(&mut g, mel, logits, &s.mel, &s.units)?.total;
        total = Some(match total {
            Some(acc) => g.add(acc, l),
            None => l,
        });
    }
    let total = total.ok_or_else(|| invalid!("empty batch"))?;
    let mean = g.scale(total, 1.0 / batch.len() as f64);
    let value = g.scalar(mean);
    if !trainable {
        return Ok((value, None));
    }
    let mut grads = g.backward(mean);
    Ok((value, Some(p.grads(&mut grads, params))))
}

/// Mean L_m2s over samples (no gradients).
pub fn mean_loss(model: &M2SModel, samples: &[M2SSample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += batch_loss(model, &model.params, std::slice::from_ref(s), false)?.0;
    }
    Ok(acc / samples.len().max(1) as f64)
}

/// Per-bin mean and std of the concatenated inputs, std floored at 1e-4.
pub fn input_statistics(samples: &[M2SSample]) -> (Mat, Mat) {
    let d = samples[0].input.ncols();
    let n: usize = samples.iter().map(|s| s.input.nrows()).sum();
    let mut mean = Mat::zeros((1, d));
    for s in samples {
        mean += &s.input.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    }
    mean /= n as f64;
    let mut var = Mat::zeros((1, d));
    for s in samples {
        for row in s.input.rows() {
            for j in 0..d {
                var[[0, j]] += (row[j] - mean[[0, j]]).powi(2);
            }
        }
    }
    let std = (var / n as f64).mapv(|v| v.sqrt().max(1e-4));
    (mean, std)
}

pub fn mel_mean(samples: &[M2SSample]) -> Mat {
    let n: usize = samples.iter().map(|s| s.mel.nrows()).sum();
    let mut mean = Mat::zeros((1, MEL_BINS));
    for s in samples {
        mean += &s.mel.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
    }
    mean / n as f64
}

/// Freshly initialized model whose input standardization and mel bias are
/// fitted on `train`.
pub fn init_m2s(config: &M2SConfig, train: &[M2SSample], seed: u64) -> Result<M2SModel> {
    if train.is_empty() {
        return Err(invalid!("m2s training needs at least one sequence"));
    }
    let mut model = M2SModel::new(config.clone(), seed)?;
    let (m, s) = input_statistics(train);
    model.input_mean = m;
    model.input_std = s;
    model.set_mel_bias(&mel_mean(train));
    Ok(model)
}

/// Runs Adam over shuffled mini-batches and keeps the parameters of the
/// epoch with the lowest validation loss.
pub fn fit_m2s(model: &mut M2SModel, train: &[M2SSample], val: &[M2SSample], opts: &M2STrainOptions) -> Result<M2SHistory> {
    opts.validate()?;
    if train.is_empty() {
        return Err(invalid!("m2s training needs at least one sequence"));
    }
    let mut hist = M2SHistory::default();
    if opts.epochs == 0 {
        return Ok(hist);
    }
    let mut rng = seed::rng(seed::stream_seed(opts.seed, "m2s-train"));
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &model.params);
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch) {
            let batch: Vec<M2SSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let t = s.input.nrows();
                    if t > opts.max_window {
                        let start = rng.random_range(0..=t - opts.max_window);
                        s.window(start, opts.max_window)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let (loss, grads) = batch_loss(model, &model.params, &batch, true)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: hist.steps,
                    what: "m2s loss".into(),
                });
            }
            adam.update(&mut model.params, &grads.expect("trainable pass"), &[]);
            hist.steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        hist.train.push(epoch_loss / batches as f64);
        let v = if val.is_empty() {
            hist.train[epoch]
        } else {
            mean_loss(model, val)?
        };
        hist.val.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, model.params.clone()));
            hist.best_epoch = Some(epoch);
        }
        hist.best_val.push(best.as_ref().expect("set above").0);
    }
    if let Some((_, p)) = best {
        model.params.assign_from(&p);
    }
    Ok(hist)
}

pub fn samples_for(corpus: &Corpus, split: Split, config: &M2SConfig) -> Result<Vec<M2SSample>> {
    corpus
        .split(split)
        .into_iter()
        .map(|r| {
            Ok(M2SSample::from_record(
                r,
                &corpus.template,
                config,
                corpus.speaker_embedding(r.speaker_id)?,
            ))
        })
        .collect()
}

pub fn train_m2s(corpus: &Corpus, config: &M2SConfig, opts: &M2STrainOptions) -> Result<(M2SModel, M2SHistory)> {
    config.validate(&corpus.template)?;
    let train = samples_for(corpus, Split::Train, config)?;
    if train.is_empty() {
        return Err(invalid!("corpus has no training sequences"));
    }
    let val = samples_for(corpus, Split::Val, config)?;
    let mut model = init_m2s(config, &train, opts.seed)?;
    let hist = fit_m2s(&mut model, &train, &val, opts)?;
    model.lineage = Some(corpus.lineage());
    Ok((model, hist))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct M2SEval {
    pub mel_l1: f64,
    pub unit_accuracy: f64,
    pub frames: usize,
}

/// Mean absolute mel error over all entries and frame-level unit accuracy.
pub fn eval_m2s_samples(model: &M2SModel, samples: &[M2SSample]) -> Result<M2SEval> {
    if samples.is_empty() {
        return Err(invalid!("cannot evaluate on an empty split"));
    }
    let (mut abs, mut entries, mut hits, mut frames) = (0.0, 0usize, 0usize, 0usize);
    for s in samples {
        let out = super::model::m2s_forward(model, &s.input, &s.speaker)?;
        abs += (&out.mel_hat - &s.mel).mapv(f64::abs).sum();
        entries += s.mel.len();
        for (row, u) in out.unit_logits.rows().into_iter().zip(&s.units) {
            let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += usize::from(arg == *u);
        }
        frames += s.units.len();
    }
    Ok(M2SEval {
        mel_l1: abs / entries as f64,
        unit_accuracy: hits as f64 / frames as f64,
        frames,
    })
}

pub fn eval_m2s(model: &M2SModel, corpus: &Corpus, split: Split) -> Result<M2SEval> {
    eval_m2s_samples(model, &samples_for(corpus, split, &model.config)?)
}
