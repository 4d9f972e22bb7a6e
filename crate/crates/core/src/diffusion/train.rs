//! Denoiser training with reconstruction, velocity and cycle-consistency losses.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use lipcycle_grad::{Adam, AdamConfig, Bound, Graph, Mat, Var};

use super::model::{DenoiserConfig, DenoiserModel, Normalization};
use super::schedule::{make_linear_schedule, noising, NoiseSchedule};
use crate::audio::{AudioEncoder, MelSpectrogram, SpeakerEmbedding};
use crate::corpus::{Corpus, Split};
use crate::error::{invalid, Error, Result};
use crate::face::{decode_rows, decode_var, FaceTemplate};
use crate::m2s::{input_features_var, m2s_loss_var, M2SModel};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThunderTrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Training window in 25 fps frames.
    pub window: usize,
    pub seed: u64,
}

impl Default for ThunderTrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 20,
            window: 70,
            seed: 0,
        }
    }
}

impl ThunderTrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("diffusion.lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return Err(invalid!("diffusion.batch must be positive"));
        }
        if self.window < 2 {
            return Err(invalid!("diffusion.window must be at least 2"));
        }
        Ok(())
    }
}

/// One training sequence: raw expressions with its audio targets.
#[derive(Clone, Debug)]
pub struct ThunderSample {
    pub expressions: Mat,
    pub mel: Mat,
    pub units: Vec<usize>,
    pub speaker: SpeakerEmbedding,
}

impl ThunderSample {
    pub fn frames(&self) -> usize {
        self.expressions.nrows()
    }

    pub fn window(&self, start: usize, len: usize) -> ThunderSample {
        ThunderSample {
            expressions: self.expressions.slice(ndarray::s![start..start + len, ..]).to_owned(),
            mel: self.mel.slice(ndarray::s![2 * start..2 * (start + len), ..]).to_owned(),
            units: self.units[2 * start..2 * (start + len)].to_vec(),
            speaker: self.speaker.clone(),
        }
    }
}

pub fn thunder_samples(corpus: &Corpus, split: Split) -> Result<Vec<ThunderSample>> {
    corpus
        .split(split)
        .into_iter()
        .map(|r| {
            Ok(ThunderSample {
                expressions: r.expressions.frames.clone(),
                mel: r.mel.frames.clone(),
                units: r.units.ids.clone(),
                speaker: corpus.speaker_embedding(r.speaker_id)?,
            })
        })
        .collect()
}

/// Everything the loss needs besides the prediction and its target.
pub struct LossContext<'a> {
    pub template: &'a Rc<FaceTemplate>,
    pub norm: &'a Normalization,
    /// Frozen M2S model and its (non-trainable) graph binding.
    pub m2s: Option<(&'a M2SModel, &'a Bound)>,
    pub w_m2s: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ThunderLossVars {
    pub rec: Var,
    pub vel: Var,
    pub m2s: Option<Var>,
    pub total: Var,
}

fn velocity_var(g: &mut Graph, x: Var) -> Var {
    let t = g.shape(x).0;
    let next: Rc<[Option<usize>]> = (1..t).map(Some).collect();
    let prev: Rc<[Option<usize>]> = (0..t - 1).map(Some).collect();
    let a = g.gather_rows(x, next);
    let b = g.gather_rows(x, prev);
    g.sub(a, b)
}

/// Sum of vertex, psi and jaw MSEs between two (prediction, target) triples.
fn three_mse(g: &mut Graph, pred: [Var; 3], target: [Var; 3]) -> Var {
    let a = g.mse(pred[0], target[0]);
    let b = g.mse(pred[1], target[1]);
    let c = g.mse(pred[2], target[2]);
    let ab = g.add(a, b);
    g.add(ab, c)
}

/// `L_rec + L_vel + w_m2s·L_m2s` for a normalized-space prediction.
pub fn thunder_loss_var(g: &mut Graph, ctx: &LossContext, pred: Var, target: &ThunderSample) -> Result<ThunderLossVars> {
    let tpl = ctx.template;
    let (t, w) = g.shape(pred);
    if target.expressions.dim() != (t, w) {
        return Err(invalid!(
            "prediction {:?} does not match target {:?}",
            (t, w),
            target.expressions.dim()
        ));
    }
    if w != tpl.param_dim() {
        return Err(invalid!("prediction width {w} != |psi|+3 = {}", tpl.param_dim()));
    }
    let n_psi = tpl.psi_dim();
    let all: Rc<[usize]> = (0..tpl.num_vertices()).collect();
    let psi_cols: Rc<[usize]> = (0..n_psi).collect();
    let jaw_cols: Rc<[usize]> = (n_psi..w).collect();

    let raw = ctx.norm.denormalize_var(g, pred);
    let v_hat = decode_var(g, tpl, raw, Rc::clone(&all));
    let psi_hat = g.gather_cols(pred, Rc::clone(&psi_cols));
    let jaw_hat = g.gather_cols(pred, Rc::clone(&jaw_cols));

    let x0n = ctx.norm.normalize(&target.expressions);
    let v = g.constant(decode_rows(tpl, &target.expressions, &all));
    let psi = g.constant(x0n.select(ndarray::Axis(1), &psi_cols));
    let jaw = g.constant(x0n.select(ndarray::Axis(1), &jaw_cols));

    let rec = three_mse(g, [v_hat, psi_hat, jaw_hat], [v, psi, jaw]);
    let vel = if t >= 2 {
        let hats = [v_hat, psi_hat, jaw_hat].map(|x| velocity_var(g, x));
        let gts = [v, psi, jaw].map(|x| velocity_var(g, x));
        three_mse(g, hats, gts)
    } else {
        let z = g.constant(Mat::zeros((1, 1)));
        g.sum(z)
    };
    let mut total = g.add(rec, vel);
    let mut m2s_term = None;
    if let Some((m2s, mp)) = ctx.m2s {
        let feats = input_features_var(g, tpl, raw, m2s.config.input_space);
        let (mel, logits) = m2s.forward(g, mp, feats, &target.speaker)?;
        let l = m2s_loss_var(g, mel, logits, &target.mel, &target.units)?.total;
        let weighted = g.scale(l, ctx.w_m2s);
        total = g.add(total, weighted);
        m2s_term = Some(l);
    }
    Ok(ThunderLossVars {
        rec,
        vel,
        m2s: m2s_term,
        total,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThunderHistory {
    /// Batch-mean losses per optimizer step.
    pub total: Vec<f64>,
    pub rec: Vec<f64>,
    pub vel: Vec<f64>,
    pub m2s: Vec<f64>,
    /// Conditioning draws replaced by the null vector, out of `draws`.
    pub null_draws: usize,
    pub draws: usize,
    pub steps: usize,
}

struct Draw {
    sample: ThunderSample,
    d: usize,
    noise: Mat,
    null: bool,
}

fn draw(rng: &mut seed::Rng, s: &ThunderSample, opts: &ThunderTrainOptions, config: &DenoiserConfig) -> Draw {
    let t = s.frames();
    let sample = if t > opts.window {
        let start = rng.random_range(0..=t - opts.window);
        s.window(start, opts.window)
    } else {
        s.clone()
    };
    let d = rng.random_range(1..=config.steps);
    let noise = seed::standard_normal(rng, sample.frames(), sample.expressions.ncols());
    let null = rng.random::<f64>() < config.cond_dropout;
    Draw { sample, d, noise, null }
}

fn check_m2s_lineage(model: &DenoiserModel, m2s: &M2SModel) -> Result<()> {
    match (&model.lineage, &m2s.lineage) {
        (Some(ours), Some(theirs)) => ours.check(theirs, "m2s model"),
        (Some(_), None) => Err(Error::Lineage("m2s model carries no corpus lineage".into())),
        _ => Ok(()),
    }
}

/// Runs Adam on the denoiser (and the encoder when trainable) for
/// `opts.epochs` passes over `train`.
pub fn fit_thunder(
    model: &mut DenoiserModel,
    template: &Rc<FaceTemplate>,
    train: &[ThunderSample],
    m2s: Option<&M2SModel>,
    opts: &ThunderTrainOptions,
) -> Result<ThunderHistory> {
    opts.validate()?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(invalid!("diffusion training needs at least one sequence"));
    }
    let m2s = if model.config.with_m2s {
        let m = m2s.ok_or_else(|| invalid!("diffusion.with_m2s is set but no m2s model was supplied"))?;
        m.config.validate(template)?;
        check_m2s_lineage(model, m)?;
        Some(m)
    } else {
        None
    };
    let schedule = make_linear_schedule(model.config.steps)?;
    let mut rng = seed::rng(seed::stream_seed(opts.seed, "thunder-train"));
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &model.params);
    let train_encoder = model.encoder.trainable();
    let mut enc_adam = Adam::new(AdamConfig::with_lr(opts.lr), &model.encoder.params);
    let mut hist = ThunderHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            let draws: Vec<Draw> = chunk
                .iter()
                .map(|&i| draw(&mut rng, &train[i], opts, &model.config))
                .collect();
            hist.null_draws += draws.iter().filter(|d| d.null).count();
            hist.draws += draws.len();

            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let ep = model.encoder.params.bind(&mut g, train_encoder);
            let mp = m2s.map(|m| m.params.bind(&mut g, false));
            let ctx = LossContext {
                template,
                norm: &model.norm,
                m2s: m2s.zip(mp.as_ref()),
                w_m2s: model.config.w_m2s,
            };
            let mut sums: Option<(Var, Var, Var, Option<Var>)> = None;
            for dr in &draws {
                let x0n = model.norm.normalize(&dr.sample.expressions);
                let xt = g.constant(noising(&x0n, dr.d, &schedule, &dr.noise)?);
                let cond = if dr.null {
                    None
                } else {
                    Some(model.encoder.forward(&mut g, &ep, &dr.sample.mel)?)
                };
                let pred = model.forward(&mut g, &p, xt, dr.d, cond)?;
                let l = thunder_loss_var(&mut g, &ctx, pred, &dr.sample)?;
                sums = Some(match sums {
                    None => (l.total, l.rec, l.vel, l.m2s),
                    Some((t, r, v, m)) => (
                        g.add(t, l.total),
                        g.add(r, l.rec),
                        g.add(v, l.vel),
                        m.zip(l.m2s).map(|(a, b)| g.add(a, b)),
                    ),
                });
            }
            let (total, rec, vel, m2s_sum) = sums.expect("non-empty chunk");
            let k = 1.0 / draws.len() as f64;
            let mean = g.scale(total, k);
            let value = g.scalar(mean);
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: hist.steps,
                    what: "diffusion loss".into(),
                });
            }
            hist.total.push(value);
            hist.rec.push(g.scalar(rec) * k);
            hist.vel.push(g.scalar(vel) * k);
            if let Some(m) = m2s_sum {
                hist.m2s.push(g.scalar(m) * k);
            }
            let mut grads = g.backward(mean);
            let gp = p.grads(&mut grads, &model.params);
            adam.update(&mut model.params, &gp, &[]);
            if train_encoder {
                let ge = ep.grads(&mut grads, &model.encoder.params);
                enc_adam.update(&mut model.encoder.params, &ge, &[]);
            }
            hist.steps += 1;
        }
    }
    if !model.params.all_finite() || !model.encoder.params.all_finite() {
        return Err(Error::TrainingDiverged {
            step: hist.steps,
            what: "diffusion parameters".into(),
        });
    }
    Ok(hist)
}

/// Mean L_rec under fixed per-sequence draws of the step and noise, with the
/// real audio condition.
pub fn reconstruction_loss(
    model: &DenoiserModel,
    template: &Rc<FaceTemplate>,
    samples: &[ThunderSample],
    schedule: &NoiseSchedule,
    seed_value: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid!("reconstruction loss needs at least one sequence"));
    }
    let mut rng = seed::rng(seed::stream_seed(seed_value, "thunder-eval"));
    let mut acc = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let ep = model.encoder.params.bind(&mut g, false);
        let d = rng.random_range(1..=schedule.steps);
        let noise = seed::standard_normal(&mut rng, s.frames(), s.expressions.ncols());
        let xt = g.constant(noising(&model.norm.normalize(&s.expressions), d, schedule, &noise)?);
        let cond = model.encoder.forward(&mut g, &ep, &s.mel)?;
        let pred = model.forward(&mut g, &p, xt, d, Some(cond))?;
        let ctx = LossContext {
            template,
            norm: &model.norm,
            m2s: None,
            w_m2s: 0.0,
        };
        let l = thunder_loss_var(&mut g, &ctx, pred, s)?;
        acc += g.scalar(l.rec);
    }
    Ok(acc / samples.len() as f64)
}

/// Builds the encoder, normalization and denoiser from the training split and
/// fits it.
pub fn train_thunder(
    corpus: &Corpus,
    m2s: Option<&M2SModel>,
    config: &DenoiserConfig,
    opts: &ThunderTrainOptions,
) -> Result<(DenoiserModel, ThunderHistory)> {
    config.validate()?;
    opts.validate()?;
    let train = thunder_samples(corpus, Split::Train)?;
    if train.is_empty() {
        return Err(invalid!("corpus has no training sequences"));
    }
    let mels: Vec<&MelSpectrogram> = corpus.split(Split::Train).into_iter().map(|r| &r.mel).collect();
    let encoder = AudioEncoder::new(seed::stream_seed(opts.seed, "encoder"), config.audio_dim, config.encoder_mode)
        .with_standardization(&mels)?;
    let mut model = DenoiserModel::new(config.clone(), corpus.template.param_dim(), encoder, opts.seed)?;
    let exprs: Vec<&Mat> = train.iter().map(|s| &s.expressions).collect();
    model.norm = Normalization::fit(&exprs)?;
    model.lineage = Some(corpus.lineage());
    let template = Rc::new(corpus.template.clone());
    let hist = fit_thunder(&mut model, &template, &train, m2s, opts)?;
    Ok((model, hist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{EncoderMode, MEL_BINS, SPEAKER_DIM};
    use crate::diffusion::testutil::{tiny_m2s, tiny_model, tiny_samples, tiny_template};

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let tpl = tiny_template();
        let m2s = tiny_m2s(&tpl);
        let s = &tiny_samples(&tpl, 1, 4, 11)[0];
        let norm = Normalization {
            mean: Mat::from_elem((1, tpl.param_dim()), 0.05),
            std: Mat::from_elem((1, tpl.param_dim()), 0.3),
        };
        let mut r = seed::rng(12);
        let pred0 = seed::standard_normal(&mut r, 4, tpl.param_dim()) * 0.5;
        let eval = |x: &Mat, grad: bool| -> (f64, Option<Mat>) {
            let mut g = Graph::new();
            let mp = m2s.params.bind(&mut g, false);
            let ctx = LossContext {
                template: &tpl,
                norm: &norm,
                m2s: Some((&m2s, &mp)),
                w_m2s: 0.7,
            };
            let xv = g.input(x.clone());
            let l = thunder_loss_var(&mut g, &ctx, xv, s).unwrap();
            let v = g.scalar(l.total);
            if !grad {
                return (v, None);
            }
            let mut gr = g.backward(l.total);
            (v, gr.take(xv))
        };
        let (_, grad) = eval(&pred0, true);
        let grad = grad.unwrap();
        let h = 1e-5;
        for ((i, j), &an) in grad.indexed_iter() {
            let mut a = pred0.clone();
            a[[i, j]] += h;
            let mut b = pred0.clone();
            b[[i, j]] -= h;
            let fd = (eval(&a, false).0 - eval(&b, false).0) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "({i},{j}) analytic {an} fd {fd}");
        }
    }

    #[test]
    fn without_m2s_the_total_is_rec_plus_vel() {
        let tpl = tiny_template();
        let s = &tiny_samples(&tpl, 1, 5, 2)[0];
        let norm = Normalization::identity(tpl.param_dim());
        let mut g = Graph::new();
        let ctx = LossContext {
            template: &tpl,
            norm: &norm,
            m2s: None,
            w_m2s: 1.0,
        };
        let x = g.input(Mat::zeros((5, tpl.param_dim())));
        let l = thunder_loss_var(&mut g, &ctx, x, s).unwrap();
        assert!(l.m2s.is_none());
        assert_eq!(g.scalar(l.total), g.scalar(l.rec) + g.scalar(l.vel));
    }

    #[test]
    fn single_sequence_overfit() {
        let tpl = tiny_template();
        let train = tiny_samples(&tpl, 1, 12, 5);
        let mut model = tiny_model(&tpl, false, EncoderMode::Frozen);
        model.norm = Normalization::fit(&[&train[0].expressions]).unwrap();
        let schedule = make_linear_schedule(model.config.steps).unwrap();
        let before = reconstruction_loss(&model, &tpl, &train, &schedule, 1).unwrap();
        let opts = ThunderTrainOptions {
            lr: 3e-3,
            batch: 1,
            epochs: 300,
            ..Default::default()
        };
        let hist = fit_thunder(&mut model, &tpl, &train, None, &opts).unwrap();
        assert_eq!(hist.steps, 300);
        let after = reconstruction_loss(&model, &tpl, &train, &schedule, 1).unwrap();
        assert!(after <= 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn null_condition_rate_over_a_thousand_steps() {
        let tpl = tiny_template();
        let train = tiny_samples(&tpl, 1, 3, 6);
        let mut model = tiny_model(&tpl, false, EncoderMode::Frozen);
        let opts = ThunderTrainOptions {
            batch: 1,
            epochs: 1000,
            ..Default::default()
        };
        let hist = fit_thunder(&mut model, &tpl, &train, None, &opts).unwrap();
        assert_eq!(hist.draws, 1000);
        let sd = (1000.0f64 * 0.2 * 0.8).sqrt();
        assert!((hist.null_draws as f64 - 200.0).abs() <= 3.0 * sd, "{}", hist.null_draws);
    }

    #[test]
    fn frozen_parts_stay_bit_identical() {
        let tpl = tiny_template();
        let m2s = tiny_m2s(&tpl);
        let train = tiny_samples(&tpl, 3, 6, 7);
        let mut model = tiny_model(&tpl, true, EncoderMode::Frozen);
        let (m_before, e_before, d_before) = (
            m2s.params.fingerprint(),
            model.encoder.params.fingerprint(),
            model.params.fingerprint(),
        );
        let opts = ThunderTrainOptions {
            batch: 2,
            epochs: 2,
            lr: 1e-3,
            ..Default::default()
        };
        let hist = fit_thunder(&mut model, &tpl, &train, Some(&m2s), &opts).unwrap();
        assert_eq!(hist.m2s.len(), hist.steps);
        assert_eq!(m2s.params.fingerprint(), m_before);
        assert_eq!(model.encoder.params.fingerprint(), e_before);
        assert_ne!(model.params.fingerprint(), d_before);

        let mut trainable = tiny_model(&tpl, true, EncoderMode::Trainable);
        let e0 = trainable.encoder.params.fingerprint();
        fit_thunder(&mut trainable, &tpl, &train, Some(&m2s), &opts).unwrap();
        assert_ne!(trainable.encoder.params.fingerprint(), e0);
    }

    #[test]
    fn training_is_deterministic() {
        let tpl = tiny_template();
        let train = tiny_samples(&tpl, 3, 6, 8);
        let opts = ThunderTrainOptions {
            batch: 2,
            epochs: 2,
            ..Default::default()
        };
        let run = || {
            let mut m = tiny_model(&tpl, false, EncoderMode::Trainable);
            let h = fit_thunder(&mut m, &tpl, &train, None, &opts).unwrap();
            (m.params.fingerprint(), m.encoder.params.fingerprint(), h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn with_m2s_requires_a_model_with_matching_lineage() {
        let tpl = tiny_template();
        let train = tiny_samples(&tpl, 1, 4, 9);
        let opts = ThunderTrainOptions {
            batch: 1,
            epochs: 1,
            ..Default::default()
        };
        let mut model = tiny_model(&tpl, true, EncoderMode::Frozen);
        assert!(matches!(
            fit_thunder(&mut model, &tpl, &train, None, &opts),
            Err(Error::InvalidArgument(_))
        ));
        let lineage = |c: &str| crate::corpus::Lineage {
            corpus_id: c.into(),
            template_id: "t".into(),
            codebook_id: "k".into(),
        };
        model.lineage = Some(lineage("a"));
        let mut m2s = tiny_m2s(&tpl);
        m2s.lineage = Some(lineage("b"));
        assert!(matches!(
            fit_thunder(&mut model, &tpl, &train, Some(&m2s), &opts),
            Err(Error::Lineage(_))
        ));
        m2s.lineage = Some(lineage("a"));
        fit_thunder(&mut model, &tpl, &train, Some(&m2s), &opts).unwrap();
    }

    #[test]
    fn window_slices_mel_and_units_at_twice_the_rate() {
        let s = ThunderSample {
            expressions: Mat::from_shape_fn((5, 4), |(t, _)| t as f64),
            mel: Mat::from_shape_fn((10, MEL_BINS), |(t, _)| t as f64),
            units: (0..10).collect(),
            speaker: SpeakerEmbedding {
                vec: vec![0.0; SPEAKER_DIM],
            },
        };
        let w = s.window(1, 3);
        assert_eq!(w.expressions[[0, 0]], 1.0);
        assert_eq!(w.mel.nrows(), 6);
        assert_eq!(w.mel[[0, 0]], 2.0);
        assert_eq!(w.units, vec![2, 3, 4, 5, 6, 7]);
    }
}
