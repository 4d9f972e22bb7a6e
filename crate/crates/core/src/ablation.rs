//! Variant runner: train several denoiser configurations with a shared seed
//! and budget, evaluate all on one split and tabulate the reports.

use serde::{Deserialize, Serialize};

use crate::audio::EncoderMode;
use crate::corpus::{Corpus, Split};
use crate::diffusion::{train_thunder, DenoiserConfig, ThunderTrainOptions};
use crate::error::{invalid, Result};
use crate::m2s::{InputSpace, M2SModel};
use crate::metrics::{evaluate_model, DiffusionSampler, EvalOptions, MetricReport, METRIC_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub with_m2s: bool,
    pub input_space: InputSpace,
    pub w_m2s: f64,
    pub encoder_mode: EncoderMode,
}

impl AblationVariant {
    pub fn apply(&self, base: &DenoiserConfig) -> DenoiserConfig {
        DenoiserConfig {
            with_m2s: self.with_m2s,
            w_m2s: self.w_m2s,
            encoder_mode: self.encoder_mode,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        let v = |name: &str, with_m2s: bool| AblationVariant {
            name: name.into(),
            with_m2s,
            input_space: InputSpace::Mouth,
            w_m2s: 0.02,
            encoder_mode: EncoderMode::Frozen,
        };
        Self {
            variants: vec![v("with_m2s", true), v("without_m2s", false)],
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(invalid!("ablation.variants must not be empty"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if v.name.is_empty() || v.name.contains(',') {
                return Err(invalid!("ablation.variants: name `{}` must be non-empty without commas", v.name));
            }
            if self.variants[..i].iter().any(|o| o.name == v.name) {
                return Err(invalid!("ablation.variants: duplicate variant name `{}`", v.name));
            }
            if !(v.w_m2s >= 0.0 && v.w_m2s.is_finite()) {
                return Err(invalid!("ablation.variants: `{}` has invalid w_m2s {}", v.name, v.w_m2s));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: MetricReport,
}

fn m2s_for(models: &[M2SModel], space: InputSpace) -> Option<&M2SModel> {
    models.iter().find(|m| m.config.input_space == space)
}

/// Trains and evaluates every variant. All prerequisites are checked before
/// any training starts.
pub fn run_ablation(
    corpus: &Corpus,
    spec: &AblationSpec,
    m2s_models: &[M2SModel],
    base: &DenoiserConfig,
    train: &ThunderTrainOptions,
    eval: &EvalOptions,
    guidance: f64,
) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    for v in &spec.variants {
        if v.with_m2s && m2s_for(m2s_models, v.input_space).is_none() {
            return Err(invalid!(
                "variant `{}` needs an m2s model for the {} input space",
                v.name,
                v.input_space.name()
            ));
        }
        v.apply(base).validate().map_err(|e| e.context(format!("variant `{}`", v.name)))?;
    }
    spec.variants
        .iter()
        .map(|v| {
            let cfg = v.apply(base);
            let m2s = if v.with_m2s { m2s_for(m2s_models, v.input_space) } else { None };
            let ctx = || format!("variant `{}`", v.name);
            let (model, _) = train_thunder(corpus, m2s, &cfg, train).map_err(|e| e.context(ctx()))?;
            let sampler = DiffusionSampler::new(&model, guidance)?;
            let report = evaluate_model(&sampler, corpus, Split::Test, eval).map_err(|e| e.context(ctx()))?;
            Ok(AblationRow {
                variant: v.clone(),
                report,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,with_m2s,input_space,w_m2s,encoder_mode,{}\n", MetricReport::csv_header());
    for r in rows {
        let v = &r.variant;
        let mode = match v.encoder_mode {
            EncoderMode::Frozen => "frozen",
            EncoderMode::Trainable => "trainable",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            v.name,
            v.with_m2s,
            v.input_space.name(),
            v.w_m2s,
            mode,
            r.report.csv_row()
        ));
    }
    out
}

/// First with-m2s variant minus first without-m2s variant, if both exist.
pub fn m2s_delta(rows: &[AblationRow]) -> Option<MetricReport> {
    let with = rows.iter().find(|r| r.variant.with_m2s)?;
    let without = rows.iter().find(|r| !r.variant.with_m2s)?;
    Some(with.report.delta(&without.report))
}

pub fn delta_csv(delta: &MetricReport) -> String {
    let mut out = String::from("metric,with_minus_without\n");
    for (n, v) in METRIC_NAMES.iter().zip(delta.values()) {
        out.push_str(&format!("{n},{v}\n"));
    }
    out
}
