//! Run configuration: shipped defaults, overlaid by a user file, overlaid by flags.

use std::path::Path;

use lipcycle::ablation::AblationSpec;
use lipcycle::audio::EncoderMode;
use lipcycle::corpus::{sha256_hex, CorpusConfig};
use lipcycle::diffusion::{DenoiserConfig, ThunderTrainOptions};
use lipcycle::face::FaceTemplate;
use lipcycle::m2s::{AbasOptions, InputSpace, M2SConfig, M2STrainOptions};
use lipcycle::metrics::EvalOptions;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const DEFAULTS: &str = include_str!("../defaults.toml");

/// Keys that may be set but have no default value.
const OPTIONAL_KEYS: &[&str] = &["eval.max_sequences"];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct M2SSection {
    pub input_space: InputSpace,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub kernel: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_window: usize,
    pub epochs: usize,
}

impl Default for M2SSection {
    fn default() -> Self {
        let t = M2STrainOptions::default();
        Self {
            input_space: InputSpace::Mouth,
            hidden: 96,
            blocks: 2,
            heads: 4,
            kernel: 5,
            lr: t.lr,
            batch: t.batch,
            max_window: t.max_window,
            epochs: t.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub audio_dim: usize,
    pub steps: usize,
    pub cond_dropout: f64,
    pub w_m2s: f64,
    pub with_m2s: bool,
    pub encoder_mode: EncoderMode,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub window: usize,
    pub guidance: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let m = DenoiserConfig::default();
        let t = ThunderTrainOptions::default();
        Self {
            layers: m.layers,
            heads: m.heads,
            dim: m.dim,
            audio_dim: m.audio_dim,
            steps: m.steps,
            cond_dropout: m.cond_dropout,
            w_m2s: m.w_m2s,
            with_m2s: m.with_m2s,
            encoder_mode: m.encoder_mode,
            lr: t.lr,
            batch: t.batch,
            epochs: t.epochs,
            window: t.window,
            guidance: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sequences: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            samples: e.samples,
            max_sequences: e.max_sequences,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbasSection {
    pub lr: f64,
    pub steps: usize,
    pub smoothness: f64,
    /// Held-out sequences to invert.
    pub targets: usize,
}

impl Default for AbasSection {
    fn default() -> Self {
        let a = AbasOptions::default();
        Self {
            lr: a.lr,
            steps: a.steps,
            smoothness: a.smoothness,
            targets: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// The corpus seed is always the top-level seed.
    pub corpus: CorpusConfig,
    pub m2s: M2SSection,
    pub diffusion: DiffusionSection,
    pub eval: EvalSection,
    pub abas: AbasSection,
    pub ablation: AblationSpec,
}

fn unknown_keys(user: &Table, defaults: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (defaults.get(k), v) {
            (Some(Value::Table(d)), Value::Table(u)) => unknown_keys(u, d, &path, out),
            (Some(_), _) => {}
            (None, _) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            (None, _) => out.push(path),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dotted key of the `key = value` line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> Option<String> {
    let mut section = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if t.starts_with('[') {
            section = t.trim_matches(|c| c == '[' || c == ']').to_string();
        } else if pos < start + line.len() {
            let key = t.split('=').next()?.trim();
            return Some(if section.is_empty() { key.to_string() } else { format!("{section}.{key}") });
        }
        start += line.len();
    }
    None
}

fn parse_table(text: &str, origin: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>()
        .map_err(|e| ConfigError(format!("{origin}: {e}")))
}

impl RunConfig {
    /// Defaults overlaid by the document `text`, then validated.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut merged = parse_table(DEFAULTS, "defaults.toml")?;
        let user = parse_table(text, origin)?;
        let mut unknown = Vec::new();
        unknown_keys(&user, &merged, "", &mut unknown);
        if let Some(k) = unknown.first() {
            let hint = if k == "corpus.seed" { " (set the top-level `seed` instead)" } else { "" };
            return Err(ConfigError(format!("{origin}: unknown key `{k}`{hint}")));
        }
        merge(&mut merged, user);
        let text = toml::to_string(&merged).expect("merged table serializes");
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            let key = e.span().and_then(|s| key_at(&text, s.start));
            match key {
                Some(k) => ConfigError(format!("{origin}: `{k}`: {}", e.message())),
                None => ConfigError(format!("{origin}: {}", e.message())),
            }
        })?;
        cfg.corpus.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Self::from_toml("", "defaults"),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text, &p.display().to_string())
            }
        }
    }

    /// Checks every section against the preconditions of the code it feeds.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: lipcycle::Error| ConfigError(e.to_string());
        self.corpus.validate().map_err(err)?;
        self.m2s_train().validate().map_err(err)?;
        let m = &self.m2s;
        if m.hidden == 0 || m.heads == 0 || !m.hidden.is_multiple_of(m.heads) {
            return Err(ConfigError(format!(
                "m2s.hidden ({}) must be a positive multiple of m2s.heads ({})",
                m.hidden, m.heads
            )));
        }
        if m.kernel.is_multiple_of(2) {
            return Err(ConfigError(format!("m2s.kernel must be odd, got {}", m.kernel)));
        }
        if m.blocks == 0 {
            return Err(ConfigError("m2s.blocks must be positive".into()));
        }
        self.denoiser().validate().map_err(err)?;
        self.thunder_train().validate().map_err(err)?;
        let g = self.diffusion.guidance;
        if !(g >= 0.0 && g.is_finite()) {
            return Err(ConfigError(format!("diffusion.guidance must be non-negative, got {g}")));
        }
        self.eval_options().validate().map_err(err)?;
        let a = &self.abas;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(ConfigError(format!("abas.lr must be positive, got {}", a.lr)));
        }
        if !(a.smoothness >= 0.0 && a.smoothness.is_finite()) {
            return Err(ConfigError(format!("abas.smoothness must be non-negative, got {}", a.smoothness)));
        }
        if a.targets == 0 {
            return Err(ConfigError("abas.targets must be positive".into()));
        }
        self.ablation.validate().map_err(err)?;
        Ok(())
    }

    pub fn m2s_config(&self, template: &FaceTemplate, space: InputSpace) -> M2SConfig {
        M2SConfig {
            hidden: self.m2s.hidden,
            blocks: self.m2s.blocks,
            heads: self.m2s.heads,
            kernel: self.m2s.kernel,
            ..M2SConfig::new(space, template, self.corpus.n_units)
        }
    }

    pub fn m2s_train(&self) -> M2STrainOptions {
        M2STrainOptions {
            lr: self.m2s.lr,
            batch: self.m2s.batch,
            max_window: self.m2s.max_window,
            epochs: self.m2s.epochs,
            seed: self.seed,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let d = &self.diffusion;
        DenoiserConfig {
            layers: d.layers,
            heads: d.heads,
            dim: d.dim,
            audio_dim: d.audio_dim,
            steps: d.steps,
            cond_dropout: d.cond_dropout,
            w_m2s: d.w_m2s,
            with_m2s: d.with_m2s,
            encoder_mode: d.encoder_mode,
        }
    }

    pub fn thunder_train(&self) -> ThunderTrainOptions {
        let d = &self.diffusion;
        ThunderTrainOptions {
            lr: d.lr,
            batch: d.batch,
            epochs: d.epochs,
            window: d.window,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            samples: self.eval.samples,
            seed: self.seed,
            max_sequences: self.eval.max_sequences,
        }
    }

    pub fn abas_options(&self) -> AbasOptions {
        AbasOptions {
            lr: self.abas.lr,
            steps: self.abas.steps,
            smoothness: self.abas.smoothness,
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_equal_code_defaults() {
        assert_eq!(RunConfig::from_toml("", "t").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn m2s_architecture_defaults_match_the_model() {
        let tpl = lipcycle::face::make_synthetic_template(0, 300, 16).unwrap();
        let cfg = RunConfig::default();
        assert_eq!(cfg.m2s_config(&tpl, InputSpace::Mouth), M2SConfig::new(InputSpace::Mouth, &tpl, 8));
    }

    #[test]
    fn user_values_override_defaults_and_seed_reaches_the_corpus() {
        let cfg = RunConfig::from_toml("seed = 7\n[diffusion]\nepochs = 3\n", "t").unwrap();
        assert_eq!(cfg.diffusion.epochs, 3);
        assert_eq!(cfg.diffusion.layers, 4);
        assert_eq!(cfg.corpus.seed, 7);
        assert_eq!(cfg.thunder_train().seed, 7);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[diffusion]\nlayerz = 3\n", "t").unwrap_err();
        assert!(e.0.contains("`diffusion.layerz`"), "{e}");
        let e = RunConfig::from_toml("[corpus]\nseed = 3\n", "t").unwrap_err();
        assert!(e.0.contains("`corpus.seed`"), "{e}");
        let e = RunConfig::from_toml("[[ablation.variants]]\nname = \"a\"\nbogus = 1\n", "t").unwrap_err();
        assert!(e.0.contains("bogus"), "{e}");
        let cfg = RunConfig::from_toml("[eval]\nmax_sequences = 4\n", "t").unwrap();
        assert_eq!(cfg.eval.max_sequences, Some(4));
    }

    #[test]
    fn invalid_values_name_the_key() {
        let cfg = RunConfig::from_toml("[diffusion]\ndim = 63\n", "t").unwrap();
        assert!(cfg.validate().unwrap_err().0.contains("diffusion.dim"));
        let cfg = RunConfig::from_toml("[eval]\nsamples = 1\n", "t").unwrap();
        assert!(cfg.validate().unwrap_err().0.contains("eval.samples"));
        let e = RunConfig::from_toml("[m2s]\nlr = \"fast\"\n", "t").unwrap_err();
        assert!(e.0.contains("`m2s.lr`"), "{e}");
    }

    #[test]
    fn hash_tracks_every_value() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.abas.steps += 1;
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
