//! Synthetic talking-face corpus with planted phoneme, viseme and mel
//! correspondences, and its on-disk format.

pub mod bank;
pub mod store;
pub mod synth;

use std::collections::HashMap;

use lipcycle_grad::Mat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bank::{make_phoneme_bank, PhonemeSpec, SILENCE};
pub use store::{load_corpus, persist_corpus};
pub use synth::{
    clean_mel, random_utterance, synth_sequence, CorpusConfig, SequenceRecord, SpeakerProfile, Split, SynthContext,
    Utterance,
};

use crate::audio::{fit_unit_codebook, MelSpectrogram, SpeakerEmbedder, SpeakerEmbedding, UnitCodebook};
use crate::error::{Error, Result};
use crate::face::{make_synthetic_template, FaceTemplate};
use crate::seed;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub index: usize,
    pub file: String,
    pub speaker_id: usize,
    pub split: Split,
    pub seed: u64,
    pub utterance: Utterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub corpus_id: String,
    pub config: CorpusConfig,
    pub template_file: String,
    pub template_id: String,
    pub codebook_file: String,
    pub codebook_id: String,
    pub phonemes: Vec<PhonemeSpec>,
    pub embedder: SpeakerEmbedder,
    pub speakers: Vec<SpeakerProfile>,
    pub sequences: Vec<SequenceEntry>,
}

/// Identifiers that tie trained models to the data they were fitted on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub corpus_id: String,
    pub template_id: String,
    pub codebook_id: String,
}

impl Lineage {
    pub fn check(&self, other: &Lineage, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::Lineage(format!(
                "{what} was built against corpus {} / codebook {}, but the supplied corpus is {} / {}",
                short(&other.corpus_id),
                short(&other.codebook_id),
                short(&self.corpus_id),
                short(&self.codebook_id)
            )));
        }
        Ok(())
    }
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub template: FaceTemplate,
    pub codebook: UnitCodebook,
    pub records: Vec<SequenceRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn template_id(template: &FaceTemplate) -> String {
    sha256_hex(&serde_json::to_vec(template).expect("template serializes"))
}

pub fn codebook_id(codebook: &UnitCodebook) -> String {
    sha256_hex(&serde_json::to_vec(codebook).expect("codebook serializes"))
}

impl Corpus {
    pub fn lineage(&self) -> Lineage {
        Lineage {
            corpus_id: self.manifest.corpus_id.clone(),
            template_id: self.manifest.template_id.clone(),
            codebook_id: self.manifest.codebook_id.clone(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .sequences
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.index)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&SequenceRecord> {
        self.indices(split).into_iter().map(|i| &self.records[i]).collect()
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerProfile> {
        self.manifest
            .speakers
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::NotFound(format!("speaker {id}")))
    }

    pub fn speaker_embedding(&self, id: usize) -> Result<SpeakerEmbedding> {
        Ok(SpeakerEmbedding {
            vec: self.speaker(id)?.embedding.clone(),
        })
    }

    pub fn context(&self) -> SynthContext<'_> {
        SynthContext {
            config: &self.manifest.config,
            template: &self.template,
            phonemes: &self.manifest.phonemes,
            speakers: &self.manifest.speakers,
            codebook: &self.codebook,
        }
    }
}

/// Matches every phoneme's expected clean frame to its nearest centroid so
/// that unit ids coincide with phoneme unit ids.
fn align_codebook(codebook: &UnitCodebook, phonemes: &[PhonemeSpec], mean_tilt: &[f64]) -> Result<UnitCodebook> {
    let n = codebook.num_units();
    let mut order: Vec<Option<usize>> = vec![None; n];
    let mut used = vec![false; n];
    for p in phonemes {
        let probe = clean_mel(
            &Utterance::new(vec![p.id], vec![synth::MIN_DURATION])?,
            phonemes,
            mean_tilt,
        )?;
        let c = codebook.nearest(probe.row(0));
        if used[c] {
            return Err(Error::DegenerateInput(format!(
                "unit codebook merged phoneme {} with another phoneme",
                p.id
            )));
        }
        used[c] = true;
        order[p.unit_id] = Some(c);
    }
    let mut spare = (0..n).filter(|c| !used[*c]);
    let order: Vec<usize> = order
        .into_iter()
        .map(|o| o.unwrap_or_else(|| spare.next().expect("one spare per free slot")))
        .collect();
    codebook.reordered(&order)
}

fn split_plan(config: &CorpusConfig) -> Vec<(Split, Vec<usize>, usize)> {
    let [n_train, n_val, _] = config.speaker_counts();
    let ids = |lo: usize, hi: usize| (lo..hi).collect::<Vec<_>>();
    vec![
        (Split::Train, ids(0, n_train), config.train_sequences),
        (Split::Val, ids(n_train, n_train + n_val), config.val_sequences),
        (Split::Test, ids(n_train + n_val, config.speakers), config.test_sequences),
    ]
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let base = config.seed;
    let template = make_synthetic_template(
        seed::stream_seed(base, "template"),
        config.n_vertices,
        config.psi_dim,
    )?;
    let phonemes = make_phoneme_bank(
        config.phonemes,
        config.n_units,
        template.mouth_channels.len(),
        seed::stream_seed(base, "phonemes"),
    )?;

    let mut speakers = Vec::new();
    let mut entries = Vec::new();
    for (split, ids, count) in split_plan(config) {
        for &id in &ids {
            speakers.push(SpeakerProfile {
                id,
                split,
                tilt: synth::random_tilt(config.tilt_norm, seed::derive_seed(seed::stream_seed(base, "tilt"), id as u64)),
                embedding: Vec::new(),
            });
        }
        for k in 0..count {
            let index = entries.len();
            let utterance = random_utterance(
                config.phonemes,
                config.min_frames,
                config.max_frames,
                seed::derive_seed(seed::stream_seed(base, "utterance"), index as u64),
            )?;
            entries.push(SequenceEntry {
                index,
                file: format!("seq_{index:05}.thsq"),
                speaker_id: ids[k % ids.len()],
                split,
                seed: seed::derive_seed(seed::stream_seed(base, "sequence"), index as u64),
                utterance,
            });
        }
    }

    let tilt_of: HashMap<usize, &[f64]> = speakers.iter().map(|s| (s.id, s.tilt.as_slice())).collect();
    let train_clean: Vec<MelSpectrogram> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| MelSpectrogram::new(clean_mel(&e.utterance, &phonemes, tilt_of[&e.speaker_id])?))
        .collect::<Result<_>>()?;
    let refs: Vec<&MelSpectrogram> = train_clean.iter().collect();
    let raw_codebook = fit_unit_codebook(&refs, config.n_units, seed::stream_seed(base, "codebook"))?;
    let train_speakers: Vec<&SpeakerProfile> = speakers.iter().filter(|s| s.split == Split::Train).collect();
    let mean_tilt: Vec<f64> = (0..crate::audio::MEL_BINS)
        .map(|j| train_speakers.iter().map(|s| s.tilt[j]).sum::<f64>() / train_speakers.len() as f64)
        .collect();
    let codebook = align_codebook(&raw_codebook, &phonemes, &mean_tilt)?;

    let records: Vec<SequenceRecord> = {
        let ctx = SynthContext {
            config,
            template: &template,
            phonemes: &phonemes,
            speakers: &speakers,
            codebook: &codebook,
        };
        entries
            .iter()
            .map(|e| synth_sequence(&e.utterance, e.speaker_id, &ctx, e.seed))
            .collect::<Result<_>>()?
    };

    let train_mels: Vec<&MelSpectrogram> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| &records[e.index].mel)
        .collect();
    let embedder = SpeakerEmbedder::new(seed::stream_seed(base, "speaker-embedder")).with_background(&train_mels)?;
    for s in speakers.iter_mut() {
        let own: Vec<&Mat> = entries
            .iter()
            .filter(|e| e.speaker_id == s.id)
            .map(|e| &records[e.index].mel.frames)
            .collect();
        let pooled = ndarray::concatenate(ndarray::Axis(0), &own.iter().map(|m| m.view()).collect::<Vec<_>>())
            .map_err(|e| Error::InvalidArgument(format!("speaker {} mels: {e}", s.id)))?;
        s.embedding = embedder.embed_frames(&pooled)?.vec;
    }

    let template_id = template_id(&template);
    let codebook_id = codebook_id(&codebook);
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    hasher.update(template_id.as_bytes());
    hasher.update(codebook_id.as_bytes());
    hasher.update(serde_json::to_vec(&phonemes).expect("bank serializes"));
    let corpus_id = hex::encode(hasher.finalize());

    Ok(Corpus {
        manifest: CorpusManifest {
            version: MANIFEST_VERSION,
            corpus_id,
            config: config.clone(),
            template_file: "template.json".into(),
            template_id,
            codebook_file: "codebook.json".into(),
            codebook_id,
            phonemes,
            embedder,
            speakers,
            sequences: entries,
        },
        template,
        codebook,
        records,
    })
}
