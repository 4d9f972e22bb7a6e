//! Corpus directory layout: `manifest.json`, `template.json`,
//! `codebook.json` and one binary `.thsq` file per sequence.
//!
//! Sequence file (little-endian): `"THSQ"`, u32 version, u32 T, u32 psi_dim,
//! u32 mel_frames, u32 mel_bins, u32 n_units, u16 speaker_id, u16 reserved,
//! then f32 expressions `T x (psi_dim+3)`, f32 mel `mel_frames x mel_bins`
//! and u16 unit ids.

use std::fs;
use std::path::Path;

use lipcycle_grad::Mat;

use super::{codebook_id, template_id, Corpus, CorpusManifest, SequenceRecord};
use crate::audio::{MelSpectrogram, SpeechUnits, UnitCodebook};
use crate::error::{Error, Result};
use crate::face::{ExpressionSequence, FaceTemplate};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"THSQ";
pub const SEQUENCE_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;
pub const SEQUENCE_DIR: &str = "sequences";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_sequence(rec: &SequenceRecord, n_units: usize) -> Result<Vec<u8>> {
    let (t, width) = rec.expressions.frames.dim();
    let (mf, bins) = rec.mel.frames.dim();
    let speaker = u16::try_from(rec.speaker_id)
        .map_err(|_| Error::InvalidArgument(format!("speaker id {} exceeds u16", rec.speaker_id)))?;
    if n_units > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!("{n_units} units exceed u16 ids")));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * (t * width + mf * bins) + 2 * mf);
    out.extend_from_slice(SEQUENCE_MAGIC);
    for v in [SEQUENCE_VERSION, t as u32, (width - 3) as u32, mf as u32, bins as u32, n_units as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&speaker.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in rec.expressions.frames.iter().chain(rec.mel.frames.iter()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for id in &rec.units.ids {
        out.extend_from_slice(&(*id as u16).to_le_bytes());
    }
    Ok(out)
}

pub struct DecodedSequence {
    pub expressions: Mat,
    pub mel: Mat,
    pub units: Vec<usize>,
    pub speaker_id: usize,
    pub n_units: usize,
}

pub fn decode_sequence_bytes(bytes: &[u8], path: &Path) -> Result<DecodedSequence> {
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER_BYTES {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SEQUENCE_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes")) as usize;
    let version = u32_at(4) as u32;
    if version != SEQUENCE_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (t, psi, mf, bins, n_units) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24));
    let speaker_id = u16_at(28);
    let width = psi + 3;
    let expected = HEADER_BYTES + 4 * (t * width + mf * bins) + 2 * mf;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes for the declared shapes, found {}",
            bytes.len()
        )));
    }
    let mut at = HEADER_BYTES;
    let mut floats = |n: usize| {
        let v: Vec<f64> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        at += 4 * n;
        v
    };
    let expressions = Mat::from_shape_vec((t, width), floats(t * width)).expect("sized above");
    let mel = Mat::from_shape_vec((mf, bins), floats(mf * bins)).expect("sized above");
    let start = HEADER_BYTES + 4 * (t * width + mf * bins);
    let units: Vec<usize> = bytes[start..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")) as usize)
        .collect();
    if let Some(u) = units.iter().find(|u| **u >= n_units) {
        return Err(fail(format!("unit id {u} out of range for {n_units} units")));
    }
    Ok(DecodedSequence {
        expressions,
        mel,
        units,
        speaker_id,
        n_units,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

pub fn persist_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let seq_dir = dir.join(SEQUENCE_DIR);
    fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
    let m = &corpus.manifest;
    write(&dir.join(&m.template_file), &to_json(&corpus.template))?;
    write(&dir.join(&m.codebook_file), &to_json(&corpus.codebook))?;
    for e in &m.sequences {
        let bytes = encode_sequence(&corpus.records[e.index], corpus.codebook.num_units())?;
        write(&seq_dir.join(&e.file), &bytes)?;
    }
    write(&dir.join(MANIFEST_FILE), &to_json(m))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = parse_json(&manifest_path)?;
    if manifest.version != super::MANIFEST_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let template_path = dir.join(&manifest.template_file);
    let template: FaceTemplate = parse_json(&template_path)?;
    template.validate()?;
    if template_id(&template) != manifest.template_id {
        return Err(Error::format(template_path, "template does not match the manifest id"));
    }
    let codebook_path = dir.join(&manifest.codebook_file);
    let codebook: UnitCodebook = parse_json(&codebook_path)?;
    if codebook_id(&codebook) != manifest.codebook_id {
        return Err(Error::format(codebook_path, "codebook does not match the manifest id"));
    }

    let mut records = Vec::with_capacity(manifest.sequences.len());
    for (i, e) in manifest.sequences.iter().enumerate() {
        let path = dir.join(SEQUENCE_DIR).join(&e.file);
        if e.index != i {
            return Err(Error::format(&manifest_path, format!("sequence entry {i} has index {}", e.index)));
        }
        let d = decode_sequence_bytes(&read(&path)?, &path)?;
        let mismatch = |what: &str| Error::format(&path, format!("{what} disagrees with the manifest"));
        if d.speaker_id != e.speaker_id {
            return Err(mismatch("speaker id"));
        }
        if d.expressions.nrows() != e.utterance.frames() || d.expressions.ncols() != template.param_dim() {
            return Err(mismatch("expression shape"));
        }
        if d.n_units != codebook.num_units() {
            return Err(mismatch("unit count"));
        }
        let content = |err: Error| Error::format(&path, err.to_string());
        records.push(SequenceRecord {
            expressions: ExpressionSequence::new(d.expressions).map_err(content)?,
            mel: MelSpectrogram::new(d.mel).map_err(content)?,
            units: SpeechUnits { ids: d.units },
            speaker_id: d.speaker_id,
            utterance: e.utterance.clone(),
        });
    }
    Ok(Corpus {
        manifest,
        template,
        codebook,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Split};

    fn tiny() -> Corpus {
        generate_corpus(&CorpusConfig {
            train_sequences: 6,
            val_sequences: 2,
            test_sequences: 2,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        persist_corpus(&c, a.path()).unwrap();
        let loaded = load_corpus(a.path()).unwrap();
        assert_eq!(loaded.records, c.records);
        assert_eq!(loaded.manifest, c.manifest);
        assert_eq!(loaded.template, c.template);
        persist_corpus(&loaded, b.path()).unwrap();
        for e in &c.manifest.sequences {
            let x = fs::read(a.path().join(SEQUENCE_DIR).join(&e.file)).unwrap();
            let y = fs::read(b.path().join(SEQUENCE_DIR).join(&e.file)).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let train: std::collections::HashSet<usize> =
            loaded.split(Split::Train).iter().map(|r| r.speaker_id).collect();
        assert!(loaded.split(Split::Test).iter().all(|r| !train.contains(&r.speaker_id)));
    }

    #[test]
    fn header_is_thirty_two_bytes() {
        let c = tiny();
        let bytes = encode_sequence(&c.records[0], 8).unwrap();
        let r = &c.records[0];
        assert_eq!(&bytes[..4], b"THSQ");
        assert_eq!(
            bytes.len(),
            32 + 4 * (r.frames() * 19 + r.mel.len() * 80) + 2 * r.mel.len()
        );
    }

    #[test]
    fn corrupted_magic_names_the_file() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        persist_corpus(&c, dir.path()).unwrap();
        let path = dir.path().join(SEQUENCE_DIR).join(&c.manifest.sequences[1].file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        match load_corpus(dir.path()) {
            Err(Error::Format { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        persist_corpus(&c, dir.path()).unwrap();
        let path = dir.path().join(SEQUENCE_DIR).join(&c.manifest.sequences[0].file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Format { .. })));
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let c = tiny();
        let mut bytes = encode_sequence(&c.records[0], 8).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_sequence_bytes(&bytes, Path::new("x.thsq")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
