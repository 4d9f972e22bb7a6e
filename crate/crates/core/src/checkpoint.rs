//! Model checkpoint container.
//!
//! Layout (little-endian): `"LCKP"`, u32 version, u64 header length, a JSON
//! header, then every tensor listed in the header as raw f64 values in
//! row-major order.

use std::fs;
use std::path::Path;

use lipcycle_grad::{Mat, ParamSet};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioEncoder, EncoderMode};
use crate::corpus::Lineage;
use crate::diffusion::{DenoiserConfig, DenoiserModel, Normalization};
use crate::error::{Error, Result};
use crate::m2s::{M2SConfig, M2SModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const KIND_M2S: &str = "m2s";
pub const KIND_DENOISER: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    artifact_version: String,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
}

/// Kind tag, free-form metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            artifact_version: crate::ARTIFACT_VERSION.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, m)| TensorInfo {
                    name: n.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n: usize = self.tensors.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 {
            return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| fail(format!("truncated header: declared {hlen} bytes")))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fail(format!("bad header: {e}")))?;
        let n: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let data = &bytes[16 + hlen..];
        if data.len() != 8 * n {
            return Err(fail(format!(
                "expected {} tensor bytes, found {}",
                8 * n,
                data.len()
            )));
        }
        let mut at = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let k = t.rows * t.cols;
            let vals: Vec<f64> = data[at..at + 8 * k]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += 8 * k;
            tensors.push((t.name, Mat::from_shape_vec((t.rows, t.cols), vals).expect("sized")));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(path, format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn take(&mut self, name: &str, shape: (usize, usize), path: &Path) -> Result<Mat> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        let (_, m) = self.tensors.remove(i);
        if m.dim() != shape {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {:?}, expected {shape:?}", m.dim()),
            ));
        }
        Ok(m)
    }

    /// Replaces every tensor of `ps` by the stored tensor of the same name.
    fn restore(&mut self, ps: &mut ParamSet, path: &Path) -> Result<()> {
        let mut src = ParamSet::new();
        let wanted: Vec<(String, (usize, usize))> = ps.iter().map(|(n, m)| (n.to_string(), m.dim())).collect();
        for (name, shape) in wanted {
            let m = self.take(&name, shape, path)?;
            src.add(name, m);
        }
        ps.assign_from(&src);
        Ok(())
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::format(path, format!("header lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(path, format!("bad `{key}`: {e}")))
    }

    fn finish(&self, path: &Path) -> Result<()> {
        if let Some((n, _)) = self.tensors.first() {
            return Err(Error::format(path, format!("unexpected tensor {n}")));
        }
        Ok(())
    }
}

fn params_of(ps: &ParamSet) -> impl Iterator<Item = (String, Mat)> + '_ {
    ps.iter().map(|(n, m)| (n.to_string(), m.clone()))
}

pub fn m2s_checkpoint(model: &M2SModel) -> Checkpoint {
    let mut tensors: Vec<(String, Mat)> = params_of(&model.params).collect();
    tensors.push(("input_mean".into(), model.input_mean.clone()));
    tensors.push(("input_std".into(), model.input_std.clone()));
    Checkpoint {
        kind: KIND_M2S.into(),
        meta: serde_json::json!({ "config": model.config, "lineage": model.lineage }),
        tensors,
    }
}

pub fn m2s_from_checkpoint(mut ck: Checkpoint, path: &Path) -> Result<M2SModel> {
    ck.expect_kind(KIND_M2S, path)?;
    let config: M2SConfig = ck.meta_field("config", path)?;
    let lineage: Option<Lineage> = ck.meta_field("lineage", path)?;
    let d = config.input_dim;
    let mut model = M2SModel::new(config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    ck.restore(&mut model.params, path)?;
    model.input_mean = ck.take("input_mean", (1, d), path)?;
    model.input_std = ck.take("input_std", (1, d), path)?;
    model.lineage = lineage;
    ck.finish(path)?;
    Ok(model)
}

pub fn denoiser_checkpoint(model: &DenoiserModel) -> Checkpoint {
    let mut tensors: Vec<(String, Mat)> = params_of(&model.params).collect();
    tensors.extend(params_of(&model.encoder.params));
    tensors.push(("norm.mean".into(), model.norm.mean.clone()));
    tensors.push(("norm.std".into(), model.norm.std.clone()));
    tensors.push(("enc.mel_mean".into(), model.encoder.mel_mean.clone()));
    tensors.push(("enc.mel_std".into(), model.encoder.mel_std.clone()));
    Checkpoint {
        kind: KIND_DENOISER.into(),
        meta: serde_json::json!({
            "config": model.config,
            "param_dim": model.param_dim,
            "encoder_mode": model.encoder.mode,
            "lineage": model.lineage,
        }),
        tensors,
    }
}

pub fn denoiser_from_checkpoint(mut ck: Checkpoint, path: &Path) -> Result<DenoiserModel> {
    ck.expect_kind(KIND_DENOISER, path)?;
    let config: DenoiserConfig = ck.meta_field("config", path)?;
    let param_dim: usize = ck.meta_field("param_dim", path)?;
    let mode: EncoderMode = ck.meta_field("encoder_mode", path)?;
    let lineage: Option<Lineage> = ck.meta_field("lineage", path)?;
    let encoder = AudioEncoder::new(0, config.audio_dim, mode);
    let mut model =
        DenoiserModel::new(config, param_dim, encoder, 0).map_err(|e| Error::format(path, e.to_string()))?;
    ck.restore(&mut model.params, path)?;
    ck.restore(&mut model.encoder.params, path)?;
    model.norm = Normalization {
        mean: ck.take("norm.mean", (1, param_dim), path)?,
        std: ck.take("norm.std", (1, param_dim), path)?,
    };
    let bins = model.encoder.mel_mean.ncols();
    model.encoder.mel_mean = ck.take("enc.mel_mean", (1, bins), path)?;
    model.encoder.mel_std = ck.take("enc.mel_std", (1, bins), path)?;
    model.lineage = lineage;
    ck.finish(path)?;
    Ok(model)
}

pub fn save_m2s(model: &M2SModel, path: &Path) -> Result<()> {
    m2s_checkpoint(model).save(path)
}

pub fn load_m2s(path: &Path) -> Result<M2SModel> {
    m2s_from_checkpoint(Checkpoint::load(path)?, path)
}

pub fn save_denoiser(model: &DenoiserModel, path: &Path) -> Result<()> {
    denoiser_checkpoint(model).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserModel> {
    denoiser_from_checkpoint(Checkpoint::load(path)?, path)
}
