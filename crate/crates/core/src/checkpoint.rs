//! Checkpoint directories: a human-readable `manifest.json` mapping each
//! tensor name to its dtype, shape and byte range, plus one contiguous
//! little-endian `weights.bin` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::schedule::{PredictionTarget, ScheduleConfig};
use crate::tensor::Tensor;
use crate::unet::UNetConfig;
use crate::vae::VaeConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT_VERSION: u32 = 1;

/// Prefix of optimizer state tensors.
pub const MOMENTUM_PREFIX: &str = "optim.momentum.";
/// Prefix of exponential-moving-average weights.
pub const EMA_PREFIX: &str = "ema.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Image,
    Keyframe,
    Interp,
}

/// Everything in the manifest except the tensor table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_target: Option<PredictionTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unet: Option<UNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<VaeConfig>,
    /// Multiplier applied to encoder means before diffusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_scale: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(kind: ModelKind) -> Self {
        Self { kind, step: 0, prediction_target: None, schedule: None, unet: None, vae: None, latent_scale: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Model weights plus optional optimizer and EMA state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: ParamSet<f32>) -> Self {
        Self { meta, tensors }
    }

    /// Model weights only.
    pub fn weights(&self) -> ParamSet<f32> {
        self.tensors.filtered(|n| !n.starts_with(MOMENTUM_PREFIX) && !n.starts_with(EMA_PREFIX))
    }

    /// Tensors stored under `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> ParamSet<f32> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
            .collect()
    }

    /// EMA weights when present, plain weights otherwise.
    pub fn inference_weights(&self) -> ParamSet<f32> {
        let ema = self.group(EMA_PREFIX);
        if ema.is_empty() {
            self.weights()
        } else {
            ema
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes `manifest.json` and `weights.bin` into `dir`, creating it.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(ckpt.tensors.num_elements() * 4);
    let mut tensors = BTreeMap::new();
    for (name, t) in ckpt.tensors.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        };
        tensors.insert(name.clone(), entry);
    }
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
    let manifest = Manifest { format_version: FORMAT_VERSION, meta: ckpt.meta.clone(), tensors };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Loads and validates a checkpoint directory.
///
/// Rejects unknown dtypes, byte lengths that disagree with the shape,
/// ranges outside the blob, overlapping ranges and unclaimed trailing bytes.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path).map_err(|e| match e {
        Error::Json { source, .. } => corrupt(&manifest_path, format!("unreadable manifest: {source}")),
        other => other,
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            &manifest_path,
            format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;

    let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    for (name, e) in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(&manifest_path, format!("tensor `{name}` has dtype `{}`, only f32 is supported", e.dtype)));
        }
        let elems: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.length != 4 * elems {
            return Err(corrupt(
                &manifest_path,
                format!("tensor `{name}`: length {} does not equal 4 * prod(shape {:?}) = {}", e.length, e.shape, 4 * elems),
            ));
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64).ok_or_else(|| {
            corrupt(
                &manifest_path,
                format!(
                    "tensor `{name}`: bytes {}..{} exceed the {}-byte blob",
                    e.offset,
                    e.offset.saturating_add(e.length),
                    blob.len()
                ),
            )
        })?;
        ranges.push((e.offset, end, name));
    }
    ranges.sort();
    for pair in ranges.windows(2) {
        let ((_, a_end, a), (b_start, _, b)) = (pair[0], pair[1]);
        if b_start < a_end {
            return Err(corrupt(
                &manifest_path,
                format!("tensors `{a}` and `{b}` overlap at byte offset {b_start} (previous ends at {a_end})"),
            ));
        }
    }
    let claimed: u64 = ranges.iter().map(|(s, e, _)| e - s).sum();
    if claimed != blob.len() as u64 {
        return Err(corrupt(
            &weights_path,
            format!("blob holds {} bytes but the manifest accounts for {claimed}", blob.len()),
        ));
    }

    let mut tensors = ParamSet::new();
    for (name, e) in &manifest.tensors {
        let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.insert(name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok(Checkpoint { meta: manifest.meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        ps.insert("a.weight", Tensor::randn(&[3, 4], 1.0, &mut rng));
        ps.insert("b", Tensor::scalar(f32::MIN_POSITIVE));
        ps.insert("c", Tensor::from_vec(&[2], vec![-0.0, f32::MAX]).unwrap());
        ps.insert("empty", Tensor::zeros(&[0, 5]));
        let mut meta = CheckpointMeta::new(ModelKind::Keyframe);
        meta.step = 17;
        meta.unet = Some(UNetConfig::default());
        meta.schedule = Some(ScheduleConfig::default());
        meta.prediction_target = Some(PredictionTarget::X0);
        Checkpoint::new(meta, ps)
    }

    fn bits(ps: &ParamSet<f32>) -> Vec<(String, Vec<u32>)> {
        ps.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(bits(&back.tensors), bits(&ck.tensors));
    }

    #[test]
    fn manifest_lengths_are_four_times_elements() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        for (_, e) in m["tensors"].as_object().unwrap() {
            let n: u64 = e["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
            assert_eq!(e["length"].as_u64().unwrap(), 4 * n);
        }
        assert_eq!(m["kind"], "keyframe");
        assert_eq!(m["prediction_target"], "x0");
    }

    fn tamper(edit: impl Fn(&mut serde_json::Value)) -> String {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        edit(&mut m);
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        load_checkpoint(dir.path()).unwrap_err().to_string()
    }

    #[test]
    fn tampered_offsets_are_rejected() {
        let err = tamper(|m| m["tensors"]["b"]["offset"] = 0.into());
        assert!(err.contains("overlap"), "{err}");
        let err = tamper(|m| m["tensors"]["c"]["offset"] = 1_000_000.into());
        assert!(err.contains("exceed"), "{err}");
        let err = tamper(|m| m["tensors"]["a.weight"]["shape"] = serde_json::json!([4, 4]));
        assert!(err.contains("prod(shape"), "{err}");
        let err = tamper(|m| m["tensors"]["a.weight"]["dtype"] = "f16".into());
        assert!(err.contains("dtype"), "{err}");
        let err = tamper(|m| m["surprise"] = 1.into());
        assert!(err.contains("unreadable manifest"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample(), dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("exceed"));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        fs::write(&path, &longer).unwrap();
        assert!(load_checkpoint(dir.path()).unwrap_err().to_string().contains("accounts for"));
    }

    #[test]
    fn groups_split_state() {
        let mut ck = sample();
        ck.tensors.insert(format!("{MOMENTUM_PREFIX}a.weight"), Tensor::zeros(&[3, 4]));
        ck.tensors.insert(format!("{EMA_PREFIX}b"), Tensor::scalar(2.0));
        assert_eq!(ck.weights().len(), 4);
        assert_eq!(ck.group(MOMENTUM_PREFIX).names().cloned().collect::<Vec<_>>(), vec!["a.weight".to_string()]);
        assert_eq!(ck.inference_weights().len(), 1);
    }
}
