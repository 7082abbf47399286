//! On-disk checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.
//! The manifest stores the network spec, one entry per tensor (name,
//! shape, role, frozen flag, offset into the payload in scalars), the
//! sorted list of frozen names, and a SHA-256 content hash over every
//! tensor. `params.bin` is the concatenation of all tensors as
//! little-endian `f32` in manifest order.
//!
//! Optimizer state for resuming is written next to it as
//! `optimizer.json` + `optimizer.bin` in the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use dgmnet_nn::{AdamState, ParamStore, Role};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{build_model, ArchError, Model, ModelSpec};
use crate::generator::{build_generator, Generator, GeneratorError, GeneratorSpec};
use crate::volume::Modality;

pub const FORMAT: &str = "dgmnet-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "params.bin";
pub const OPTIMIZER_MANIFEST: &str = "optimizer.json";
pub const OPTIMIZER_PAYLOAD: &str = "optimizer.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("content hash mismatch: manifest {expected}, payload {actual}")]
    Hash { expected: String, actual: String },
    #[error("checkpoint holds a {actual}, expected a {expected}")]
    WrongKind { expected: &'static str, actual: String },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: RoleTag,
    pub frozen: bool,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "snake_case")]
pub enum NetSpec {
    Model(ModelSpec),
    Generator(GeneratorSpec),
}

impl NetSpec {
    fn kind(&self) -> &'static str {
        match self {
            NetSpec::Model(_) => "model",
            NetSpec::Generator(_) => "generator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub net: NetSpec,
    /// True when every weight is frozen.
    pub frozen: bool,
    /// Modality of the data the weights were fitted on.
    pub modality: Option<Modality>,
    pub frozen_names: Vec<String>,
    pub content_hash: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (epoch, validation DSC, ...).
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CheckpointError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path: path.to_path_buf(), source })
}

fn encode_f32(values: impl Iterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn tensor_table(store: &ParamStore) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (_, p) in store.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            role: match p.role {
                Role::Weight => RoleTag::Weight,
                Role::Buffer => RoleTag::Buffer,
            },
            frozen: p.frozen,
            offset,
        });
        offset += p.value.len();
        encode_f32(p.value.iter().copied(), &mut payload);
    }
    (entries, payload)
}

fn write_store(
    dir: &Path,
    store: &ParamStore,
    net: NetSpec,
    modality: Option<Modality>,
    notes: serde_json::Map<String, serde_json::Value>,
) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (tensors, payload) = tensor_table(store);
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        version: VERSION,
        net,
        frozen: store.iter().all(|(_, p)| p.role == Role::Buffer || p.frozen),
        modality,
        frozen_names: store.frozen_names().into_iter().collect(),
        content_hash: store.content_hash(),
        tensors,
        notes,
    };
    let bin = dir.join(PAYLOAD);
    fs::write(&bin, payload).map_err(io_err(&bin))?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(CheckpointError::Format(format!("{} v{}", m.format, m.version)));
    }
    Ok(m)
}

/// Overwrite every entry of `store` from the checkpoint payload, restore
/// frozen flags, and check the content hash.
fn fill_store(dir: &Path, manifest: &CheckpointManifest, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let bin = dir.join(PAYLOAD);
    let payload = decode_f32(&fs::read(&bin).map_err(io_err(&bin))?);
    if manifest.tensors.len() != store.len() {
        return Err(CheckpointError::Format(format!(
            "checkpoint has {} tensors, network has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload
            .get(t.offset..t.offset + n)
            .ok_or_else(|| CheckpointError::Format(format!("{}: payload truncated", t.name)))?;
        let value = ArrayD::from_shape_vec(IxDyn(&t.shape), data.to_vec()).expect("length checked");
        store.set_value(&t.name, value).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let id = store.id(&t.name).expect("set_value succeeded");
        store.get_mut(id).frozen = t.frozen;
    }
    let actual = store.content_hash();
    if actual != manifest.content_hash {
        return Err(CheckpointError::Hash { expected: manifest.content_hash.clone(), actual });
    }
    Ok(())
}

pub fn save_model(
    model: &Model,
    dir: &Path,
    modality: Option<Modality>,
    notes: serde_json::Map<String, serde_json::Value>,
) -> Result<CheckpointManifest, CheckpointError> {
    write_store(dir, &model.store, NetSpec::Model(model.spec.clone()), modality, notes)
}

pub fn load_model(dir: &Path) -> Result<(Model, CheckpointManifest), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let NetSpec::Model(spec) = &manifest.net else {
        return Err(CheckpointError::WrongKind { expected: "model", actual: manifest.net.kind().into() });
    };
    let mut model = build_model(spec, 0)?;
    fill_store(dir, &manifest, &mut model.store)?;
    Ok((model, manifest))
}

pub fn save_generator(gen: &Generator, dir: &Path, modality: Option<Modality>) -> Result<CheckpointManifest, CheckpointError> {
    write_store(dir, &gen.store, NetSpec::Generator(gen.spec().clone()), modality, Default::default())
}

pub fn load_generator(dir: &Path) -> Result<(Generator, CheckpointManifest), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let NetSpec::Generator(spec) = &manifest.net else {
        return Err(CheckpointError::WrongKind { expected: "generator", actual: manifest.net.kind().into() });
    };
    let mut gen = build_generator(spec, 0)?;
    fill_store(dir, &manifest, &mut gen.store)?;
    Ok((gen, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    /// (name, shape, offset of the first moment); the second moment
    /// follows immediately.
    moments: Vec<(String, Vec<usize>, usize)>,
}

pub fn save_optimizer(state: &AdamState, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut payload = Vec::new();
    let mut moments = Vec::new();
    let mut offset = 0;
    for (name, (m, v)) in &state.moments {
        moments.push((name.clone(), m.shape().to_vec(), offset));
        encode_f32(m.iter().copied(), &mut payload);
        encode_f32(v.iter().copied(), &mut payload);
        offset += 2 * m.len();
    }
    let bin = dir.join(OPTIMIZER_PAYLOAD);
    fs::write(&bin, payload).map_err(io_err(&bin))?;
    write_json(&dir.join(OPTIMIZER_MANIFEST), &OptimizerManifest { step: state.step, moments })
}

pub fn load_optimizer(dir: &Path) -> Result<AdamState, CheckpointError> {
    let man: OptimizerManifest = read_json(&dir.join(OPTIMIZER_MANIFEST))?;
    let bin = dir.join(OPTIMIZER_PAYLOAD);
    let payload = decode_f32(&fs::read(&bin).map_err(io_err(&bin))?);
    let mut state = AdamState { step: man.step, ..Default::default() };
    for (name, shape, offset) in man.moments {
        let n: usize = shape.iter().product();
        let data = payload
            .get(offset..offset + 2 * n)
            .ok_or_else(|| CheckpointError::Format(format!("{name}: optimizer payload truncated")))?;
        let m = ArrayD::from_shape_vec(IxDyn(&shape), data[..n].to_vec()).expect("length checked");
        let v = ArrayD::from_shape_vec(IxDyn(&shape), data[n..].to_vec()).expect("length checked");
        state.moments.insert(name, (m, v));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::desk(Variant::DgmNet, 16);
        let model = build_model(&spec, 9).unwrap();
        let man = save_model(&model, dir.path(), Some(Modality::LowContrast), Default::default()).unwrap();
        assert!(!man.frozen);
        assert!(man.frozen_names.iter().all(|n| n.starts_with("generator")));
        let (back, _) = load_model(dir.path()).unwrap();
        assert_eq!(back.store.content_hash(), model.store.content_hash());
        assert_eq!(back.store.frozen_names(), model.store.frozen_names());
        assert_eq!(back.parameter_count(), model.parameter_count());
    }

    #[test]
    fn generator_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::desk(Variant::DgmNet, 16).generator.unwrap();
        let mut gen = build_generator(&spec, 4).unwrap();
        gen.freeze();
        let man = save_generator(&gen, dir.path(), Some(Modality::HighContrast)).unwrap();
        assert!(man.frozen);
        assert_eq!(man.modality, Some(Modality::HighContrast));
        let (back, _) = load_generator(dir.path()).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.hash(), gen.hash());
        assert!(matches!(load_model(dir.path()), Err(CheckpointError::WrongKind { .. })));
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&ModelSpec::desk(Variant::Unet, 16), 1).unwrap();
        save_model(&model, dir.path(), None, Default::default()).unwrap();
        let bin = dir.path().join(PAYLOAD);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 0x40;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_model(dir.path()), Err(CheckpointError::Hash { .. })));
    }
}
