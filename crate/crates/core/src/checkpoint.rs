//! Checkpoint directories: `manifest.json` plus one little-endian f64 blob
//! per named array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::fsutil::{replace_dir, write_atomic};
use crate::heads::HeadKind;
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobRole {
    Parameter,
    /// SGD velocity of the parameter with the same stem.
    Momentum,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub role: BlobRole,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub kind: HeadKind,
    pub n_c: usize,
    #[serde(rename = "K")]
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub model: ModelConfig,
    pub head: HeadEntry,
    pub normalization: Normalization,
    pub epochs_completed: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    pub blobs: Vec<BlobEntry>,
}

fn blobs_of(model: &Model) -> Vec<(BlobEntry, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, p) in model.named_params() {
        out.push((
            BlobEntry {
                file: format!("{name}.f64"),
                name: name.clone(),
                role: BlobRole::Parameter,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            },
            p.value.data().to_vec(),
        ));
        if let Some(m) = &p.momentum {
            out.push((
                BlobEntry {
                    file: format!("{name}.momentum.f64"),
                    name: name.clone(),
                    role: BlobRole::Momentum,
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                },
                m.clone(),
            ));
        }
    }
    for (i, b) in model.blocks.iter().enumerate() {
        for (stat, values) in [("running_mean", &b.bn.running_mean), ("running_var", &b.bn.running_var)] {
            let name = format!("bn{}.{stat}", i + 1);
            out.push((
                BlobEntry {
                    file: format!("{name}.f64"),
                    name,
                    role: BlobRole::Buffer,
                    shape: vec![values.len()],
                    trainable: false,
                },
                values.clone(),
            ));
        }
    }
    out
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64(path: &Path, bytes: &[u8], expected_len: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected_len * 8 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: expected_len * 8,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes `state` into `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(dir: impl AsRef<Path>, state: &TrainState, config: Option<&TrainConfig>) -> Result<()> {
    let model = &state.model;
    let blobs = blobs_of(model);
    let bn = &model.blocks[0].bn;
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA,
        model: model.config.clone(),
        head: HeadEntry {
            kind: model.head.kind,
            n_c: model.head.in_features,
            classes: model.head.classes,
        },
        normalization: state.normalization.clone(),
        epochs_completed: state.epochs_completed,
        bn_momentum: bn.momentum,
        bn_eps: bn.eps,
        config: config.cloned(),
        blobs: blobs.iter().map(|(e, _)| e.clone()).collect(),
    };
    replace_dir(dir.as_ref(), |tmp| {
        for (entry, values) in &blobs {
            write_atomic(&tmp.join(&entry.file), &encode_f64(values))?;
        }
        write_atomic(&tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if m.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Config(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA})",
            m.schema
        )));
    }
    Ok(m)
}

/// Rebuilds the training state saved by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainState, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.head.kind != manifest.model.head || manifest.head.classes != manifest.model.classes {
        return Err(Error::Config("manifest head entry disagrees with the model config".into()));
    }
    let mut model = build_model(&manifest.model, 0)?;
    if model.head.in_features != manifest.head.n_c {
        return Err(Error::Config(format!(
            "manifest says n_c = {}, model builds {}",
            manifest.head.n_c, model.head.in_features
        )));
    }
    let expected = blobs_of(&model);
    for (entry, _) in &expected {
        if entry.role == BlobRole::Momentum {
            continue;
        }
        if !manifest.blobs.iter().any(|b| b.name == entry.name && b.role == entry.role) {
            return Err(Error::Config(format!("checkpoint is missing `{}`", entry.name)));
        }
    }
    for entry in &manifest.blobs {
        let path = dir.join(&entry.file);
        let len = entry.shape.iter().product();
        let values = decode_f64(&path, &fs::read(&path)?, len)?;
        apply_blob(&mut model, entry, values)?;
    }
    for b in &mut model.blocks {
        b.bn.momentum = manifest.bn_momentum;
        b.bn.eps = manifest.bn_eps;
    }
    model.head_report = model.head.report();
    let state = TrainState {
        model,
        normalization: manifest.normalization.clone(),
        epochs_completed: manifest.epochs_completed,
    };
    Ok((state, manifest))
}

fn apply_blob(model: &mut Model, entry: &BlobEntry, values: Vec<f64>) -> Result<()> {
    let unknown = || Error::Config(format!("unknown checkpoint entry `{}`", entry.name));
    if entry.role == BlobRole::Buffer {
        let (block, stat) = entry
            .name
            .strip_prefix("bn")
            .and_then(|s| s.split_once('.'))
            .ok_or_else(unknown)?;
        let i: usize = block.parse().map_err(|_| unknown())?;
        let b = model.blocks.get_mut(i.wrapping_sub(1)).ok_or_else(unknown)?;
        let target = match stat {
            "running_mean" => &mut b.bn.running_mean,
            "running_var" => &mut b.bn.running_var,
            _ => return Err(unknown()),
        };
        if target.len() != values.len() {
            return Err(Error::Config(format!("`{}` has the wrong length", entry.name)));
        }
        *target = values;
        return Ok(());
    }
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let idx = names.iter().position(|n| *n == entry.name).ok_or_else(unknown)?;
    let mut params = model.params_mut();
    let p = &mut params[idx];
    if p.value.shape() != entry.shape.as_slice() {
        return Err(Error::Config(format!(
            "`{}` has shape {:?}, model expects {:?}",
            entry.name,
            entry.shape,
            p.value.shape()
        )));
    }
    if p.trainable != entry.trainable {
        return Err(Error::Config(format!("`{}` trainability does not match the head kind", entry.name)));
    }
    match entry.role {
        BlobRole::Parameter => p.value = Tensor::new(&entry.shape, values)?,
        BlobRole::Momentum => p.momentum = Some(values),
        BlobRole::Buffer => unreachable!(),
    }
    Ok(())
}
