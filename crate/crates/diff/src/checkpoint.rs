//! Checkpoint directories: `meta.json`, one `.vtsr` per parameter under
//! `params/`, and Adam moments under `optim/`. Directories are assembled
//! under a temporary name and swapped in with renames.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::io::{read_tensor, write_tensor};
use crate::layers::LayerSpec;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT: &str = "sonovis-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub networks: BTreeMap<String, Vec<LayerSpec>>,
    pub params: Vec<ParamMeta>,
    pub optimizer: Option<OptimizerMeta>,
    pub global_step: u64,
    pub seed: u64,
    /// Model-specific metadata (configs, training state).
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(networks: BTreeMap<String, Vec<LayerSpec>>, global_step: u64, seed: u64, extra: serde_json::Value) -> Self {
        CheckpointMeta {
            format: FORMAT.to_string(),
            networks,
            params: Vec::new(),
            optimizer: None,
            global_step,
            seed,
            extra,
        }
    }
}

fn param_file(dir: &Path, sub: &str, name: &str) -> PathBuf {
    dir.join(sub).join(format!("{name}.vtsr"))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| DiffError::io(p, e))
}

/// Temporary sibling path used while a directory artifact is being built.
pub fn staging_path(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Moves a fully written staging directory into place. An existing artifact
/// stays in place until the new one is complete.
pub fn commit_dir(staging: &Path, dir: &Path) -> Result<()> {
    if dir.exists() {
        let old = dir.with_file_name(format!(
            ".{}.old-{}",
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            std::process::id()
        ));
        fs::rename(dir, &old).map_err(|e| DiffError::io(dir, e))?;
        fs::rename(staging, dir).map_err(|e| DiffError::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| DiffError::io(&old, e))?;
    } else {
        if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        fs::rename(staging, dir).map_err(|e| DiffError::io(dir, e))?;
    }
    Ok(())
}

pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, store: &ParamStore<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    save_checkpoint_with(dir, meta, store, adam, &[])
}

/// Like [`save_checkpoint`], also writing `files` (name, bytes) into the
/// directory before it is committed.
pub fn save_checkpoint_with(
    dir: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<f32>,
    adam: Option<&AdamState<f32>>,
    files: &[(&str, Vec<u8>)],
) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| DiffError::io(&staging, e))?;
    }
    mkdir(&staging.join("params"))?;
    let mut meta = meta.clone();
    meta.params = store
        .entries()
        .iter()
        .map(|e| ParamMeta {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            kind: e.kind,
        })
        .collect();
    for e in store.entries() {
        write_tensor(&param_file(&staging, "params", &e.name), &e.value)?;
    }
    meta.optimizer = None;
    if let Some(adam) = adam {
        mkdir(&staging.join("optim"))?;
        meta.optimizer = Some(OptimizerMeta {
            config: adam.config,
            step: adam.step,
        });
        for id in store.ids() {
            let name = &store.entry(id).name;
            if let (Some(m), Some(v)) = (adam.first_moment(id), adam.second_moment(id)) {
                write_tensor(&param_file(&staging, "optim", &format!("m.{name}")), m)?;
                write_tensor(&param_file(&staging, "optim", &format!("v.{name}")), v)?;
            }
        }
    }
    let json = serde_json::to_vec_pretty(&meta)?;
    let meta_path = staging.join("meta.json");
    fs::write(&meta_path, json).map_err(|e| DiffError::io(&meta_path, e))?;
    for (name, bytes) in files {
        let p = staging.join(name);
        fs::write(&p, bytes).map_err(|e| DiffError::io(&p, e))?;
    }
    commit_dir(&staging, dir)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let bytes = fs::read(&path).map_err(|e| DiffError::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    if meta.format != FORMAT {
        return Err(DiffError::Format {
            path: path.display().to_string(),
            detail: format!("unsupported checkpoint format `{}`", meta.format),
        });
    }
    Ok(meta)
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = read_meta(dir)?;
    let mut store = ParamStore::new();
    for p in &meta.params {
        let t = read_tensor(&param_file(dir, "params", &p.name))?;
        if t.shape() != p.shape.as_slice() {
            return Err(DiffError::shape(p.name.clone(), format!("file {:?} vs meta {:?}", t.shape(), p.shape)));
        }
        store.add(p.name.clone(), t, p.kind)?;
    }
    let adam = match &meta.optimizer {
        None => None,
        Some(o) => {
            let mut state = AdamState::new(o.config, &store);
            state.step = o.step;
            for id in store.ids() {
                if store.kind(id) != ParamKind::Trainable {
                    continue;
                }
                let name = store.entry(id).name.clone();
                state.m[id.0] = Some(read_tensor(&param_file(dir, "optim", &format!("m.{name}")))?);
                state.v[id.0] = Some(read_tensor(&param_file(dir, "optim", &format!("v.{name}")))?);
            }
            Some(state)
        }
    };
    Ok(Checkpoint { meta, store, adam })
}

impl ParamStore<f32> {
    /// Copies values by name from `other`; every parameter of `self` must be
    /// present there with the same shape.
    pub fn copy_values_from(&mut self, other: &ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.entry(id).name.clone();
            let src = other.id(&name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            self.set(id, other.get(src).clone())?;
        }
        Ok(())
    }
}

impl AdamState<f32> {
    /// Re-indexes moments loaded for `from` onto the ids of `to`.
    pub fn remap(&self, from: &ParamStore<f32>, to: &ParamStore<f32>) -> Result<AdamState<f32>> {
        let mut out = AdamState::new(self.config, to);
        out.step = self.step;
        for id in to.ids() {
            if to.kind(id) != ParamKind::Trainable {
                continue;
            }
            let name = &to.entry(id).name;
            let src = from.id(name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            out.m[id.0] = self.m[src.0].clone();
            out.v[id.0] = self.v[src.0].clone();
        }
        Ok(out)
    }
}

/// Bit pattern of every value, for byte-exact comparisons.
pub fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
