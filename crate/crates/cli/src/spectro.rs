//! Spectrogram stores: a directory holding `pipeline.json` and one `.vtsr`
//! tensor `[segments, channels, size, size]` per audio file, mirroring the
//! audio paths. `preprocess` writes one explicitly; training and inference
//! otherwise fill a cache store keyed by the pipeline settings.

use std::path::{Path, PathBuf};

use sonovis_core::dataset::{ManifestEntry, PairManifest};
use sonovis_core::dsp::{read_wav, AudioPipeline};
use sonovis_diff::io::{read_tensor, write_tensor};
use sonovis_diff::{par, Tensor};

use crate::error::{CliError, Kind, Result};
use crate::fsutil::{mkdir, write_atomic};
use crate::runlog::sha256_hex;

pub const PIPELINE_FILE: &str = "pipeline.json";
pub const CACHE_ENV: &str = "SONOVIS_CACHE_DIR";

pub struct SpecStore {
    pub root: PathBuf,
    pub pipeline: AudioPipeline,
}

impl SpecStore {
    /// Opens an existing store, which must have been made with `pipeline`.
    pub fn open(root: &Path, pipeline: &AudioPipeline) -> Result<Self> {
        let p = root.join(PIPELINE_FILE);
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        let stored: AudioPipeline = serde_json::from_slice(&bytes)?;
        if &stored != pipeline {
            return Err(CliError::new(
                Kind::Incompatible,
                format!("spectrograms in {} were made with different front-end settings", root.display()),
            ));
        }
        Ok(SpecStore {
            root: root.to_path_buf(),
            pipeline: *pipeline,
        })
    }

    /// Creates (or reuses) a store at `root` for `pipeline`.
    pub fn create(root: &Path, pipeline: &AudioPipeline) -> Result<Self> {
        pipeline.validate()?;
        if root.join(PIPELINE_FILE).is_file() {
            return Self::open(root, pipeline);
        }
        mkdir(root)?;
        write_atomic(&root.join(PIPELINE_FILE), &serde_json::to_vec_pretty(pipeline)?)?;
        Ok(SpecStore {
            root: root.to_path_buf(),
            pipeline: *pipeline,
        })
    }

    /// The cache store for `pipeline` under `$SONOVIS_CACHE_DIR`, or under
    /// `.sonovis-cache` next to the manifest.
    pub fn cache(manifest_root: &Path, pipeline: &AudioPipeline) -> Result<Self> {
        let base = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| manifest_root.join(".sonovis-cache"));
        let key = sha256_hex(serde_json::to_string(pipeline)?.as_bytes());
        Self::create(&base.join(&key[..16]), pipeline)
    }

    pub fn tensor_path(&self, audio_rel: &Path) -> PathBuf {
        self.root.join(audio_rel).with_extension("vtsr")
    }

    /// All segments of one audio file, computed and stored on first use.
    pub fn segments(&self, audio_abs: &Path, audio_rel: &Path) -> Result<Tensor<f32>> {
        let path = self.tensor_path(audio_rel);
        if path.is_file() {
            return Ok(read_tensor(&path)?);
        }
        let t = compute(&self.pipeline, audio_abs)?;
        if let Some(parent) = path.parent() {
            mkdir(parent)?;
        }
        write_tensor(&path, &t)?;
        Ok(t)
    }

    /// First-segment spectrograms of `entries`, `[N, C, size, size]`.
    pub fn first_segments(&self, m: &PairManifest, entries: &[&ManifestEntry]) -> Result<Tensor<f32>> {
        if entries.is_empty() {
            return Err(CliError::new(Kind::Other, "no entries selected"));
        }
        let firsts = par::map_range(entries.len(), |i| -> Result<Tensor<f32>> {
            let e = entries[i];
            let all = self.segments(&m.resolve(&e.audio), &e.audio)?;
            if all.shape()[0] == 0 {
                return Err(CliError::new(Kind::Other, format!("audio of `{}` is shorter than one window", e.id)));
            }
            Ok(all.select(&[0]).reshape(&all.shape()[1..])?)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = firsts.iter().collect();
        Tensor::stack(&refs).map_err(|e| CliError::new(Kind::Incompatible, format!("clips disagree in channel count: {e}")))
    }
}

pub fn compute(pipeline: &AudioPipeline, audio: &Path) -> Result<Tensor<f32>> {
    let clip = read_wav(audio)?;
    let segs = pipeline.process(&clip)?;
    if segs.is_empty() {
        let s = pipeline.size;
        return Ok(Tensor::zeros(&[0, clip.num_channels(), s, s]));
    }
    let refs: Vec<&Tensor<f32>> = segs.iter().collect();
    Ok(Tensor::stack(&refs)?)
}
