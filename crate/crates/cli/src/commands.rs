use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sonovis_core::atnet::{self, AtNet, AtNetConfig, E2eModel};
use sonovis_core::dataset::{self, Bounds, ManifestEntry, Modality, PairManifest, Split, SynthConfig};
use sonovis_core::dsp::AudioPipeline;
use sonovis_core::image::{read_depth_png, read_label_png, write_depth_png, write_label_png, DepthImage, LabelMap};
use sonovis_core::metrics::{self, Denominator, DepthMetricReport, SegMetricReport};
use sonovis_core::train::{StopReason, TrainConfig, TrainState};
use sonovis_core::vq::{self, VqConfig, VqModel};
use sonovis_diff::checkpoint::read_meta;
use sonovis_diff::io::write_tensor;
use sonovis_diff::{par, AdamState, ParamStore, Tensor};

use crate::args::{load_config, required, set, ModalityArg, PipelineArgs, TrainArgs, VariantArg, VisualArgs};
use crate::error::{CliError, Kind, Result};
use crate::fsutil::{mkdir, require_dir, require_file, write_atomic, Staged};
use crate::runlog::{content_hash, RunTimer, RUN_LOG};
use crate::spectro::{self, SpecStore, PIPELINE_FILE};

fn load_manifest(path: &Path) -> Result<PairManifest> {
    require_file(path)?;
    let m = PairManifest::load(path)?;
    m.validate()?;
    Ok(m)
}

fn spec_store(m: &PairManifest, explicit: Option<&Path>, pipeline: &AudioPipeline) -> Result<SpecStore> {
    match explicit {
        Some(dir) => {
            require_dir(dir)?;
            SpecStore::open(dir, pipeline)
        }
        None => SpecStore::cache(&m.root, pipeline),
    }
}

/// Training-split visual targets in the layout the manifold model consumes.
fn visual_targets(m: &PairManifest, entries: &[&ManifestEntry], c: &VqConfig) -> Result<Tensor<f32>> {
    if entries.is_empty() {
        return Err(CliError::new(
            Kind::MissingInput,
            format!("manifest has no {} training entries", c.modality.as_str()),
        ));
    }
    Ok(match c.modality {
        Modality::Depth => dataset::load_depth_tensor(m, entries, c.image_size)?,
        Modality::Segmentation => {
            let maps = dataset::load_label_maps(m, entries, c.image_size)?;
            let refs: Vec<&[u8]> = maps.iter().map(|x| x.data()).collect();
            vq::one_hot(&refs, c.num_classes, c.image_size, c.image_size)?
        }
    })
}

/// Matches a visual config to the dataset's class count.
fn fit_to_manifest(c: &mut VqConfig, m: &PairManifest) {
    c.num_classes = match c.modality {
        Modality::Depth => 1,
        Modality::Segmentation => m.num_classes(),
    };
}

/// Reopens a finished or interrupted run for more steps.
fn continue_run(state: &mut TrainState, train: &TrainConfig) {
    if state.stop == StopReason::StepCap && state.step < train.max_steps {
        state.stop = StopReason::Running;
    }
}

fn report_training(what: &str, state: &TrainState) {
    println!(
        "{what}: {} steps, stop {:?}, first loss {}, final loss {}",
        state.step,
        state.stop,
        state.first_loss.map_or("-".into(), |v| format!("{v:.6}")),
        state.final_loss().map_or("-".into(), |v| format!("{v:.6}")),
    );
}

// ---------------------------------------------------------------- gen-synth

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// TOML config (top-level `out`, `seed`, `[synth]`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub mics: Option<usize>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSynthConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub synth: SynthConfig,
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: GenSynthConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.out, &a.out);
    set(&mut c.seed, &a.seed);
    let s = &mut c.synth;
    set(&mut s.train, &a.train);
    set(&mut s.val, &a.val);
    set(&mut s.test, &a.test);
    set(&mut s.image_size, &a.image_size);
    set(&mut s.mics, &a.mics);
    set(&mut s.sample_rate, &a.sample_rate);
    set(&mut s.duration_seconds, &a.duration);
    let out = required(&c.out, "out")?;
    c.synth.validate()?;

    let staged = Staged::new(&out)?;
    let m = dataset::synth_generate(&c.synth, c.seed, &staged.dir)?;
    staged.commit()?;
    let mut log = timer.finish("gen-synth", Some(c.seed), &c, &[])?;
    log.output_hash = Some(content_hash(&out)?);
    log.write(&out.join(RUN_LOG))?;
    println!(
        "wrote {} pairs to {} (hash {})",
        m.entries.len() / 2,
        out.display(),
        log.output_hash.as_deref().unwrap_or("")
    );
    Ok(())
}

// --------------------------------------------------------------- preprocess

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// TOML config (top-level `input`, `out`, `[pipeline]`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory searched recursively for .wav files
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Spectrogram store to create
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pipeline: AudioPipeline,
}

fn wav_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let dir = root.join(rel);
    let mut items: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| CliError::io(&dir, e))?;
    items.sort_by_key(|e| e.file_name());
    for e in items {
        let name = e.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        let r = rel.join(&name);
        if e.path().is_dir() {
            wav_files(root, &r, out)?;
        } else if r.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(r);
        }
    }
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: PreprocessConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.input, &a.input);
    override_path(&mut c.out, &a.out);
    a.pipeline.apply(&mut c.pipeline);
    c.pipeline.validate()?;
    let input = required(&c.input, "in")?;
    let out = required(&c.out, "out")?;
    require_dir(&input)?;
    let mut files = Vec::new();
    wav_files(&input, Path::new(""), &mut files)?;
    if files.is_empty() {
        return Err(CliError::new(Kind::MissingInput, format!("no .wav files under {}", input.display())));
    }

    let staged = Staged::new(&out)?;
    write_atomic(&staged.dir.join(PIPELINE_FILE), &serde_json::to_vec_pretty(&c.pipeline)?)?;
    let counts = par::map_range(files.len(), |i| -> Result<usize> {
        let t = spectro::compute(&c.pipeline, &input.join(&files[i]))?;
        let dst = staged.dir.join(&files[i]).with_extension("vtsr");
        mkdir(dst.parent().expect("file path has a parent"))?;
        write_tensor(&dst, &t)?;
        Ok(t.shape()[0])
    });
    let segments: usize = counts.into_iter().collect::<Result<Vec<_>>>()?.iter().sum();
    staged.commit()?;
    timer.finish("preprocess", None, &c, &[&input])?.write(&out.join(RUN_LOG))?;
    println!("{} files, {segments} segments -> {}", files.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------- train-vqvae

#[derive(Args, Debug)]
pub struct TrainVqArgs {
    /// TOML config (`manifest`, `out`, `checkpoint_every`, `[model]`, `[train]`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Commitment weight
    #[arg(long)]
    pub beta: Option<f64>,
    /// Use EMA codebook updates with this decay
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub restart_dead_codes: bool,
    /// Save every N steps (0: only at the end)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from the checkpoint in --out
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub visual: VisualArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainVqConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub model: VqConfig,
    pub train: TrainConfig,
}

pub fn train_vqvae(a: &TrainVqArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: TrainVqConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.manifest, &a.manifest);
    override_path(&mut c.out, &a.out);
    set(&mut c.checkpoint_every, &a.checkpoint_every);
    a.visual.apply(&mut c.model);
    if let Some(v) = a.variant {
        c.model.variant = v.into();
    }
    set(&mut c.model.beta, &a.beta);
    if a.ema_decay.is_some() {
        c.model.ema_decay = a.ema_decay;
    }
    c.model.restart_dead_codes |= a.restart_dead_codes;
    a.train.apply(&mut c.train);
    let manifest_path = required(&c.manifest, "manifest")?;
    let out = required(&c.out, "out")?;
    c.train.validate()?;
    let m = load_manifest(&manifest_path)?;
    fit_to_manifest(&mut c.model, &m);
    c.model.validate()?;

    let (mut model, mut adam, mut state, train) = if a.resume && out.join("meta.json").is_file() {
        let (model, adam, mut state, saved) = VqModel::load(&out)?;
        if model.config() != &c.model {
            return Err(CliError::new(Kind::Incompatible, "checkpoint model config differs from the requested one"));
        }
        let train = TrainConfig {
            max_steps: c.train.max_steps,
            ..saved
        };
        continue_run(&mut state, &train);
        let adam = adam.unwrap_or_else(|| AdamState::new(vq::default_adam(train.lr), &model.store));
        (model, adam, state, train)
    } else {
        let mut model = VqModel::new(&c.model, c.train.seed)?;
        model.depth_bounds = Some(m.header.depth_bounds);
        let adam = AdamState::new(vq::default_adam(c.train.lr), &model.store);
        (model, adam, TrainState::default(), c.train.clone())
    };
    let entries = m.entries_for(Split::Train, c.model.modality);
    let data = visual_targets(&m, &entries, &c.model)?;

    let template = model.clone();
    let every = c.checkpoint_every;
    let save_at = |store: &ParamStore<f32>, adam: &AdamState<f32>, s: &TrainState| -> sonovis_core::Result<bool> {
        if every > 0 && s.step.is_multiple_of(every) && s.stop == StopReason::Running {
            let snap = VqModel {
                store: store.clone(),
                ..template.clone()
            };
            snap.save(&out, Some(adam), s, &train)?;
        }
        Ok(true)
    };
    vq::train_vqvae(&mut model, &data, &train, &mut adam, &mut state, save_at)?;
    model.save(&out, Some(&adam), &state, &train)?;
    report_training("train-vqvae", &state);
    let loss = model.evaluate_loss(&data)?;
    println!("train loss {:.6} (reconstruction {:.6})", loss.total, loss.reconstruction);
    timer
        .finish("train-vqvae", Some(train.seed), &c, &[&manifest_path])?
        .write(&out.join(RUN_LOG))
}

fn override_path(dst: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        dst.clone_from(flag);
    }
}

// ------------------------------------------------------------- train-atnet

#[derive(Args, Debug, Default, Clone)]
pub struct AtArgs {
    /// Width of the first residual stage
    #[arg(long)]
    pub resnet_width: Option<usize>,
    /// Hidden widths of the dense layers, e.g. 512,1024
    #[arg(long, value_delimiter = ',')]
    pub mlp_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub start_channels: Option<usize>,
    #[arg(long)]
    pub decoder_start: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl AtArgs {
    fn apply(&self, c: &mut AtNetConfig) -> Result<()> {
        set(&mut c.resnet_width, &self.resnet_width);
        if let Some(h) = &self.mlp_hidden {
            c.mlp_hidden = h
                .as_slice()
                .try_into()
                .map_err(|_| CliError::config(format!("--mlp-hidden takes two widths, got {}", h.len())))?;
        }
        set(&mut c.start_channels, &self.start_channels);
        set(&mut c.decoder_start, &self.decoder_start);
        set(&mut c.dropout, &self.dropout);
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainAtArgs {
    /// TOML config (`manifest`, `vq`, `out`, `spectrograms`, `checkpoint_every`, `[model]`, `[pipeline]`, `[train]`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained manifold checkpoint (kept frozen)
    #[arg(long)]
    pub vq: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Spectrogram store from `preprocess` (default: the cache)
    #[arg(long)]
    pub spectrograms: Option<PathBuf>,
    /// Side of the predicted latent grid
    #[arg(long)]
    pub latent_size: Option<usize>,
    #[arg(long)]
    pub code_dim: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub at: AtArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainAtConfig {
    pub manifest: Option<PathBuf>,
    pub vq: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub spectrograms: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub model: AtNetConfig,
    pub pipeline: AudioPipeline,
    pub train: TrainConfig,
}

pub fn train_atnet(a: &TrainAtArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: TrainAtConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.manifest, &a.manifest);
    override_path(&mut c.vq, &a.vq);
    override_path(&mut c.out, &a.out);
    override_path(&mut c.spectrograms, &a.spectrograms);
    set(&mut c.checkpoint_every, &a.checkpoint_every);
    set(&mut c.model.latent_size, &a.latent_size);
    set(&mut c.model.code_dim, &a.code_dim);
    a.at.apply(&mut c.model)?;
    a.pipeline.apply(&mut c.pipeline);
    a.train.apply(&mut c.train);
    let manifest_path = required(&c.manifest, "manifest")?;
    let vq_dir = required(&c.vq, "vq")?;
    let out = required(&c.out, "out")?;
    c.train.validate()?;
    c.pipeline.validate()?;
    c.model.input_size = c.pipeline.size;

    require_dir(&vq_dir)?;
    let info = vq::read_manifold_info(&vq_dir)?;
    c.model.check_manifold(&info)?;
    let m = load_manifest(&manifest_path)?;
    let (manifold, _, _, _) = VqModel::load(&vq_dir)?;
    let store = spec_store(&m, c.spectrograms.as_deref(), &c.pipeline)?;
    let entries = m.entries_for(Split::Train, info.modality);
    let audio = store.first_segments(&m, &entries)?;
    c.model.input_channels = audio.shape()[1];
    c.model.validate()?;
    let visual = visual_targets(&m, &entries, manifold.config())?;

    let (mut net, mut adam, mut state, train) = if a.resume && out.join("meta.json").is_file() {
        let (net, adam, mut state, saved) = AtNet::load(&out)?;
        if net.config() != &c.model || net.manifold != info || net.pipeline != Some(c.pipeline) {
            return Err(CliError::new(Kind::Incompatible, "checkpoint does not match the requested AT-net setup"));
        }
        let train = TrainConfig {
            max_steps: c.train.max_steps,
            ..saved
        };
        continue_run(&mut state, &train);
        let adam = adam.unwrap_or_else(|| AdamState::new(vq::default_adam(train.lr), &net.store));
        (net, adam, state, train)
    } else {
        let mut net = AtNet::new(&c.model, info.clone(), c.train.seed)?;
        net.pipeline = Some(c.pipeline);
        let adam = AdamState::new(vq::default_adam(c.train.lr), &net.store);
        (net, adam, TrainState::default(), c.train.clone())
    };

    let template = net.clone();
    let every = c.checkpoint_every;
    let save_at = |store: &ParamStore<f32>, adam: &AdamState<f32>, s: &TrainState| -> sonovis_core::Result<bool> {
        if every > 0 && s.step.is_multiple_of(every) && s.stop == StopReason::Running {
            let snap = AtNet {
                store: store.clone(),
                ..template.clone()
            };
            snap.save(&out, Some(adam), s, &train)?;
        }
        Ok(true)
    };
    atnet::train_atnet(&mut net, &manifold, &audio, &visual, &train, &mut adam, &mut state, save_at)?;
    net.save(&out, Some(&adam), &state, &train)?;
    report_training("train-atnet", &state);
    timer
        .finish("train-atnet", Some(train.seed), &c, &[&manifest_path, &vq_dir])?
        .write(&out.join(RUN_LOG))
}

// ---------------------------------------------------------------- train-e2e

#[derive(Args, Debug)]
pub struct TrainE2eArgs {
    /// TOML config (`manifest`, `out`, `spectrograms`, `[visual]`, `[model]`, `[pipeline]`, `[train]`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub spectrograms: Option<PathBuf>,
    #[command(flatten)]
    pub visual: VisualArgs,
    #[command(flatten)]
    pub at: AtArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainE2eConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub spectrograms: Option<PathBuf>,
    pub visual: VqConfig,
    pub model: AtNetConfig,
    pub pipeline: AudioPipeline,
    pub train: TrainConfig,
}

pub fn train_e2e(a: &TrainE2eArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: TrainE2eConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.manifest, &a.manifest);
    override_path(&mut c.out, &a.out);
    override_path(&mut c.spectrograms, &a.spectrograms);
    a.visual.apply(&mut c.visual);
    a.at.apply(&mut c.model)?;
    a.pipeline.apply(&mut c.pipeline);
    a.train.apply(&mut c.train);
    let manifest_path = required(&c.manifest, "manifest")?;
    let out = required(&c.out, "out")?;
    c.train.validate()?;
    c.pipeline.validate()?;
    let m = load_manifest(&manifest_path)?;
    fit_to_manifest(&mut c.visual, &m);
    c.visual.validate()?;
    c.model.latent_size = c.visual.latent_size;
    c.model.code_dim = c.visual.code_dim;
    c.model.input_size = c.pipeline.size;

    let store = spec_store(&m, c.spectrograms.as_deref(), &c.pipeline)?;
    let entries = m.entries_for(Split::Train, c.visual.modality);
    let audio = store.first_segments(&m, &entries)?;
    c.model.input_channels = audio.shape()[1];
    c.model.validate()?;
    let visual = visual_targets(&m, &entries, &c.visual)?;
    let mut model = E2eModel::new(&c.model, &c.visual, c.train.seed)?;
    model.pipeline = Some(c.pipeline);
    model.depth_bounds = Some(m.header.depth_bounds);
    let mut adam = AdamState::new(vq::default_adam(c.train.lr), &model.store);
    let mut state = TrainState::default();
    atnet::train_e2e(&mut model, &audio, &visual, &c.train, &mut adam, &mut state, |_, _, _| Ok(true))?;
    model.save(&out, Some(&adam), &state, &c.train)?;
    report_training("train-e2e", &state);
    timer
        .finish("train-e2e", Some(c.train.seed), &c, &[&manifest_path])?
        .write(&out.join(RUN_LOG))
}

// -------------------------------------------------------------------- infer

pub const PREDICTION_INFO: &str = "prediction-info.json";

/// Written next to predictions so `evaluate` can interpret them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionInfo {
    pub modality: Modality,
    pub image_size: usize,
    pub depth_bounds: Option<Bounds>,
    pub class_names: Vec<String>,
    pub ids: Vec<String>,
    /// `two-stage` or `e2e`.
    pub model: String,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// TOML config (`model`, `vq`, `manifest`, `split`, `out`, `spectrograms`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// AT-net or E2E checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Manifold checkpoint (required for an AT-net)
    #[arg(long)]
    pub vq: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Prediction directory to create
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub spectrograms: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub model: Option<PathBuf>,
    pub vq: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: Split,
    pub out: Option<PathBuf>,
    pub spectrograms: Option<PathBuf>,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            model: None,
            vq: None,
            manifest: None,
            split: Split::Test,
            out: None,
            spectrograms: None,
        }
    }
}

enum Predictor {
    TwoStage(AtNet, VqModel),
    E2e(E2eModel),
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: InferConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.model, &a.model);
    override_path(&mut c.vq, &a.vq);
    override_path(&mut c.manifest, &a.manifest);
    override_path(&mut c.out, &a.out);
    override_path(&mut c.spectrograms, &a.spectrograms);
    if let Some(s) = a.split {
        c.split = match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        };
    }
    let model_dir = required(&c.model, "model")?;
    let manifest_path = required(&c.manifest, "manifest")?;
    let out = required(&c.out, "out")?;
    require_dir(&model_dir)?;
    let meta = read_meta(&model_dir)?;
    let predictor = if meta.extra.get("visual_config").is_some() {
        Predictor::E2e(E2eModel::load(&model_dir)?.0)
    } else {
        let vq_dir = required(&c.vq, "vq")?;
        require_dir(&vq_dir)?;
        let (at, _, _, _) = AtNet::load(&model_dir)?;
        let (vq, _, _, _) = VqModel::load(&vq_dir)?;
        if at.manifold != vq.info() {
            return Err(CliError::new(Kind::Incompatible, "AT-net was trained against a different manifold"));
        }
        Predictor::TwoStage(at, vq)
    };
    let (pipeline, modality, image_size, bounds) = match &predictor {
        Predictor::TwoStage(at, vq) => (at.pipeline, vq.config().modality, vq.config().image_size, vq.depth_bounds),
        Predictor::E2e(e) => (e.pipeline, e.visual.modality, e.visual.image_size, e.depth_bounds),
    };
    let pipeline =
        pipeline.ok_or_else(|| CliError::new(Kind::Incompatible, "model checkpoint does not record its audio front end"))?;

    let m = load_manifest(&manifest_path)?;
    let entries = m.entries_for(c.split, modality);
    if entries.is_empty() {
        return Err(CliError::new(Kind::MissingInput, format!("no {} entries in the {:?} split", modality.as_str(), c.split)));
    }
    let store = spec_store(&m, c.spectrograms.as_deref(), &pipeline)?;
    let spec = store.first_segments(&m, &entries)?;
    let visual = match &predictor {
        Predictor::TwoStage(at, vq) => atnet::infer(at, vq, &spec)?.visual,
        Predictor::E2e(e) => e.predict(&spec)?,
    };

    let staged = Staged::new(&out)?;
    let palette = m.header.palette.clone();
    let written = par::map_range(entries.len(), |i| -> Result<()> {
        let id = &entries[i].id;
        let item = visual.select(&[i]);
        let s = image_size;
        match modality {
            Modality::Depth => {
                let img = DepthImage::new(s, s, item.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
                write_depth_png(&staged.dir.join(format!("{id}.png")), &img)?;
            }
            Modality::Segmentation => {
                let map = LabelMap::new(s, s, vq::argmax_channels(&item).remove(0))?;
                write_label_png(&staged.dir.join(format!("{id}.png")), &map, &palette)?;
            }
        }
        let c_dim = item.shape()[1];
        write_tensor(&staged.dir.join(format!("{id}.vtsr")), &item.reshape(&[c_dim, s, s])?)?;
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let info = PredictionInfo {
        modality,
        image_size,
        depth_bounds: bounds,
        class_names: m.header.class_names.clone(),
        ids: entries.iter().map(|e| e.id.clone()).collect(),
        model: match predictor {
            Predictor::TwoStage(..) => "two-stage".into(),
            Predictor::E2e(_) => "e2e".into(),
        },
    };
    write_atomic(&staged.dir.join(PREDICTION_INFO), &serde_json::to_vec_pretty(&info)?)?;
    staged.commit()?;
    let mut inputs: Vec<&Path> = vec![&model_dir, &manifest_path];
    if let Some(v) = &c.vq {
        inputs.push(v);
    }
    timer.finish("infer", None, &c, &inputs)?.write(&out.join(RUN_LOG))?;
    println!("{} {} predictions -> {}", entries.len(), modality.as_str(), out.display());
    Ok(())
}

// ----------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// TOML config (`predictions`, `ground_truth`, `out`, `denominator`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `infer`
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Directory of ground-truth PNGs, matched to predictions by file name
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Report path (default: <predictions>/report.json)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Divide relative errors by the ground truth instead of the prediction
    #[arg(long)]
    pub gt_denominator: bool,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub predictions: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub denominator: Denominator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub modality: Modality,
    pub model: String,
    pub aggregation: String,
    pub image_size: usize,
    pub depth: Option<DepthMetricReport>,
    pub segmentation: Option<SegMetricReport>,
    /// Class names keyed by id, for reading `segmentation`.
    pub class_names: BTreeMap<u8, String>,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut c: EvaluateConfig = load_config(a.config.as_deref())?;
    override_path(&mut c.predictions, &a.predictions);
    override_path(&mut c.ground_truth, &a.ground_truth);
    override_path(&mut c.out, &a.out);
    if a.gt_denominator {
        c.denominator = Denominator::GroundTruth;
    }
    let pred_dir = required(&c.predictions, "predictions")?;
    let gt_dir = required(&c.ground_truth, "ground_truth")?;
    require_dir(&pred_dir)?;
    require_dir(&gt_dir)?;
    let out = c.out.clone().unwrap_or_else(|| pred_dir.join("report.json"));
    let info_path = pred_dir.join(PREDICTION_INFO);
    let info: PredictionInfo =
        serde_json::from_slice(&std::fs::read(&info_path).map_err(|e| CliError::io(&info_path, e))?)?;
    if let Some(m) = a.modality {
        if Modality::from(m) != info.modality {
            return Err(CliError::new(Kind::Incompatible, format!("predictions are {}", info.modality.as_str())));
        }
    }
    let s = info.image_size;
    let pairs: Vec<(PathBuf, PathBuf)> = info
        .ids
        .iter()
        .map(|id| (pred_dir.join(format!("{id}.png")), gt_dir.join(format!("{id}.png"))))
        .collect();
    for (p, g) in &pairs {
        require_file(p)?;
        require_file(g)?;
    }

    let class_names: BTreeMap<u8, String> =
        info.class_names.iter().enumerate().map(|(i, n)| (i as u8, n.clone())).collect();
    let mut report = MetricReport {
        modality: info.modality,
        model: info.model.clone(),
        aggregation: String::new(),
        image_size: s,
        depth: None,
        segmentation: None,
        class_names,
    };
    match info.modality {
        Modality::Depth => {
            let bounds = info
                .depth_bounds
                .ok_or_else(|| CliError::new(Kind::Incompatible, "depth predictions carry no bounds"))?;
            let load = |p: &Path| -> Result<DepthImage> {
                let img = read_depth_png(p)?.resize_nearest(s, s)?;
                Ok(img.map(|v| bounds.denormalize(v as f64) as f32))
            };
            let loaded = par::map_range(pairs.len(), |i| -> Result<(DepthImage, DepthImage)> {
                Ok((load(&pairs[i].0)?, load(&pairs[i].1)?))
            });
            let (preds, gts): (Vec<_>, Vec<_>) = loaded.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
            let r = metrics::depth_metrics(&preds, &gts, c.denominator)?;
            report.aggregation = DepthMetricReport::AGGREGATION.into();
            report.depth = Some(r);
        }
        Modality::Segmentation => {
            let loaded = par::map_range(pairs.len(), |i| -> Result<(LabelMap, LabelMap)> {
                Ok((read_label_png(&pairs[i].0)?.resize_nearest(s, s)?, read_label_png(&pairs[i].1)?.resize_nearest(s, s)?))
            });
            let (preds, gts): (Vec<_>, Vec<_>) = loaded.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
            let classes: Vec<u8> = (0..info.class_names.len() as u8).collect();
            let r = metrics::miou(&preds, &gts, &classes, None)?;
            report.aggregation = SegMetricReport::AGGREGATION.into();
            report.segmentation = Some(r);
        }
    }
    let table = render_table(&report);
    write_atomic(&out, &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&out.with_extension("txt"), table.as_bytes())?;
    print!("{table}");
    let log_path = out.with_file_name(format!(
        "{}.{RUN_LOG}",
        out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    timer.finish("evaluate", None, &c, &[&pred_dir, &gt_dir])?.write(&log_path)
}

fn render_table(r: &MetricReport) -> String {
    let mut t = String::new();
    if let Some(d) = &r.depth {
        t += &format!("# {} ({} images, {})\n", r.model, d.n_images, r.aggregation);
        t += "ABS_rel   SQR_rel   RMSE(lin)  RMSE(log)  AUC\n";
        t += &format!(
            "{:<9.4} {:<9.4} {:<10.4} {:<10.4} {:.4}\n",
            d.abs_rel, d.sqr_rel, d.rmse_lin, d.rmse_log, d.auc_crr
        );
    }
    if let Some(s) = &r.segmentation {
        t += &format!("# {} ({} images, {})\n", r.model, s.n_images, r.aggregation);
        for (c, iou) in &s.per_class_iou {
            let name = r.class_names.get(c).map_or("?", |n| n.as_str());
            let mark = if s.excluded_classes.contains(c) { " (excluded)" } else { "" };
            t += &format!("{name:<12} {:>6.2}{mark}\n", 100.0 * iou);
        }
        t += &format!("{:<12} {:>6.2}\n", "mIoU", 100.0 * s.miou);
    }
    t
}
