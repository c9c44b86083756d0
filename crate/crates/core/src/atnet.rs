//! Audio transformation network: residual audio encoder, domain MLP and
//! manifold decoder mapping a stacked spectrogram to a visual latent. Also
//! the single-stage (E2E) baseline that decodes pixels directly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sonovis_diff::{AdamState, Ctx, LayerSpec, Mode, Network, ParamStore, Real, Tensor, Var};

use crate::dataset::{Bounds, Modality};
use crate::dsp::AudioPipeline;
use crate::error::{CoreError, Result};
use crate::train::{self, StepOutput, TrainConfig, TrainState};
use crate::vq::{self, LatentMap, ManifoldInfo, ManifoldVariant, VqConfig, VqModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtNetConfig {
    /// Spectrogram channels (one per microphone).
    pub input_channels: usize,
    pub input_size: usize,
    /// Width of the first residual stage; stages use w, 2w, 4w, 8w.
    pub resnet_width: usize,
    /// Hidden widths of the first two dense layers.
    pub mlp_hidden: [usize; 2],
    pub dropout: f64,
    /// Spatial size the MLP output is reshaped to.
    pub decoder_start: usize,
    /// Channels of the reshaped MLP output.
    pub start_channels: usize,
    pub latent_size: usize,
    pub code_dim: usize,
}

impl Default for AtNetConfig {
    fn default() -> Self {
        AtNetConfig {
            input_channels: 8,
            input_size: 128,
            resnet_width: 64,
            mlp_hidden: [512, 1024],
            dropout: 0.2,
            decoder_start: 1,
            start_channels: 512,
            latent_size: 8,
            code_dim: 64,
        }
    }
}

impl AtNetConfig {
    pub fn feature_width(&self) -> usize {
        8 * self.resnet_width
    }

    pub fn upsampling_stages(&self) -> usize {
        (self.latent_size / self.decoder_start.max(1)).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.input_channels == 0 || self.resnet_width == 0 || self.code_dim == 0 {
            return fail("channels, widths and code_dim must be positive".into());
        }
        // stem /2, pool /2, three strided stages /8
        if self.input_size < 32 {
            return fail(format!("input size {} is below the 32 the encoder downsamples by", self.input_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let ratio = self.latent_size / self.decoder_start.max(1);
        if self.decoder_start == 0 || !ratio.is_power_of_two() || ratio * self.decoder_start != self.latent_size {
            return fail(format!(
                "latent {} must be decoder_start {} times a power of two",
                self.latent_size, self.decoder_start
            ));
        }
        if self.start_channels >> self.upsampling_stages() == 0 {
            return fail(format!(
                "{} start channels cannot be halved {} times",
                self.start_channels,
                self.upsampling_stages()
            ));
        }
        if self.mlp_hidden.contains(&0) {
            return fail("dense widths must be positive".into());
        }
        Ok(())
    }

    fn conv_nobias(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            bias: false,
        }
    }

    /// ResNet-18 layout with a widened stem, collapsed by global pooling.
    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let w = self.resnet_width;
        let mut v = vec![
            Self::conv_nobias(self.input_channels, w, 7, 2, 3),
            LayerSpec::BatchNorm { channels: w },
            LayerSpec::Relu,
            LayerSpec::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ];
        let mut f = w;
        for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
            let out = w * mult;
            let stride = if stage == 0 { 1 } else { 2 };
            v.push(LayerSpec::ResNetBasic { in_ch: f, out_ch: out, stride });
            v.push(LayerSpec::ResNetBasic { in_ch: out, out_ch: out, stride: 1 });
            f = out;
        }
        v.push(LayerSpec::GlobalAvgPool);
        v.push(LayerSpec::Flatten);
        v
    }

    pub fn mlp_specs(&self) -> Vec<LayerSpec> {
        let [h1, h2] = self.mlp_hidden;
        let out = self.decoder_start * self.decoder_start * self.start_channels;
        vec![
            LayerSpec::Dense {
                in_features: self.feature_width(),
                out_features: h1,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::Dense {
                in_features: h1,
                out_features: h2,
            },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::Dense {
                in_features: h2,
                out_features: out,
            },
        ]
    }

    /// Reshape, then transposed convs doubling the grid and halving the
    /// features, then a 1x1 projection to the code dimension.
    pub fn manifold_decoder_specs(&self) -> Vec<LayerSpec> {
        let s = self.decoder_start;
        let mut v = vec![LayerSpec::Reshape {
            shape: vec![self.start_channels, s, s],
        }];
        let mut f = self.start_channels;
        for _ in 0..self.upsampling_stages() {
            v.push(LayerSpec::upconv(f, f / 2));
            v.push(LayerSpec::BatchNorm { channels: f / 2 });
            v.push(LayerSpec::Relu);
            f /= 2;
        }
        v.push(LayerSpec::conv(f, self.code_dim, 1, 1));
        v
    }

    /// Checks this network can target the given manifold.
    pub fn check_manifold(&self, info: &ManifoldInfo) -> Result<()> {
        if self.latent_size != info.latent_size || self.code_dim != info.code_dim {
            return Err(CoreError::Incompatible(format!(
                "AT-net predicts {0}x{0}x{1} latents but the manifold is {2}x{2}x{3}",
                self.latent_size, self.code_dim, info.latent_size, info.code_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AtNetNets {
    pub config: AtNetConfig,
    pub audio_encoder: Network,
    pub mlp: Network,
    pub manifold_decoder: Network,
}

impl AtNetNets {
    pub fn build<T: Real, R: rand::Rng>(config: &AtNetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(AtNetNets {
            config: config.clone(),
            audio_encoder: Network::build("audio_encoder", config.encoder_specs(), store, rng)?,
            mlp: Network::build("domain_mlp", config.mlp_specs(), store, rng)?,
            manifold_decoder: Network::build("manifold_decoder", config.manifold_decoder_specs(), store, rng)?,
        })
    }

    pub fn networks(&self) -> BTreeMap<String, Vec<LayerSpec>> {
        [&self.audio_encoder, &self.mlp, &self.manifold_decoder]
            .into_iter()
            .map(|n| (n.name().to_string(), n.specs().to_vec()))
            .collect()
    }

    pub fn audio_encode<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        match ctx.tape.value(x).dims4() {
            Some((_, ch, h, w)) if ch == c.input_channels && h == c.input_size && w == c.input_size => {}
            _ => {
                return Err(CoreError::invalid(format!(
                    "AT-net expects N x {} x {2} x {2} spectrograms, got {:?}",
                    c.input_channels,
                    ctx.tape.shape(x),
                    c.input_size
                )))
            }
        }
        Ok(self.audio_encoder.forward(ctx, x)?)
    }

    pub fn domain_transform<T: Real>(&self, ctx: &mut Ctx<T>, feat: Var) -> Result<Var> {
        Ok(self.mlp.forward(ctx, feat)?)
    }

    pub fn manifold_decode<T: Real>(&self, ctx: &mut Ctx<T>, v: Var) -> Result<Var> {
        Ok(self.manifold_decoder.forward(ctx, v)?)
    }

    /// Spectrogram batch to continuous latent `[N, D, h, w]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let f = self.audio_encode(ctx, x)?;
        let m = self.domain_transform(ctx, f)?;
        self.manifold_decode(ctx, m)
    }
}

/// Mean squared error against a continuous latent. Quantized targets are
/// rejected: the network regresses the encoder output, not codewords.
pub fn at_loss<T: Real>(ctx: &mut Ctx<T>, pred: Var, target: &LatentMap) -> Result<Var> {
    if target.indices.is_some() {
        return Err(CoreError::invalid("AT-net targets must be continuous latents, got a quantized map"));
    }
    let t = ctx.input(target.grid.cast(), false);
    Ok(ctx.tape.mse(pred, t)?)
}

#[derive(Clone, Debug)]
pub struct AtNet {
    pub nets: AtNetNets,
    pub store: ParamStore<f32>,
    /// The manifold this network was trained against.
    pub manifold: ManifoldInfo,
    /// Front end that produced the training spectrograms, if recorded.
    pub pipeline: Option<AudioPipeline>,
}

const INFER_CHUNK: usize = 32;

impl AtNet {
    pub fn new(config: &AtNetConfig, manifold: ManifoldInfo, seed: u64) -> Result<Self> {
        config.check_manifold(&manifold)?;
        let mut store = ParamStore::new();
        let nets = AtNetNets::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(AtNet {
            nets,
            store,
            manifold,
            pipeline: None,
        })
    }

    pub fn config(&self) -> &AtNetConfig {
        &self.nets.config
    }

    /// Continuous latent prediction in eval mode.
    pub fn predict_latent(&self, spec: &Tensor<f32>) -> Result<LatentMap> {
        let grid = chunked(&self.store, spec, |ctx, x| self.nets.forward(ctx, x))?;
        Ok(LatentMap { grid, indices: None })
    }

    pub fn save(&self, dir: &Path, adam: Option<&AdamState<f32>>, state: &TrainState, train: &TrainConfig) -> Result<()> {
        let mut extra = serde_json::Map::new();
        extra.insert("at_config".into(), serde_json::to_value(self.config())?);
        extra.insert("manifold_info".into(), serde_json::to_value(&self.manifold)?);
        if let Some(p) = &self.pipeline {
            extra.insert("pipeline".into(), serde_json::to_value(p)?);
        }
        train::save_run(dir, self.nets.networks(), &self.store, adam, state, train, extra, &[])
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<AdamState<f32>>, TrainState, TrainConfig)> {
        let run = train::load_run(dir)?;
        let config: AtNetConfig = run.field("at_config")?;
        let manifold: ManifoldInfo = run.field("manifold_info")?;
        let mut net = AtNet::new(&config, manifold, 0)?;
        net.pipeline = run.field("pipeline").ok();
        let (adam, state, train) = run.restore_into(&mut net.store, dir)?;
        Ok((net, adam, state, train))
    }
}

fn chunked(store: &ParamStore<f32>, x: &Tensor<f32>, f: impl Fn(&mut Ctx<f32>, Var) -> Result<Var>) -> Result<Tensor<f32>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(CoreError::invalid("empty batch"));
    }
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
        let mut ctx = Ctx::inference(store);
        let v = ctx.input(x.select(&idx), false);
        let out = f(&mut ctx, v)?;
        let t = ctx.tape.value(out);
        shape = t.shape().to_vec();
        data.extend_from_slice(t.data());
    }
    shape[0] = n;
    Ok(Tensor::new(shape, data)?)
}

fn check_pairs(audio: &Tensor<f32>, n_visual: usize) -> Result<usize> {
    let n = audio.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(CoreError::invalid("training set is empty"));
    }
    if n != n_visual {
        return Err(CoreError::invalid(format!("{n} spectrograms for {n_visual} visual samples")));
    }
    Ok(n)
}

/// Trains the AT-net to regress frozen-manifold latents of `visual` from
/// `audio`. The manifold model is only read.
pub fn train_atnet<C>(
    at: &mut AtNet,
    manifold: &VqModel,
    audio: &Tensor<f32>,
    visual: &Tensor<f32>,
    cfg: &TrainConfig,
    adam: &mut AdamState<f32>,
    state: &mut TrainState,
    on_step: C,
) -> Result<()>
where
    C: FnMut(&ParamStore<f32>, &AdamState<f32>, &TrainState) -> Result<bool>,
{
    let info = manifold.info();
    at.config().check_manifold(&info)?;
    if at.manifold.modality != info.modality || at.manifold.variant != info.variant {
        return Err(CoreError::Incompatible("AT-net was built for a different manifold".into()));
    }
    let n = check_pairs(audio, visual.shape().first().copied().unwrap_or(0))?;
    let targets = manifold.encode(visual)?;
    train_on_latents(at, audio, &targets, n, cfg, adam, state, on_step)
}

#[allow(clippy::too_many_arguments)]
fn train_on_latents<C>(
    at: &mut AtNet,
    audio: &Tensor<f32>,
    targets: &LatentMap,
    n: usize,
    cfg: &TrainConfig,
    adam: &mut AdamState<f32>,
    state: &mut TrainState,
    on_step: C,
) -> Result<()>
where
    C: FnMut(&ParamStore<f32>, &AdamState<f32>, &TrainState) -> Result<bool>,
{
    let nets = &at.nets;
    let step_fn = |store: &ParamStore<f32>, batch: &[usize], _step: u64, seed: u64| -> Result<StepOutput> {
        let mut ctx = Ctx::new(store, Mode::Train, seed);
        let x = ctx.input(audio.select(batch), false);
        let pred = nets.forward(&mut ctx, x)?;
        let target = LatentMap {
            grid: targets.grid.select(batch),
            indices: None,
        };
        let loss = at_loss(&mut ctx, pred, &target)?;
        ctx.backward(loss)?;
        Ok(StepOutput {
            loss: ctx.tape.value(loss).item() as f64,
            grads: ctx.param_grads(),
            updates: ctx.take_buffer_updates(),
        })
    };
    train::run(cfg, n, &mut at.store, adam, state, step_fn, on_step)
}

/// Decoded prediction for a batch of spectrograms.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Latent after quantization (VQ manifold) or the raw prediction (VAE).
    pub latent: LatentMap,
    /// Depth in [0, 1] (`[N, 1, S, S]`) or class probabilities.
    pub visual: Tensor<f32>,
}

impl Prediction {
    /// Class-id maps (segmentation) or normalized depth planes.
    pub fn class_maps(&self) -> Vec<Vec<u8>> {
        vq::argmax_channels(&self.visual)
    }
}

/// spectrogram -> AT-net -> quantize (VQ variant) -> manifold decoder.
pub fn infer(at: &AtNet, manifold: &VqModel, spec: &Tensor<f32>) -> Result<Prediction> {
    let info = manifold.info();
    at.config().check_manifold(&info)?;
    if at.manifold.modality != info.modality {
        return Err(CoreError::Incompatible(format!(
            "AT-net trained for {} but the manifold decodes {}",
            at.manifold.modality.as_str(),
            info.modality.as_str()
        )));
    }
    let z = at.predict_latent(spec)?;
    let latent = match info.variant {
        ManifoldVariant::Vq => manifold.quantize(&z)?,
        ManifoldVariant::Vae => z,
    };
    let visual = manifold.decode(&latent)?;
    Ok(Prediction { latent, visual })
}

/// Single-stage baseline: the AT-net trunk feeding a fresh visual decoder,
/// trained on pixels with no quantizer.
#[derive(Clone, Debug)]
pub struct E2eModel {
    pub trunk: AtNetNets,
    pub decoder: Network,
    pub visual: VqConfig,
    pub store: ParamStore<f32>,
    pub pipeline: Option<AudioPipeline>,
    /// Bounds used to normalize the depth targets.
    pub depth_bounds: Option<Bounds>,
}

impl E2eModel {
    pub fn new(at: &AtNetConfig, visual: &VqConfig, seed: u64) -> Result<Self> {
        visual.validate()?;
        if at.latent_size != visual.latent_size || at.code_dim != visual.code_dim {
            return Err(CoreError::Incompatible(format!(
                "trunk latent {}x{} vs decoder latent {}x{}",
                at.latent_size, at.code_dim, visual.latent_size, visual.code_dim
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = AtNetNets::build(at, &mut store, &mut rng)?;
        let decoder = Network::build("decoder", visual.decoder_specs(), &mut store, &mut rng)?;
        Ok(E2eModel {
            trunk,
            decoder,
            visual: visual.clone(),
            store,
            pipeline: None,
            depth_bounds: None,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let z = self.trunk.forward(ctx, x)?;
        Ok(self.decoder.forward(ctx, z)?)
    }

    /// Depth in [0, 1] or class probabilities.
    pub fn predict(&self, spec: &Tensor<f32>) -> Result<Tensor<f32>> {
        let out = chunked(&self.store, spec, |ctx, x| self.forward(ctx, x))?;
        Ok(match self.visual.modality {
            Modality::Depth => out,
            Modality::Segmentation => vq::probabilities(&out),
        })
    }

    pub fn save(&self, dir: &Path, adam: Option<&AdamState<f32>>, state: &TrainState, train: &TrainConfig) -> Result<()> {
        let mut nets = self.trunk.networks();
        nets.insert("decoder".into(), self.decoder.specs().to_vec());
        let mut extra = serde_json::Map::new();
        extra.insert("at_config".into(), serde_json::to_value(&self.trunk.config)?);
        extra.insert("visual_config".into(), serde_json::to_value(&self.visual)?);
        if let Some(p) = &self.pipeline {
            extra.insert("pipeline".into(), serde_json::to_value(p)?);
        }
        if let Some(b) = &self.depth_bounds {
            extra.insert("depth_bounds".into(), serde_json::to_value(b)?);
        }
        train::save_run(dir, nets, &self.store, adam, state, train, extra, &[])
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<AdamState<f32>>, TrainState, TrainConfig)> {
        let run = train::load_run(dir)?;
        let at: AtNetConfig = run.field("at_config")?;
        let visual: VqConfig = run.field("visual_config")?;
        let mut model = E2eModel::new(&at, &visual, 0)?;
        model.pipeline = run.field("pipeline").ok();
        model.depth_bounds = run.field("depth_bounds").ok();
        let (adam, state, train) = run.restore_into(&mut model.store, dir)?;
        Ok((model, adam, state, train))
    }
}

pub fn train_e2e<C>(
    model: &mut E2eModel,
    audio: &Tensor<f32>,
    visual: &Tensor<f32>,
    cfg: &TrainConfig,
    adam: &mut AdamState<f32>,
    state: &mut TrainState,
    on_step: C,
) -> Result<()>
where
    C: FnMut(&ParamStore<f32>, &AdamState<f32>, &TrainState) -> Result<bool>,
{
    let n = check_pairs(audio, visual.shape().first().copied().unwrap_or(0))?;
    let want = [model.visual.channels(), model.visual.image_size, model.visual.image_size];
    if visual.shape()[1..] != want {
        return Err(CoreError::invalid(format!("visual targets {:?} vs decoder output {want:?}", visual.shape())));
    }
    let (trunk, decoder, modality) = (&model.trunk, &model.decoder, model.visual.modality);
    let step_fn = |store: &ParamStore<f32>, batch: &[usize], _step: u64, seed: u64| -> Result<StepOutput> {
        let mut ctx = Ctx::new(store, Mode::Train, seed);
        let x = ctx.input(audio.select(batch), false);
        let target = ctx.input(visual.select(batch), false);
        let z = trunk.forward(&mut ctx, x)?;
        let out = decoder.forward(&mut ctx, z)?;
        let loss = vq::reconstruction_loss(&mut ctx, modality, out, target)?;
        ctx.backward(loss)?;
        Ok(StepOutput {
            loss: ctx.tape.value(loss).item() as f64,
            grads: ctx.param_grads(),
            updates: ctx.take_buffer_updates(),
        })
    };
    train::run(cfg, n, &mut model.store, adam, state, step_fn, on_step)
}
