//! Visual manifold: convolutional encoder, vector quantizer and decoder,
//! plus the Gaussian-latent (VAE) variant used for ablations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sonovis_diff::tape::softmax_channels;
use sonovis_diff::{AdamConfig, AdamState, Ctx, LayerSpec, Mode, Network, ParamId, ParamKind, ParamStore, Real, Tensor, Var};

use crate::dataset::{Bounds, Modality};
use crate::error::{CoreError, Result};
use crate::train::{self, StepOutput, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldVariant {
    /// Vector-quantized latent.
    Vq,
    /// Gaussian latent with a KL penalty.
    Vae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub modality: Modality,
    /// Channels of a segmentation sample (one per class). Ignored for depth.
    pub num_classes: usize,
    pub image_size: usize,
    pub latent_size: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Width of the first encoder conv and the last decoder upsampling.
    pub first_features: usize,
    /// Width of every other stage.
    pub hidden_features: usize,
    pub residual_blocks: usize,
    /// Commitment weight.
    pub beta: f64,
    pub variant: ManifoldVariant,
    /// KL weight of the VAE variant.
    pub kl_weight: f64,
    /// Exponential-moving-average codebook updates instead of the codebook
    /// loss gradient.
    pub ema_decay: Option<f64>,
    /// Re-seed codewords unused for a whole epoch from encoder outputs.
    pub restart_dead_codes: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            modality: Modality::Depth,
            num_classes: 1,
            image_size: 128,
            latent_size: 8,
            codebook_size: 64,
            code_dim: 64,
            first_features: 64,
            hidden_features: 128,
            residual_blocks: 3,
            beta: 0.25,
            variant: ManifoldVariant::Vq,
            kl_weight: 1e-3,
            ema_decay: None,
            restart_dead_codes: false,
        }
    }
}

impl VqConfig {
    pub fn channels(&self) -> usize {
        match self.modality {
            Modality::Depth => 1,
            Modality::Segmentation => self.num_classes,
        }
    }

    /// Number of stride-2 stages between image and latent.
    pub fn stages(&self) -> usize {
        (self.image_size / self.latent_size.max(1)).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        let ratio = self.image_size / self.latent_size.max(1);
        if self.latent_size == 0 || ratio < 2 || !ratio.is_power_of_two() || ratio * self.latent_size != self.image_size {
            return fail(format!(
                "latent {} must divide image {} by a power of two >= 2",
                self.latent_size, self.image_size
            ));
        }
        if self.codebook_size < 2 || self.code_dim == 0 || self.first_features == 0 || self.hidden_features == 0 {
            return fail("codebook needs K >= 2 and D >= 1; feature widths must be positive".into());
        }
        if self.modality == Modality::Segmentation && self.num_classes < 2 {
            return fail("segmentation needs at least 2 classes".into());
        }
        if !(self.beta >= 0.0 && self.kl_weight >= 0.0) {
            return fail("beta and kl_weight must be non-negative".into());
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return fail(format!("ema decay {d} outside [0, 1)"));
            }
        }
        Ok(())
    }

    fn top_features(&self) -> usize {
        if self.stages() > 1 {
            self.hidden_features
        } else {
            self.first_features
        }
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut v = vec![LayerSpec::conv(self.channels(), self.first_features, 4, 2), LayerSpec::Relu];
        let mut f = self.first_features;
        for _ in 1..self.stages() {
            v.push(LayerSpec::conv(f, self.hidden_features, 4, 2));
            v.push(LayerSpec::Relu);
            f = self.hidden_features;
        }
        v.extend((0..self.residual_blocks).map(|_| LayerSpec::Residual { channels: f }));
        if self.variant == ManifoldVariant::Vq {
            v.push(LayerSpec::conv(f, self.code_dim, 1, 1));
        }
        v
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let top = self.top_features();
        let mut v = vec![LayerSpec::conv(self.code_dim, top, 3, 1)];
        v.extend((0..self.residual_blocks).map(|_| LayerSpec::Residual { channels: top }));
        let mut f = top;
        let stages = self.stages();
        for s in 0..stages {
            let out = if s + 1 == stages { self.first_features } else { self.hidden_features };
            v.push(LayerSpec::upconv(f, out));
            v.push(LayerSpec::Relu);
            f = out;
        }
        v.push(LayerSpec::conv(f, self.channels(), 3, 1));
        if self.modality == Modality::Depth {
            v.push(LayerSpec::Sigmoid);
        }
        v
    }
}

/// Continuous or quantized latent grid for a batch: `grid` is `[N, D, h, w]`;
/// `indices` (`[N, h, w]`, row-major) is present iff quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    pub grid: Tensor<f32>,
    pub indices: Option<Vec<usize>>,
}

/// `K x D` embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    embeddings: Tensor<f32>,
}

impl Codebook {
    pub fn new(embeddings: Tensor<f32>) -> Result<Self> {
        match embeddings.shape() {
            &[k, d] if k >= 2 && d >= 1 => {}
            s => return Err(CoreError::invalid(format!("codebook must be K x D with K >= 2, got {s:?}"))),
        }
        if !embeddings.all_finite() {
            return Err(CoreError::invalid("codebook contains non-finite values"));
        }
        Ok(Codebook { embeddings })
    }

    pub fn size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor<f32> {
        &self.embeddings
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        let d = self.dim();
        &self.embeddings.data()[k * d..(k + 1) * d]
    }

    /// Index of the nearest codeword; the lowest index wins ties.
    pub fn nearest(&self, v: &[f32]) -> usize {
        nearest_code(v, self.embeddings.data(), self.dim())
    }

    /// Snaps every grid vector of `z` to its nearest codeword.
    pub fn quantize(&self, z: &LatentMap) -> Result<LatentMap> {
        let (n, d, h, w) = z
            .grid
            .dims4()
            .ok_or_else(|| CoreError::invalid(format!("latent must be N x D x h x w, got {:?}", z.grid.shape())))?;
        if d != self.dim() {
            return Err(CoreError::Incompatible(format!("latent dim {d} vs codebook dim {}", self.dim())));
        }
        let indices = nearest_codes(&z.grid, &self.embeddings);
        let grid = gather(&self.embeddings, &indices, n, h, w);
        Ok(LatentMap {
            grid,
            indices: Some(indices),
        })
    }
}

/// Squared L2 distances summed in f64 in dimension order; strict `<` keeps
/// the first of equal distances.
fn nearest_code<T: Real>(v: &[T], table: &[T], d: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, e) in table.chunks_exact(d).enumerate() {
        let dist: f64 = v
            .iter()
            .zip(e)
            .map(|(&a, &b)| {
                let t = a.as_f64() - b.as_f64();
                t * t
            })
            .sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best.0
}

/// Nearest codeword per cell of a `[N, D, h, w]` grid, laid out `[N, h, w]`.
pub fn nearest_codes<T: Real>(z: &Tensor<T>, table: &Tensor<T>) -> Vec<usize> {
    let s = z.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(n * plane);
    let mut v = vec![T::zero(); d];
    for i in 0..n {
        for p in 0..plane {
            for (dd, x) in v.iter_mut().enumerate() {
                *x = z.data()[(i * d + dd) * plane + p];
            }
            out.push(nearest_code(&v, table.data(), d));
        }
    }
    out
}

fn gather<T: Real>(table: &Tensor<T>, indices: &[usize], n: usize, h: usize, w: usize) -> Tensor<T> {
    let d = table.shape()[1];
    let plane = h * w;
    let mut out = vec![T::zero(); n * d * plane];
    for i in 0..n {
        for p in 0..plane {
            let k = indices[i * plane + p];
            for dd in 0..d {
                out[(i * d + dd) * plane + p] = table.data()[k * d + dd];
            }
        }
    }
    Tensor::new(vec![n, d, h, w], out).expect("gather shape")
}

/// Loss terms of one pass, as plain values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossBreakdown {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

/// Graph nodes of the manifold losses.
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Option<Var>,
    pub commitment: Option<Var>,
    pub kl: Option<Var>,
}

impl LossVars {
    pub fn values<T: Real>(&self, ctx: &Ctx<T>, beta: f64) -> VqLossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| ctx.tape.value(x).item().as_f64());
        VqLossBreakdown {
            reconstruction: v(Some(self.reconstruction)),
            codebook: v(self.codebook),
            commitment: v(self.commitment),
            kl: v(self.kl),
            total: v(Some(self.total)),
            beta,
        }
    }
}

/// Pixel reconstruction term: MSE for depth, per-pixel cross-entropy of
/// logits against one-hot targets for segmentation.
pub fn reconstruction_loss<T: Real>(ctx: &mut Ctx<T>, modality: Modality, output: Var, target: Var) -> Result<Var> {
    Ok(match modality {
        Modality::Depth => ctx.tape.mse(output, target)?,
        Modality::Segmentation => {
            let t = ctx.tape.value(target).clone();
            ctx.tape.softmax_cross_entropy(output, &t)?
        }
    })
}

/// `reconstruction + codebook + beta * commitment`, with
/// codebook = mse(sg(z_e), z_q) and commitment = mse(z_e, sg(z_q)).
pub fn vq_loss<T: Real>(ctx: &mut Ctx<T>, reconstruction: Var, z_e: Var, z_q: Var, beta: f64) -> Result<LossVars> {
    let ze_const = ctx.tape.detach(z_e);
    let zq_const = ctx.tape.detach(z_q);
    let codebook = ctx.tape.mse(ze_const, z_q)?;
    let commitment = ctx.tape.mse(z_e, zq_const)?;
    let weighted = ctx.tape.scale(commitment, T::lit(beta))?;
    let partial = ctx.tape.add(reconstruction, codebook)?;
    let total = ctx.tape.add(partial, weighted)?;
    Ok(LossVars {
        total,
        reconstruction,
        codebook: Some(codebook),
        commitment: Some(commitment),
        kl: None,
    })
}

/// Parameter layout of a manifold model inside some store.
#[derive(Clone, Debug)]
pub struct VqNets {
    pub config: VqConfig,
    pub encoder: Network,
    pub decoder: Network,
    /// Mean and log-variance heads of the VAE variant.
    pub heads: Option<(Network, Network)>,
    pub codebook: ParamId,
    /// EMA cluster sizes `[K]` and sums `[K, D]`.
    pub ema: Option<(ParamId, ParamId)>,
    /// Per-codeword assignment counts of the current epoch (dead-code restarts).
    pub usage: Option<ParamId>,
}

/// Output of one training-style pass.
pub struct ManifoldPass {
    pub losses: LossVars,
    /// Encoder output (the VAE mean in that variant).
    pub z_e: Var,
    pub indices: Option<Vec<usize>>,
    pub output: Var,
}

impl VqNets {
    pub fn build<T: Real, R: Rng>(config: &VqConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Network::build("encoder", config.encoder_specs(), store, rng)?;
        let heads = match config.variant {
            ManifoldVariant::Vq => None,
            ManifoldVariant::Vae => {
                let f = config.top_features();
                let mean = Network::build("vae_mean", vec![LayerSpec::conv(f, config.code_dim, 1, 1)], store, rng)?;
                let logvar = Network::build("vae_logvar", vec![LayerSpec::conv(f, config.code_dim, 1, 1)], store, rng)?;
                Some((mean, logvar))
            }
        };
        let decoder = Network::build("decoder", config.decoder_specs(), store, rng)?;
        let (k, d) = (config.codebook_size, config.code_dim);
        let bound = 1.0 / k as f64;
        let table = Tensor::from_fn(&[k, d], |_| T::lit(rng.random_range(-bound..bound)));
        let kind = if config.ema_decay.is_some() { ParamKind::Buffer } else { ParamKind::Trainable };
        let codebook = store.add("codebook", table.clone(), kind)?;
        let ema = match config.ema_decay {
            None => None,
            Some(_) => Some((
                store.add("codebook.ema_count", Tensor::ones(&[k]), ParamKind::Buffer)?,
                store.add("codebook.ema_sum", table, ParamKind::Buffer)?,
            )),
        };
        let usage = match config.restart_dead_codes && config.variant == ManifoldVariant::Vq {
            true => Some(store.add("codebook.usage", Tensor::zeros(&[k]), ParamKind::Buffer)?),
            false => None,
        };
        Ok(VqNets {
            config: config.clone(),
            encoder,
            decoder,
            heads,
            codebook,
            ema,
            usage,
        })
    }

    pub fn networks(&self) -> BTreeMap<String, Vec<LayerSpec>> {
        let mut m = BTreeMap::new();
        for net in [Some(&self.encoder), Some(&self.decoder), self.heads.as_ref().map(|h| &h.0), self.heads.as_ref().map(|h| &h.1)]
            .into_iter()
            .flatten()
        {
            m.insert(net.name().to_string(), net.specs().to_vec());
        }
        m
    }

    /// Continuous latent `z_e`; the VAE variant returns `(mean, logvar)`.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<(Var, Option<Var>)> {
        let h = self.encoder.forward(ctx, x)?;
        match &self.heads {
            None => Ok((h, None)),
            Some((m, lv)) => {
                let mean = m.forward(ctx, h)?;
                let logvar = lv.forward(ctx, h)?;
                Ok((mean, Some(logvar)))
            }
        }
    }

    /// Decoder output: sigmoid depth or class logits.
    pub fn decode<T: Real>(&self, ctx: &mut Ctx<T>, z: Var) -> Result<Var> {
        Ok(self.decoder.forward(ctx, z)?)
    }

    /// Full training objective on a batch `x` (which is also the target).
    pub fn pass<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<ManifoldPass> {
        let c = &self.config;
        let (z_e, logvar) = self.encode(ctx, x)?;
        match logvar {
            None => {
                let (n, _, h, w) = ctx
                    .tape
                    .value(z_e)
                    .dims4()
                    .ok_or_else(|| CoreError::invalid("encoder output is not 4-d"))?;
                let table = ctx.param(self.codebook);
                let indices = nearest_codes(ctx.tape.value(z_e), ctx.tape.value(table));
                let z_q = ctx.tape.embed_lookup(table, &indices, n, h, w)?;
                let zq_value = ctx.tape.value(z_q).clone();
                let st = ctx.tape.straight_through(z_e, zq_value)?;
                let output = self.decode(ctx, st)?;
                let recon = reconstruction_loss(ctx, c.modality, output, x)?;
                let losses = vq_loss(ctx, recon, z_e, z_q, c.beta)?;
                Ok(ManifoldPass {
                    losses,
                    z_e,
                    indices: Some(indices),
                    output,
                })
            }
            Some(logvar) => {
                let z = if ctx.mode() == Mode::Train {
                    let half = ctx.tape.scale(logvar, T::lit(0.5))?;
                    let std = ctx.tape.exp(half)?;
                    let eps = ctx.normal(ctx.tape.shape(z_e).to_vec().as_slice());
                    let eps = ctx.input(eps, false);
                    let noise = ctx.tape.mul(std, eps)?;
                    ctx.tape.add(z_e, noise)?
                } else {
                    z_e
                };
                let output = self.decode(ctx, z)?;
                let recon = reconstruction_loss(ctx, c.modality, output, x)?;
                let kl = ctx.tape.gaussian_kl(z_e, logvar)?;
                let weighted = ctx.tape.scale(kl, T::lit(c.kl_weight))?;
                let total = ctx.tape.add(recon, weighted)?;
                Ok(ManifoldPass {
                    losses: LossVars {
                        total,
                        reconstruction: recon,
                        codebook: None,
                        commitment: None,
                        kl: Some(kl),
                    },
                    z_e,
                    indices: None,
                    output,
                })
            }
        }
    }
}

/// Written next to the checkpoint so downstream stages can check
/// compatibility without loading weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldInfo {
    pub modality: Modality,
    pub variant: ManifoldVariant,
    pub image_size: usize,
    pub latent_size: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub num_classes: usize,
    pub depth_bounds: Option<Bounds>,
}

pub const MANIFOLD_INFO: &str = "manifold-info.json";

/// A manifold model with its parameters.
#[derive(Clone, Debug)]
pub struct VqModel {
    pub nets: VqNets,
    pub store: ParamStore<f32>,
    pub depth_bounds: Option<Bounds>,
}

/// Rows per chunk in batched inference.
const INFER_CHUNK: usize = 32;

impl VqModel {
    pub fn new(config: &VqConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let nets = VqNets::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(VqModel {
            nets,
            store,
            depth_bounds: None,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.nets.config
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.store.get(self.nets.codebook).clone())
    }

    pub fn info(&self) -> ManifoldInfo {
        let c = self.config();
        ManifoldInfo {
            modality: c.modality,
            variant: c.variant,
            image_size: c.image_size,
            latent_size: c.latent_size,
            codebook_size: c.codebook_size,
            code_dim: c.code_dim,
            num_classes: c.channels(),
            depth_bounds: self.depth_bounds,
        }
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let c = self.config();
        let want = [c.channels(), c.image_size, c.image_size];
        match x.dims4() {
            Some((_, ch, h, w)) if [ch, h, w] == want => Ok(()),
            _ => Err(CoreError::invalid(format!("expected N x {want:?} input, got {:?}", x.shape()))),
        }
    }

    /// Applies an inference pass in fixed-size chunks along the batch axis.
    fn chunked(&self, x: &Tensor<f32>, f: impl Fn(&mut Ctx<f32>, Var) -> Result<Var>) -> Result<Tensor<f32>> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(CoreError::invalid("empty batch"));
        }
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let mut ctx = Ctx::inference(&self.store);
            let v = ctx.input(x.select(&idx), false);
            let out = f(&mut ctx, v)?;
            let t = ctx.tape.value(out);
            shape = t.shape().to_vec();
            data.extend_from_slice(t.data());
        }
        shape[0] = n;
        Ok(Tensor::new(shape, data)?)
    }

    /// Continuous latent (the mean for the VAE variant), eval mode.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<LatentMap> {
        self.check_input(x)?;
        let grid = self.chunked(x, |ctx, v| Ok(self.nets.encode(ctx, v)?.0))?;
        Ok(LatentMap { grid, indices: None })
    }

    pub fn quantize(&self, z: &LatentMap) -> Result<LatentMap> {
        self.codebook()?.quantize(z)
    }

    /// Decoded visual sample: depth in [0, 1] or per-pixel class
    /// probabilities.
    pub fn decode(&self, z: &LatentMap) -> Result<Tensor<f32>> {
        let c = self.config();
        match z.grid.dims4() {
            Some((_, d, h, w)) if d == c.code_dim && h == c.latent_size && w == c.latent_size => {}
            _ => {
                return Err(CoreError::Incompatible(format!(
                    "latent {:?} does not match a {}x{}x{} manifold",
                    z.grid.shape(),
                    c.code_dim,
                    c.latent_size,
                    c.latent_size
                )))
            }
        }
        let out = self.chunked(&z.grid, |ctx, v| self.nets.decode(ctx, v))?;
        Ok(match c.modality {
            Modality::Depth => out,
            Modality::Segmentation => probabilities(&out),
        })
    }

    /// encode, quantize (VQ variant only), decode.
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let z = self.encode(x)?;
        let z = match self.config().variant {
            ManifoldVariant::Vq => self.quantize(&z)?,
            ManifoldVariant::Vae => z,
        };
        self.decode(&z)
    }

    /// Loss breakdown of a batch in eval mode (no parameter changes).
    pub fn evaluate_loss(&self, x: &Tensor<f32>) -> Result<VqLossBreakdown> {
        self.check_input(x)?;
        let mut ctx = Ctx::new(&self.store, Mode::Eval, 0);
        let xv = ctx.input(x.clone(), false);
        let pass = self.nets.pass(&mut ctx, xv)?;
        Ok(pass.losses.values(&ctx, self.config().beta))
    }

    pub fn save(&self, dir: &Path, adam: Option<&AdamState<f32>>, state: &TrainState, train: &TrainConfig) -> Result<()> {
        let mut extra = serde_json::Map::new();
        extra.insert("vq_config".into(), serde_json::to_value(self.config())?);
        extra.insert("manifold_info".into(), serde_json::to_value(self.info())?);
        let info = serde_json::to_vec_pretty(&self.info())?;
        train::save_run(dir, self.nets.networks(), &self.store, adam, state, train, extra, &[(MANIFOLD_INFO, info)])
    }

    /// Restores model, optimizer and training state.
    pub fn load(dir: &Path) -> Result<(Self, Option<AdamState<f32>>, TrainState, TrainConfig)> {
        let run = train::load_run(dir)?;
        let config: VqConfig = run.field("vq_config")?;
        let info: ManifoldInfo = run.field("manifold_info")?;
        let mut model = VqModel::new(&config, 0)?;
        model.depth_bounds = info.depth_bounds;
        let (adam, state, train) = run.restore_into(&mut model.store, dir)?;
        Ok((model, adam, state, train))
    }
}

pub fn read_manifold_info(dir: &Path) -> Result<ManifoldInfo> {
    let p = dir.join(MANIFOLD_INFO);
    let bytes = std::fs::read(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CoreError::MissingFile(p.clone()),
        _ => CoreError::io(&p, e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Channel softmax of `[N, C, H, W]` logits.
pub fn probabilities(logits: &Tensor<f32>) -> Tensor<f32> {
    let (n, c, h, w) = logits.dims4().expect("4-d logits");
    Tensor::new(logits.shape().to_vec(), softmax_channels(logits.data(), n, c, h * w)).expect("same shape")
}

/// Per-pixel argmax over channels of a `[N, C, H, W]` tensor; ties go to the
/// lower class.
pub fn argmax_channels(t: &Tensor<f32>) -> Vec<Vec<u8>> {
    let (n, c, h, w) = t.dims4().expect("4-d tensor");
    let plane = h * w;
    (0..n)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = (0usize, f32::NEG_INFINITY);
                    for ch in 0..c {
                        let v = t.data()[(i * c + ch) * plane + p];
                        if v > best.1 {
                            best = (ch, v);
                        }
                    }
                    best.0 as u8
                })
                .collect()
        })
        .collect()
}

/// One-hot `[N, C, H, W]` encoding of class maps.
pub fn one_hot(maps: &[&[u8]], classes: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let plane = h * w;
    let mut out = vec![0.0f32; maps.len() * classes * plane];
    for (i, m) in maps.iter().enumerate() {
        if m.len() != plane {
            return Err(CoreError::invalid(format!("label map {i} has {} pixels, expected {plane}", m.len())));
        }
        for (p, &c) in m.iter().enumerate() {
            if c as usize >= classes {
                return Err(CoreError::invalid(format!("class {c} outside {classes} classes")));
            }
            out[(i * classes + c as usize) * plane + p] = 1.0;
        }
    }
    Ok(Tensor::new(vec![maps.len(), classes, h, w], out)?)
}

/// Default manifold optimizer (the paper's Adam settings).
pub fn default_adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

/// Trains on `data` (`[N, C, S, S]`, also the target) until the step cap or a
/// plateau. `on_step` runs after every update, e.g. to checkpoint.
pub fn train_vqvae<C>(
    model: &mut VqModel,
    data: &Tensor<f32>,
    cfg: &TrainConfig,
    adam: &mut AdamState<f32>,
    state: &mut TrainState,
    on_step: C,
) -> Result<()>
where
    C: FnMut(&ParamStore<f32>, &AdamState<f32>, &TrainState) -> Result<bool>,
{
    model.check_input(data)?;
    let n = data.shape()[0];
    if n == 0 {
        return Err(CoreError::invalid("training set is empty"));
    }
    let nets = &model.nets;
    let config = nets.config.clone();
    let bpe = cfg.batches_per_epoch(n) as u64;
    let step_fn = |store: &ParamStore<f32>, batch: &[usize], step: u64, seed: u64| -> Result<StepOutput> {
        let mut ctx = Ctx::new(store, Mode::Train, seed);
        let x = ctx.input(data.select(batch), false);
        let pass = nets.pass(&mut ctx, x)?;
        ctx.backward(pass.losses.total)?;
        let loss = ctx.tape.value(pass.losses.total).item() as f64;
        let grads = ctx.param_grads();
        let mut updates = ctx.take_buffer_updates();
        if let Some(indices) = &pass.indices {
            let z_e = ctx.tape.value(pass.z_e);
            let mut table = store.get(nets.codebook).clone();
            let mut touched = false;
            if let (Some(decay), Some((count_id, sum_id))) = (config.ema_decay, nets.ema) {
                let (count, sum) = ema_update(store.get(count_id), store.get(sum_id), z_e, indices, decay);
                table = ema_codebook(&count, &sum);
                updates.push((count_id, count));
                updates.push((sum_id, sum));
                touched = true;
            }
            if let Some(usage_id) = nets.usage {
                let mut usage = store.get(usage_id).clone();
                for &k in indices {
                    usage.data_mut()[k] += 1.0;
                }
                if (step + 1).is_multiple_of(bpe) {
                    touched |= restart_dead(&mut table, usage.data(), z_e, seed);
                    usage = Tensor::zeros(usage.shape());
                }
                updates.push((usage_id, usage));
            }
            if touched {
                if let Some((_, sum_id)) = nets.ema {
                    // keep the EMA sums consistent with restarted codewords
                    let count = updates.iter().find(|u| Some(u.0) == nets.ema.map(|e| e.0)).map(|u| u.1.clone());
                    if let Some(count) = count {
                        let sum = Tensor::from_fn(table.shape(), |i| table.data()[i] * count.data()[i / config.code_dim]);
                        updates.retain(|u| u.0 != sum_id);
                        updates.push((sum_id, sum));
                    }
                }
                updates.push((nets.codebook, table));
            }
        }
        Ok(StepOutput { loss, grads, updates })
    };
    train::run(cfg, n, &mut model.store, adam, state, step_fn, on_step)
}

/// Decayed cluster sizes and vector sums for the EMA codebook.
fn ema_update(count: &Tensor<f32>, sum: &Tensor<f32>, z_e: &Tensor<f32>, indices: &[usize], decay: f64) -> (Tensor<f32>, Tensor<f32>) {
    let s = z_e.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    let k = count.len();
    let mut batch_count = vec![0f64; k];
    let mut batch_sum = vec![0f64; k * d];
    for i in 0..n {
        for p in 0..plane {
            let c = indices[i * plane + p];
            batch_count[c] += 1.0;
            for dd in 0..d {
                batch_sum[c * d + dd] += z_e.data()[(i * d + dd) * plane + p] as f64;
            }
        }
    }
    let new_count = Tensor::from_fn(&[k], |c| (decay * count.data()[c] as f64 + (1.0 - decay) * batch_count[c]) as f32);
    let new_sum = Tensor::from_fn(&[k, d], |j| (decay * sum.data()[j] as f64 + (1.0 - decay) * batch_sum[j]) as f32);
    (new_count, new_sum)
}

/// Codewords from EMA statistics with Laplace-smoothed cluster sizes.
fn ema_codebook(count: &Tensor<f32>, sum: &Tensor<f32>) -> Tensor<f32> {
    const EPS: f64 = 1e-5;
    let k = count.len();
    let d = sum.len() / k;
    let total: f64 = count.data().iter().map(|&c| c as f64).sum();
    Tensor::from_fn(&[k, d], |j| {
        let c = count.data()[j / d] as f64;
        let smoothed = (c + EPS) / (total + k as f64 * EPS) * total;
        (sum.data()[j] as f64 / smoothed) as f32
    })
}

/// Replaces codewords with zero usage by randomly chosen encoder outputs.
fn restart_dead(table: &mut Tensor<f32>, usage: &[f32], z_e: &Tensor<f32>, seed: u64) -> bool {
    let s = z_e.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    let mut any = false;
    for (k, &u) in usage.iter().enumerate() {
        if u == 0.0 {
            let cell = rng.random_range(0..n * plane);
            let (i, p) = (cell / plane, cell % plane);
            for dd in 0..d {
                table.data_mut()[k * d + dd] = z_e.data()[(i * d + dd) * plane + p];
            }
            any = true;
        }
    }
    any
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(modality: Modality, variant: ManifoldVariant) -> VqConfig {
        VqConfig {
            modality,
            num_classes: 3,
            image_size: 16,
            latent_size: 4,
            codebook_size: 8,
            code_dim: 4,
            first_features: 4,
            hidden_features: 6,
            residual_blocks: 1,
            variant,
            ..VqConfig::default()
        }
    }

    #[test]
    fn paper_shapes() {
        for (latent, stages) in [(8, 4), (16, 3), (32, 2)] {
            let c = VqConfig {
                latent_size: latent,
                ..VqConfig::default()
            };
            c.validate().unwrap();
            assert_eq!(c.stages(), stages);
            let strided = c.encoder_specs().iter().filter(|s| matches!(s, LayerSpec::Conv2d { stride: 2, .. })).count();
            assert_eq!(strided, stages);
            let up = c.decoder_specs().iter().filter(|s| matches!(s, LayerSpec::ConvTranspose2d { .. })).count();
            assert_eq!(up, stages);
        }
        assert!(VqConfig { latent_size: 12, ..VqConfig::default() }.validate().is_err());
        assert!(VqConfig { latent_size: 128, ..VqConfig::default() }.validate().is_err());
    }

    #[test]
    fn codebook_hand_cases() {
        let cb = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(cb.nearest(&[0.1, 0.2]), 0);
        assert_eq!(cb.nearest(&[1.0, 1.0]), 1);
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
        let z = LatentMap {
            grid: Tensor::new(vec![1, 2, 1, 3], vec![0.1, 1.0, 0.5, 0.2, 1.0, 0.5]).unwrap(),
            indices: None,
        };
        let q = cb.quantize(&z).unwrap();
        assert_eq!(q.indices.as_deref(), Some(&[0, 1, 0][..]));
        assert_eq!(q.grid.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(cb.quantize(&q).unwrap(), q);
        assert!(Codebook::new(Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn scalar_loss_example() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store, Mode::Train, 0);
        let s = |v: f64| Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap();
        let x = ctx.input(s(0.0), false);
        let xh = ctx.input(s(1.0), true);
        let ze = ctx.input(s(0.0), true);
        let zq = ctx.input(s(2.0), true);
        let recon = reconstruction_loss(&mut ctx, Modality::Depth, xh, x).unwrap();
        let l = vq_loss(&mut ctx, recon, ze, zq, 0.25).unwrap();
        let v = l.values(&ctx, 0.25);
        assert_eq!((v.reconstruction, v.codebook, v.commitment, v.total), (1.0, 4.0, 4.0, 6.0));
        ctx.backward(l.total).unwrap();
        // codebook term moves only z_q, commitment only z_e
        assert_eq!(ctx.tape.grad(zq).unwrap().item(), 4.0);
        assert_eq!(ctx.tape.grad(ze).unwrap().item(), 0.25 * -4.0);
    }

    #[test]
    fn encode_decode_shapes() {
        for modality in [Modality::Depth, Modality::Segmentation] {
            for variant in [ManifoldVariant::Vq, ManifoldVariant::Vae] {
                let m = VqModel::new(&tiny(modality, variant), 1).unwrap();
                let c = m.config().channels();
                let x = Tensor::from_fn(&[40, c, 16, 16], |i| ((i % 7) as f32) / 7.0);
                let z = m.encode(&x).unwrap();
                assert_eq!(z.grid.shape(), &[40, 4, 4, 4]);
                assert_eq!(m.encode(&x).unwrap(), z);
                let out = m.reconstruct(&x).unwrap();
                assert_eq!(out.shape(), &[40, c, 16, 16]);
                if modality == Modality::Segmentation {
                    for i in 0..40 * 256 {
                        let (n, p) = (i / 256, i % 256);
                        let s: f32 = (0..c).map(|ch| out.data()[(n * c + ch) * 256 + p]).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                    }
                } else {
                    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
                assert!(m.encode(&Tensor::zeros(&[1, c + 1, 16, 16])).is_err());
            }
        }
    }

    #[test]
    fn kl_closed_forms() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store, Mode::Eval, 0);
        let m = ctx.input(Tensor::zeros(&[1, 1, 1, 1]), false);
        let lv = ctx.input(Tensor::zeros(&[1, 1, 1, 1]), false);
        let kl = ctx.tape.gaussian_kl(m, lv).unwrap();
        assert_eq!(ctx.tape.value(kl).item(), 0.0);
        let mu = ctx.input(Tensor::full(&[1, 1, 1, 1], 1.5), false);
        let kl = ctx.tape.gaussian_kl(mu, lv).unwrap();
        assert!((ctx.tape.value(kl).item() - 1.5 * 1.5 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_and_argmax_invert() {
        let maps: Vec<Vec<u8>> = vec![vec![0, 2, 1, 1], vec![2, 2, 0, 1]];
        let refs: Vec<&[u8]> = maps.iter().map(|m| m.as_slice()).collect();
        let t = one_hot(&refs, 3, 2, 2).unwrap();
        assert_eq!(argmax_channels(&t), maps);
        assert!(one_hot(&refs, 2, 2, 2).is_err());
    }
}
