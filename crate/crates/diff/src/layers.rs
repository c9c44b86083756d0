//! Declarative layer specs and the networks instantiated from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::graph::{Ctx, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    ConvTranspose2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Sigmoid,
    BatchNorm {
        channels: usize,
    },
    Dropout {
        p: f64,
    },
    GlobalAvgPool,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// conv3x3-bn-relu-conv3x3-bn plus identity skip, relu after the add.
    Residual {
        channels: usize,
    },
    /// ResNet basic block; a strided or widening block gets a 1x1
    /// projection shortcut.
    ResNetBasic {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    /// `[N, ...]` -> `[N, prod(...)]`.
    Flatten,
    /// `[N, ...]` -> `[N, shape...]`.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    /// Strided "same" convolution: kernel 4, padding 1 halves even sizes
    /// at stride 2; kernel 3, padding 1 keeps the size at stride 1.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            bias: true,
        }
    }

    /// Doubling transposed convolution (kernel 4, stride 2, padding 1).
    pub fn upconv(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::ConvTranspose2d {
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            padding: 1,
            bias: true,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv2d-transposed",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::MaxPool { .. } => "max-pool",
            LayerSpec::Residual { .. } => "residual-block",
            LayerSpec::ResNetBasic { .. } => "resnet-basic-block",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DiffError::InvalidArgument(format!("{}: {msg}", self.kind_name())));
        match *self {
            LayerSpec::Conv2d { kernel, stride, .. } | LayerSpec::ConvTranspose2d { kernel, stride, .. } => {
                if stride == 0 {
                    return bad("stride must be >= 1");
                }
                if kernel == 0 {
                    return bad("kernel must be >= 1");
                }
            }
            LayerSpec::MaxPool { kernel, stride, padding } => {
                if stride == 0 || kernel == 0 || padding >= kernel {
                    return bad("invalid window");
                }
            }
            LayerSpec::ResNetBasic { stride: 0, .. } => return bad("stride must be >= 1"),
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => return bad("p must lie in [0, 1)"),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct BnParams {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvParams),
    ConvT(ConvParams),
    Dense { weight: ParamId, bias: ParamId },
    Relu,
    Sigmoid,
    BatchNorm(BnParams),
    Dropout(f64),
    GlobalAvgPool,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Residual { c1: ConvParams, b1: BnParams, c2: ConvParams, b2: BnParams },
    ResNetBasic {
        c1: ConvParams,
        b1: BnParams,
        c2: ConvParams,
        b2: BnParams,
        shortcut: Option<(ConvParams, BnParams)>,
    },
    Flatten,
    Reshape(Vec<usize>),
}

fn kaiming_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: f64, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1.0)).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

struct Builder<'a, T: Real, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Result<ConvParams> {
        let w = kaiming_uniform(&[out_ch, in_ch, kernel, kernel], (in_ch * kernel * kernel) as f64, self.rng);
        let weight = self.store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(ConvParams { weight, bias, stride, padding })
    }

    fn conv_t(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Result<ConvParams> {
        // each output sees in_ch * (k / s)^2 taps
        let fan_in = (in_ch * kernel * kernel) as f64 / (stride * stride) as f64;
        let w = kaiming_uniform(&[in_ch, out_ch, kernel, kernel], fan_in, self.rng);
        let weight = self.store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(ConvParams { weight, bias, stride, padding })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c]), ParamKind::Trainable)?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Trainable)?,
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
            var: self.store.add(format!("{name}.running_var"), Tensor::ones(&[c]), ParamKind::Buffer)?,
        })
    }

    fn layer(&mut self, name: &str, spec: &LayerSpec) -> Result<Layer> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, bias } => {
                Layer::Conv(self.conv(name, in_ch, out_ch, kernel, stride, padding, bias)?)
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, padding, bias } => {
                Layer::ConvT(self.conv_t(name, in_ch, out_ch, kernel, stride, padding, bias)?)
            }
            LayerSpec::Dense { in_features, out_features } => {
                let w = kaiming_uniform(&[out_features, in_features], in_features as f64, self.rng);
                Layer::Dense {
                    weight: self.store.add(format!("{name}.weight"), w, ParamKind::Trainable)?,
                    bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), ParamKind::Trainable)?,
                }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Sigmoid => Layer::Sigmoid,
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(self.bn(name, channels)?),
            LayerSpec::Dropout { p } => Layer::Dropout(p),
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::MaxPool { kernel, stride, padding } => Layer::MaxPool { kernel, stride, padding },
            LayerSpec::Residual { channels } => Layer::Residual {
                c1: self.conv(&format!("{name}.conv1"), channels, channels, 3, 1, 1, false)?,
                b1: self.bn(&format!("{name}.bn1"), channels)?,
                c2: self.conv(&format!("{name}.conv2"), channels, channels, 3, 1, 1, false)?,
                b2: self.bn(&format!("{name}.bn2"), channels)?,
            },
            LayerSpec::ResNetBasic { in_ch, out_ch, stride } => {
                let c1 = self.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false)?;
                let b1 = self.bn(&format!("{name}.bn1"), out_ch)?;
                let c2 = self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false)?;
                let b2 = self.bn(&format!("{name}.bn2"), out_ch)?;
                let shortcut = if stride != 1 || in_ch != out_ch {
                    Some((
                        self.conv(&format!("{name}.down"), in_ch, out_ch, 1, stride, 0, false)?,
                        self.bn(&format!("{name}.down_bn"), out_ch)?,
                    ))
                } else {
                    None
                };
                Layer::ResNetBasic { c1, b1, c2, b2, shortcut }
            }
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Reshape { ref shape } => Layer::Reshape(shape.clone()),
        })
    }
}

fn conv_fwd<T: Real>(ctx: &mut Ctx<T>, p: &ConvParams, x: Var, transposed: bool) -> Result<Var> {
    let w = ctx.param(p.weight);
    let b = p.bias.map(|b| ctx.param(b));
    if transposed {
        ctx.tape.conv_transpose2d(x, w, b, p.stride, p.padding)
    } else {
        ctx.tape.conv2d(x, w, b, p.stride, p.padding)
    }
}

fn bn_fwd<T: Real>(ctx: &mut Ctx<T>, p: &BnParams, x: Var) -> Result<Var> {
    let gamma = ctx.param(p.gamma);
    let beta = ctx.param(p.beta);
    let eps = T::lit(BN_EPS);
    match ctx.mode() {
        Mode::Train => {
            let per_channel = ctx.tape.value(x).len() / ctx.tape.shape(x)[1].max(1);
            let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
            let m = T::lit(BN_MOMENTUM);
            let unbias = T::lit(per_channel as f64 / (per_channel as f64 - 1.0).max(1.0));
            let old_mean = ctx.store().get(p.mean).clone();
            let old_var = ctx.store().get(p.var).clone();
            let new_mean = Tensor::from_fn(old_mean.shape(), |c| (T::one() - m) * old_mean.data()[c] + m * mean[c]);
            let new_var = Tensor::from_fn(old_var.shape(), |c| (T::one() - m) * old_var.data()[c] + m * var[c] * unbias);
            ctx.queue_buffer_update(p.mean, new_mean);
            ctx.queue_buffer_update(p.var, new_var);
            Ok(y)
        }
        Mode::Eval => {
            let mean = ctx.store().get(p.mean).data().to_vec();
            let var = ctx.store().get(p.var).data().to_vec();
            ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}

impl Layer {
    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv(p) => conv_fwd(ctx, p, x, false),
            Layer::ConvT(p) => conv_fwd(ctx, p, x, true),
            Layer::Dense { weight, bias } => {
                let w = ctx.param(*weight);
                let b = ctx.param(*bias);
                ctx.tape.linear(x, w, Some(b))
            }
            Layer::Relu => ctx.tape.relu(x),
            Layer::Sigmoid => ctx.tape.sigmoid(x),
            Layer::BatchNorm(p) => bn_fwd(ctx, p, x),
            Layer::Dropout(p) => {
                if ctx.mode() == Mode::Eval || *p == 0.0 {
                    return Ok(x);
                }
                let mask = ctx.dropout_mask(ctx.tape.value(x).len(), *p);
                ctx.tape.dropout_with_mask(x, mask)
            }
            Layer::GlobalAvgPool => ctx.tape.global_avg_pool(x),
            Layer::MaxPool { kernel, stride, padding } => ctx.tape.max_pool(x, *kernel, *stride, *padding),
            Layer::Residual { c1, b1, c2, b2 } => {
                let h = conv_fwd(ctx, c1, x, false)?;
                let h = bn_fwd(ctx, b1, h)?;
                let h = ctx.tape.relu(h)?;
                let h = conv_fwd(ctx, c2, h, false)?;
                let h = bn_fwd(ctx, b2, h)?;
                let s = ctx.tape.add(x, h)?;
                ctx.tape.relu(s)
            }
            Layer::ResNetBasic { c1, b1, c2, b2, shortcut } => {
                let h = conv_fwd(ctx, c1, x, false)?;
                let h = bn_fwd(ctx, b1, h)?;
                let h = ctx.tape.relu(h)?;
                let h = conv_fwd(ctx, c2, h, false)?;
                let h = bn_fwd(ctx, b2, h)?;
                let skip = match shortcut {
                    Some((c, b)) => {
                        let s = conv_fwd(ctx, c, x, false)?;
                        bn_fwd(ctx, b, s)?
                    }
                    None => x,
                };
                let s = ctx.tape.add(skip, h)?;
                ctx.tape.relu(s)
            }
            Layer::Flatten => {
                let s = ctx.tape.shape(x);
                let n = s[0];
                let rest = s[1..].iter().product::<usize>();
                ctx.tape.reshape(x, &[n, rest])
            }
            Layer::Reshape(shape) => {
                let mut full = vec![ctx.tape.shape(x)[0]];
                full.extend_from_slice(shape);
                ctx.tape.reshape(x, &full)
            }
        }
    }
}

/// A feed-forward stack of layers whose parameters live in a [`ParamStore`]
/// under `"{name}.{index}..."`.
#[derive(Clone, Debug)]
pub struct Network {
    name: String,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

impl Network {
    /// Registers freshly initialised parameters (Kaiming-uniform fan-in for
    /// conv and dense weights, zero biases, batch-norm gamma 1 / beta 0).
    pub fn build<T: Real, R: Rng>(name: &str, specs: Vec<LayerSpec>, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let mut builder = Builder { store, rng };
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| builder.layer(&format!("{name}.{i}"), s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            name: name.to_string(),
            specs,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        for (i, (layer, spec)) in self.layers.iter().zip(&self.specs).enumerate() {
            x = layer.forward(ctx, x).map_err(|e| match e {
                DiffError::Shape { layer, detail } => DiffError::Shape {
                    layer: format!("{}[{i}] {} ({layer})", self.name, spec.kind_name()),
                    detail,
                },
                other => other,
            })?;
        }
        Ok(x)
    }
}
