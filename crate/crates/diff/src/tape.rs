//! Arena-backed reverse-mode tape. Every op computes its value eagerly and
//! records just enough to run its vector-Jacobian product later.

use crate::error::{DiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Reshape { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    GlobalAvgPool { x: Var },
    MaxPool { x: Var, argmax: Vec<usize>, geom: ConvGeom },
    Mse { a: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, target: Tensor<T>, probs: Vec<T> },
    GaussianKl { mean: Var, logvar: Var },
    Sum { x: Var },
    Mean { x: Var },
    StraightThrough { src: Var },
    EmbedLookup { table: Var, indices: Vec<usize>, dim: usize, plane: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. With `tracking` off, nodes keep only values; this is
/// the inference path.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    retained: Vec<usize>,
    tracking: bool,
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(DiffError::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn dims4<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .ok_or_else(|| DiffError::shape(op, format!("expected [N, C, H, W], got {:?}", t.shape())))
}

impl<T: Real> Tape<T> {
    pub fn new(tracking: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            retained: Vec::new(),
            tracking,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Keeps the gradient of the intermediate node `v` after backward (leaf
    /// gradients are always kept).
    pub fn retain_grad(&mut self, v: Var) {
        if !self.retained.contains(&v.0) {
            self.retained.push(v.0);
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Distance of the recorded graph from its non-differentiable points:
    /// the smallest `|x|` over relu inputs and the smallest gap between the
    /// two largest values of any max-pool window. Finite differences are only
    /// meaningful when this exceeds the step size.
    pub fn kink_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        let mut note = |m: f64| margin = Some(margin.map_or(m, |old: f64| old.min(m)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[x.0].value.data() {
                        note(v.abs().as_f64());
                    }
                }
                Op::MaxPool { x, geom, .. } => {
                    let xv = &self.nodes[x.0].value;
                    let plane = geom.h * geom.w;
                    for p in xv.data().chunks(plane) {
                        for oy in 0..geom.h_out {
                            for ox in 0..geom.w_out {
                                let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                                for ky in 0..geom.kernel {
                                    for kx in 0..geom.kernel {
                                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= geom.h || ix as usize >= geom.w {
                                            continue;
                                        }
                                        let v = p[iy as usize * geom.w + ix as usize].as_f64();
                                        if v > a {
                                            b = a;
                                            a = v;
                                        } else if v > b {
                                            b = v;
                                        }
                                    }
                                }
                                if b.is_finite() {
                                    note(a - b);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Which side of every kink the current values sit on: the sign of each
    /// relu input and the winner of each max-pool window. Two evaluations
    /// with equal patterns lie on the same smooth piece of the graph.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => out.extend(self.nodes[x.0].value.data().iter().map(|v| (v.as_f64() > 0.0) as usize)),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Records a constant or trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.tracking,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        value.check_finite(name)?;
        let needs = self.tracking && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: if needs { op } else { Op::Leaf },
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv2d", self.value(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(DiffError::shape(
                "conv2d",
                format!("weight {ws:?} does not match input channels {c}"),
            ));
        }
        if let Some(b) = b {
            check_same("conv2d bias", self.shape(b), &[ws[0]])?;
        }
        let geom = ConvGeom::new(c, h, wd, ws[2], stride, pad)
            .ok_or_else(|| DiffError::shape("conv2d", format!("kernel {} does not fit {h}x{wd}", ws[2])))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            ws[0],
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, ws[0], geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, &inputs, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution, `w: [Cin, Cout, k, k]`.
    /// Output size is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv_transpose2d", self.value(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] {
            return Err(DiffError::shape(
                "conv_transpose2d",
                format!("weight {ws:?} does not match input channels {c}"),
            ));
        }
        let k = ws[2];
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        if stride == 0 || ho < 2 * pad + 1 || wo < 2 * pad + 1 {
            return Err(DiffError::shape("conv_transpose2d", "degenerate output size"));
        }
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
        let geom = ConvGeom::new(ws[1], ho, wo, k, stride, pad)
            .filter(|g| g.h_out == h && g.w_out == wd)
            .ok_or_else(|| DiffError::shape("conv_transpose2d", "inconsistent geometry"))?;
        if let Some(b) = b {
            check_same("conv_transpose2d bias", self.shape(b), &[ws[1]])?;
        }
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            c,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, ws[1], ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv_transpose2d", value, &inputs, Op::ConvTranspose2d { x, w, b, geom })
    }

    /// `x: [N, F]`, `w: [O, F]` -> `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(DiffError::shape("dense", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(n, f, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            check_same("dense bias", self.shape(b), &[o])?;
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v = *v + bb;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("dense", value, &inputs, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", value, &[x], Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push("exp", value, &[x], Op::Exp { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push("sub", value, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, &[x], Op::Scale { x, c })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| DiffError::shape("reshape", e.to_string()))?;
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    /// Batch normalisation over every axis except 1, using batch statistics.
    /// Returns the node and the (mean, biased variance) it used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        if n * s < 2 {
            return Err(DiffError::shape("batchnorm", "training needs more than one value per channel"));
        }
        let (mean, var) = kernels::channel_mean_var(self.value(x).data(), n, c, s);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = self.bn_apply(x, gamma, beta, &mean, &invstd);
        let v = self.push(
            "batchnorm",
            value,
            &[x, gamma, beta],
            Op::BatchNormTrain { x, gamma, beta, mean: mean.clone(), invstd },
        )?;
        Ok((v, mean, var))
    }

    /// Batch normalisation with frozen statistics: a per-channel affine map.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(DiffError::shape("batchnorm", "running statistics length"));
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = self.bn_apply(x, gamma, beta, mean, &invstd);
        self.push(
            "batchnorm",
            value,
            &[x, gamma, beta],
            Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), invstd },
        )
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(DiffError::shape("batchnorm", format!("input {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let s = xs[2..].iter().product();
        check_same("batchnorm gamma", self.shape(gamma), &[c])?;
        check_same("batchnorm beta", self.shape(beta), &[c])?;
        Ok((n, c, s))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], invstd: &[T]) -> Tensor<T> {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let c = g.len();
        let s = xv.len() / (xv.shape()[0] * c).max(1);
        let mut out = xv.clone();
        for (idx, plane) in out.data_mut().chunks_mut(s).enumerate() {
            let ch = idx % c;
            let (m, is, gg, bb) = (mean[ch], invstd[ch], g[ch], b[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) * is * gg + bb);
        }
        out
    }

    /// Inverted dropout with a caller-supplied keep mask (values 0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(DiffError::shape("dropout", "mask length"));
        }
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
        self.push("dropout", value, &[x], Op::Dropout { x, mask })
    }

    /// `[N, C, H, W]` -> `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(x))?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], data)?;
        self.push("global_avg_pool", value, &[x], Op::GlobalAvgPool { x })
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("max_pool", self.value(x))?;
        let geom = ConvGeom::new(c, h, w, kernel, stride, pad)
            .filter(|_| pad < kernel)
            .ok_or_else(|| DiffError::shape("max_pool", format!("window {kernel} on {h}x{w}")))?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n, &geom);
        let value = Tensor::new(vec![n, c, geom.h_out, geom.w_out], out)?;
        self.push("max_pool", value, &[x], Op::MaxPool { x, argmax, geom })
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::lit(av.len().max(1) as f64);
        let loss = av.iter().zip(bv).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / n;
        self.push("mse", Tensor::scalar(loss), &[a, b], Op::Mse { a, b })
    }

    /// Per-pixel cross-entropy of channel-softmaxed logits against a
    /// per-pixel distribution `target`, averaged over N*H*W positions.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let (n, c, h, w) = dims4("softmax_cross_entropy", self.value(logits))?;
        check_same("softmax_cross_entropy", self.shape(logits), target.shape())?;
        let probs = softmax_channels(self.value(logits).data(), n, c, h * w);
        let s = h * w;
        let mut loss = T::zero();
        let tiny = T::lit(1e-12);
        for i in 0..n {
            for ch in 0..c {
                for p in 0..s {
                    let idx = (i * c + ch) * s + p;
                    let y = target.data()[idx];
                    if y != T::zero() {
                        loss = loss - y * probs[idx].max(tiny).ln();
                    }
                }
            }
        }
        let loss = loss / T::lit((n * s).max(1) as f64);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy { logits, target: target.clone(), probs },
        )
    }

    /// Mean over elements of `KL(N(mean, exp(logvar)) || N(0, 1))`.
    pub fn gaussian_kl(&mut self, mean: Var, logvar: Var) -> Result<Var> {
        check_same("gaussian_kl", self.shape(mean), self.shape(logvar))?;
        let (m, lv) = (self.value(mean).data(), self.value(logvar).data());
        let half = T::lit(0.5);
        let total: T = m
            .iter()
            .zip(lv)
            .map(|(&mu, &l)| half * (mu * mu + l.exp() - l - T::one()))
            .sum();
        let value = Tensor::scalar(total / T::lit(m.len().max(1) as f64));
        self.push("gaussian_kl", value, &[mean, logvar], Op::GaussianKl { mean, logvar })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", value, &[x], Op::Mean { x })
    }

    /// Node whose value is `forward_value` but whose gradient is copied
    /// unchanged onto `src` (straight-through estimator).
    pub fn straight_through(&mut self, src: Var, forward_value: Tensor<T>) -> Result<Var> {
        check_same("straight_through", self.shape(src), forward_value.shape())?;
        self.push("straight_through", forward_value, &[src], Op::StraightThrough { src })
    }

    /// Gathers rows of `table: [K, D]` into a `[N, D, h, w]` grid.
    /// `indices` is laid out as `[N, h, w]`.
    pub fn embed_lookup(&mut self, table: Var, indices: &[usize], n: usize, h: usize, w: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || indices.len() != n * h * w {
            return Err(DiffError::shape("embed_lookup", format!("table {ts:?}, {} indices", indices.len())));
        }
        let (k, d) = (ts[0], ts[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(DiffError::InvalidArgument(format!("codeword index {bad} >= {k}")));
        }
        let plane = h * w;
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); n * d * plane];
        for i in 0..n {
            for p in 0..plane {
                let row = &tv[indices[i * plane + p] * d..][..d];
                for (dd, &v) in row.iter().enumerate() {
                    out[(i * d + dd) * plane + p] = v;
                }
            }
        }
        let value = Tensor::new(vec![n, d, h, w], out)?;
        self.push(
            "embed_lookup",
            value,
            &[table],
            Op::EmbedLookup { table, indices: indices.to_vec(), dim: d, plane },
        )
    }

    /// Back-propagates from the scalar `loss`. Gradients of earlier passes
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::NoGraph("loss is not a node of this tape".into()));
        }
        if !self.tracking {
            return Err(DiffError::NoGraph("tape was recorded without gradient tracking".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(DiffError::InvalidArgument(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(DiffError::NoGraph("loss does not depend on any tracked variable".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.node_backward(i, &g)?;
            if self.retained.contains(&i) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut pending: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let out_ch = wv.shape()[0];
                let grads = kernels::conv2d_backward(xv.data(), n, geom, wv.data(), out_ch, g.data(), self.wants(*x));
                if let Some(gx) = grads.input {
                    pending.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                pending.push((*w, Tensor::new(wv.shape().to_vec(), grads.weight)?));
                if let Some(b) = b {
                    pending.push((*b, Tensor::new(vec![out_ch], grads.bias)?));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let grads =
                    kernels::conv_transpose2d_backward(xv.data(), n, c, geom, wv.data(), g.data(), self.wants(*x));
                if let Some(gx) = grads.input {
                    pending.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                pending.push((*w, Tensor::new(wv.shape().to_vec(), grads.weight)?));
                if let Some(b) = b {
                    pending.push((*b, Tensor::new(vec![geom.channels], grads.bias)?));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * f];
                    gemm(n, o, f, g.data(), false, wv.data(), false, &mut gx, false);
                    pending.push((*x, Tensor::new(vec![n, f], gx)?));
                }
                let mut gw = vec![T::zero(); o * f];
                gemm(o, n, f, g.data(), true, xv.data(), false, &mut gw, false);
                pending.push((*w, Tensor::new(vec![o, f], gw)?));
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    pending.push((*b, Tensor::new(vec![o], gb)?));
                }
            }
            Op::Relu { x } => {
                pending.push((*x, g.zip_map(out, |gg, y| if y > T::zero() { gg } else { T::zero() })));
            }
            Op::Sigmoid { x } => {
                pending.push((*x, g.zip_map(out, |gg, y| gg * y * (T::one() - y))));
            }
            Op::Exp { x } => {
                pending.push((*x, g.zip_map(out, |gg, y| gg * y)));
            }
            Op::Add { a, b } => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                pending.push((*a, g.zip_map(self.value(*b), |gg, q| gg * q)));
                pending.push((*b, g.zip_map(self.value(*a), |gg, p| gg * p)));
            }
            Op::Scale { x, c } => {
                let c = *c;
                pending.push((*x, g.map(|v| v * c)));
            }
            Op::Reshape { x } => {
                pending.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::BatchNormTrain { x, gamma, beta, mean, invstd } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let n = xv.shape()[0];
                let s = xv.len() / (n * c);
                let count = T::lit((n * s) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (idx, (gp, xp)) in g.data().chunks(s).zip(xv.data().chunks(s)).enumerate() {
                    let ch = idx % c;
                    for (&gg, &xx) in gp.iter().zip(xp) {
                        sum_g[ch] = sum_g[ch] + gg;
                        sum_gx[ch] = sum_gx[ch] + gg * (xx - mean[ch]) * invstd[ch];
                    }
                }
                let mut gx = xv.clone();
                for (idx, (gp, xp)) in gx.data_mut().chunks_mut(s).zip(g.data().chunks(s)).enumerate() {
                    let ch = idx % c;
                    let k = gm[ch] * invstd[ch] / count;
                    for (v, &gg) in gp.iter_mut().zip(xp) {
                        let xhat = (*v - mean[ch]) * invstd[ch];
                        *v = k * (count * gg - sum_g[ch] - xhat * sum_gx[ch]);
                    }
                }
                pending.push((*x, gx));
                pending.push((*gamma, Tensor::new(vec![c], sum_gx)?));
                pending.push((*beta, Tensor::new(vec![c], sum_g)?));
            }
            Op::BatchNormEval { x, gamma, beta, mean, invstd } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let s = xv.len() / (xv.shape()[0] * c);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                let mut gx = g.clone();
                for (idx, (gp, xp)) in gx.data_mut().chunks_mut(s).zip(xv.data().chunks(s)).enumerate() {
                    let ch = idx % c;
                    for (v, &xx) in gp.iter_mut().zip(xp) {
                        sum_g[ch] = sum_g[ch] + *v;
                        sum_gx[ch] = sum_gx[ch] + *v * (xx - mean[ch]) * invstd[ch];
                        *v = *v * gm[ch] * invstd[ch];
                    }
                }
                pending.push((*x, gx));
                pending.push((*gamma, Tensor::new(vec![c], sum_gx)?));
                pending.push((*beta, Tensor::new(vec![c], sum_g)?));
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v = *v * m);
                pending.push((*x, gx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x).to_vec();
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::lit(plane as f64);
                let mut gx = Vec::with_capacity(plane * g.len());
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v * inv, plane));
                }
                pending.push((*x, Tensor::new(xs, gx)?));
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (&src, &gg) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] = gx.data()[src] + gg;
                }
                pending.push((*x, gx));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.item() * T::lit(2.0) / T::lit(av.len().max(1) as f64);
                let ga = av.zip_map(bv, |p, q| (p - q) * k);
                pending.push((*b, ga.map(|v| -v)));
                pending.push((*a, ga));
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                let (n, c, h, w) = self.value(*logits).dims4().expect("checked at record time");
                let s = h * w;
                let k = g.item() / T::lit((n * s).max(1) as f64);
                let td = target.data();
                let mut gx = vec![T::zero(); probs.len()];
                for i in 0..n {
                    for p in 0..s {
                        let mass: T = (0..c).map(|ch| td[(i * c + ch) * s + p]).sum();
                        for ch in 0..c {
                            let idx = (i * c + ch) * s + p;
                            gx[idx] = k * (probs[idx] * mass - td[idx]);
                        }
                    }
                }
                pending.push((*logits, Tensor::new(vec![n, c, h, w], gx)?));
            }
            Op::GaussianKl { mean, logvar } => {
                let mv = self.value(*mean);
                let lv = self.value(*logvar);
                let k = g.item() / T::lit(mv.len().max(1) as f64);
                let half = T::lit(0.5);
                pending.push((*mean, mv.map(|m| m * k)));
                pending.push((*logvar, lv.map(|l| half * (l.exp() - T::one()) * k)));
            }
            Op::Sum { x } => {
                pending.push((*x, Tensor::full(self.shape(*x), g.item())));
            }
            Op::Mean { x } => {
                let n = T::lit(self.value(*x).len().max(1) as f64);
                pending.push((*x, Tensor::full(self.shape(*x), g.item() / n)));
            }
            Op::StraightThrough { src } => {
                pending.push((*src, g.clone()));
            }
            Op::EmbedLookup { table, indices, dim, plane } => {
                let ts = self.shape(*table).to_vec();
                let mut gt = vec![T::zero(); ts[0] * ts[1]];
                let n = indices.len() / plane;
                for i in 0..n {
                    for p in 0..*plane {
                        let row = indices[i * plane + p];
                        for d in 0..*dim {
                            gt[row * dim + d] = gt[row * dim + d] + g.data()[(i * dim + d) * plane + p];
                        }
                    }
                }
                pending.push((*table, Tensor::new(ts, gt)?));
            }
        }
        for (v, t) in pending {
            self.accumulate(v, t);
        }
        Ok(())
    }
}

/// Softmax over axis 1 of an `[N, C, S]` buffer.
pub fn softmax_channels<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for p in 0..s {
            let idx = |ch: usize| (i * c + ch) * s + p;
            let m = (0..c).map(|ch| x[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                z = z + e;
            }
            for ch in 0..c {
                out[idx(ch)] = out[idx(ch)] / z;
            }
        }
    }
    out
}
