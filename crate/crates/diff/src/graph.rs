use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) pass of a model: a tape bound to a
/// read-only parameter store, plus the pass-local RNG.
///
/// Batch-norm running statistics computed in training mode are queued as
/// buffer updates; the caller applies them with [`ParamStore::apply_buffer_updates`].
pub struct Ctx<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    frozen: bool,
    bound: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'s, T: Real> Ctx<'s, T> {
    /// Tracked pass: trainable parameters receive gradients.
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self::build(store, mode, seed, true, false)
    }

    /// Untracked pass (inference, target encoding).
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::build(store, Mode::Eval, 0, false, true)
    }

    /// Tracked pass in which this store's parameters act as constants. Used
    /// when gradients must flow *through* a frozen model.
    pub fn frozen(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self::build(store, mode, seed, true, true)
    }

    fn build(store: &'s ParamStore<T>, mode: Mode, seed: u64, tracking: bool, frozen: bool) -> Self {
        Ctx {
            tape: Tape::new(tracking),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen,
            bound: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Tape variable for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = !self.frozen && self.store.kind(id) == ParamKind::Trainable;
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.bound.insert(id, v);
        v
    }

    /// Re-binds a parameter to an existing tape variable. The stored value is
    /// ignored from then on; gradients of the pass flow into `var`.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(value, requires_grad)
    }

    pub fn queue_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every trainable parameter touched by the pass. A
    /// parameter the loss does not reach gets an all-zero gradient.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(id, _)| !self.frozen && self.store.kind(**id) == ParamKind::Trainable)
            .map(|(&id, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Keep mask for inverted dropout: 0 with probability `p`, else 1/(1-p).
    pub fn dropout_mask(&mut self, len: usize, p: f64) -> Vec<T> {
        let keep = T::lit(1.0 / (1.0 - p));
        (0..len)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect()
    }

    /// Standard normal noise.
    pub fn normal(&mut self, shape: &[usize]) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
    }
}

impl<T: Real> ParamStore<T> {
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, v) in updates {
            self.set(id, v)?;
        }
        Ok(())
    }
}
