//! Minibatch training loop shared by the manifold, AT-net and E2E models:
//! seeded batch order, Adam updates, plateau stopping and resumable state.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sonovis_diff::checkpoint::{load_checkpoint, save_checkpoint_with, CheckpointMeta};
use sonovis_diff::{AdamState, LayerSpec, ParamId, ParamStore, Tensor};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Hard cap on optimizer steps.
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps between plateau evaluations (mean training loss of the interval).
    pub eval_every: u64,
    /// Evaluations without sufficient improvement before stopping.
    pub patience: usize,
    /// Required relative improvement over the best evaluation so far.
    pub rel_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 20_000,
            batch_size: 32,
            lr: 1e-4,
            eval_every: 100,
            patience: 10,
            rel_threshold: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(CoreError::Config("batch_size, eval_every and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.rel_threshold >= 0.0) {
            return Err(CoreError::Config(format!("invalid lr {} or threshold {}", self.lr, self.rel_threshold)));
        }
        Ok(())
    }

    /// Full batches per epoch; a short tail is skipped (one short batch when
    /// the set is smaller than a batch).
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size).max(1)
    }

    /// Sample indices of the batch used at 0-based step `step`.
    pub fn batch(&self, n: usize, step: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch(n) as u64;
        let (epoch, pos) = (step / bpe, (step % bpe) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        let b = self.batch_size.min(n);
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// Seed for the pass-local RNG (dropout, reparameterisation) of a step.
    pub fn step_seed(&self, step: u64) -> u64 {
        splitmix(self.seed ^ splitmix(step.wrapping_add(0x5EED)))
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Running,
    StepCap,
    Plateau,
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Stored as `null` while no evaluation has happened yet.
    #[serde(with = "unbounded")]
    pub best: f64,
    pub since_best: usize,
    pub interval_sum: f64,
    pub interval_count: u64,
    /// Loss of the very first step.
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// `(step, interval mean)` at each evaluation.
    pub evaluations: Vec<(u64, f64)>,
    pub stop: StopReason,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            step: 0,
            best: f64::INFINITY,
            since_best: 0,
            interval_sum: 0.0,
            interval_count: 0,
            first_loss: None,
            last_loss: None,
            evaluations: Vec::new(),
            stop: StopReason::Running,
        }
    }
}

impl TrainState {
    /// Mean loss of the latest evaluation interval, or the last step loss.
    pub fn final_loss(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.1).or(self.last_loss)
    }

    /// Records one step; returns true when training should stop.
    fn record(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        self.step += 1;
        self.first_loss.get_or_insert(loss);
        self.last_loss = Some(loss);
        self.interval_sum += loss;
        self.interval_count += 1;
        if self.step.is_multiple_of(cfg.eval_every) {
            let mean = self.interval_sum / self.interval_count as f64;
            self.evaluations.push((self.step, mean));
            self.interval_sum = 0.0;
            self.interval_count = 0;
            if mean < self.best * (1.0 - cfg.rel_threshold) {
                self.best = mean;
                self.since_best = 0;
            } else {
                self.since_best += 1;
                if self.since_best >= cfg.patience {
                    self.stop = StopReason::Plateau;
                    return true;
                }
            }
        }
        if self.step >= cfg.max_steps {
            self.stop = StopReason::StepCap;
            return true;
        }
        false
    }
}

/// Result of one forward/backward pass.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<f32>)>,
    /// Non-gradient state writes (batch-norm statistics, EMA codebooks).
    pub updates: Vec<(ParamId, Tensor<f32>)>,
}

/// Runs steps until the cap or a plateau. `step_fn(store, batch, step,
/// seed)` computes the pass; `on_step` sees the state after every update
/// (for periodic checkpoints) and may stop the run early by returning false.
pub fn run<F, C>(
    cfg: &TrainConfig,
    n: usize,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    state: &mut TrainState,
    mut step_fn: F,
    mut on_step: C,
) -> Result<()>
where
    F: FnMut(&ParamStore<f32>, &[usize], u64, u64) -> Result<StepOutput>,
    C: FnMut(&ParamStore<f32>, &AdamState<f32>, &TrainState) -> Result<bool>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(CoreError::invalid("training set is empty"));
    }
    if state.stop != StopReason::Running {
        return Ok(());
    }
    loop {
        let step = state.step;
        let batch = cfg.batch(n, step);
        let out = step_fn(store, &batch, step, cfg.step_seed(step)).map_err(|e| match e {
            CoreError::Diff(sonovis_diff::DiffError::NonFinite { .. }) => CoreError::Diverged {
                step: step + 1,
                loss: f64::NAN,
            },
            other => other,
        })?;
        if !out.loss.is_finite() {
            return Err(CoreError::Diverged {
                step: step + 1,
                loss: out.loss,
            });
        }
        adam.step(store, &out.grads).map_err(|e| match e {
            sonovis_diff::DiffError::NonFinite { .. } => CoreError::Diverged {
                step: step + 1,
                loss: out.loss,
            },
            other => other.into(),
        })?;
        store.apply_buffer_updates(out.updates)?;
        let done = state.record(out.loss, cfg);
        if !on_step(store, adam, state)? || done {
            return Ok(());
        }
    }
}

/// Writes a checkpoint whose `extra` metadata carries the model config, the
/// training state and the training config; `files` land in the same commit.
#[allow(clippy::too_many_arguments)]
pub fn save_run(
    dir: &Path,
    networks: BTreeMap<String, Vec<LayerSpec>>,
    store: &ParamStore<f32>,
    adam: Option<&AdamState<f32>>,
    state: &TrainState,
    train: &TrainConfig,
    mut extra: serde_json::Map<String, serde_json::Value>,
    files: &[(&str, Vec<u8>)],
) -> Result<()> {
    extra.insert("train_state".into(), serde_json::to_value(state)?);
    extra.insert("train_config".into(), serde_json::to_value(train)?);
    let meta = CheckpointMeta::new(networks, state.step, train.seed, serde_json::Value::Object(extra));
    Ok(save_checkpoint_with(dir, &meta, store, adam, files)?)
}

/// A checkpoint read back by [`load_run`].
pub struct LoadedRun {
    pub store: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub state: TrainState,
    pub train: TrainConfig,
    pub extra: serde_json::Value,
}

impl LoadedRun {
    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| CoreError::Incompatible(format!("checkpoint has no `{key}` record")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Moves the loaded values into `store` (built from the saved config)
    /// and re-indexes the optimizer state onto it.
    pub fn restore_into(self, store: &mut ParamStore<f32>, dir: &Path) -> Result<(Option<AdamState<f32>>, TrainState, TrainConfig)> {
        store.copy_values_from(&self.store).map_err(|e| {
            CoreError::Incompatible(format!("checkpoint {} does not match its config: {e}", dir.display()))
        })?;
        let adam = match &self.adam {
            Some(a) => Some(a.remap(&self.store, store)?),
            None => None,
        };
        Ok((adam, self.state, self.train))
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(CoreError::MissingFile(meta_path));
    }
    let ckpt = load_checkpoint(dir)?;
    let extra = ckpt.meta.extra;
    let get = |k: &str| extra.get(k).cloned().ok_or_else(|| CoreError::Incompatible(format!("checkpoint has no `{k}` record")));
    let state = serde_json::from_value(get("train_state")?)?;
    let train = serde_json::from_value(get("train_config")?)?;
    Ok(LoadedRun {
        store: ckpt.store,
        adam: ckpt.adam,
        state,
        train,
        extra,
    })
}
