//! Training recipe: per-user text-set sampling, class-weighted BCE, AdamW
//! with a triangular cyclical learning rate, and gradient accumulation over
//! an effective batch of users.
//!
//! All randomness is drawn from streams keyed by `(purpose, epoch, user)`, so
//! a run is reproducible bit-for-bit regardless of worker count, and a run
//! resumed from a saved [`TrainingState`] continues exactly as an
//! uninterrupted one would.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{prefixed, Container};
use crate::corpus::{EmbeddingStore, Label, UserRecord};
use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::model::{loss_and_grads, ModelConfig, ModelParams, Mode, SetClassifier, TextSet};
use crate::parallel::Executor;
use crate::rng::{label, SeedTree};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Probability threshold used for validation F1.
pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        positive: 1.0,
        negative: 1.0,
    };

    pub fn for_target(&self, target: f64) -> f64 {
        if target >= 0.5 {
            self.positive
        } else {
            self.negative
        }
    }
}

/// Balanced weights `w_c = (n_pos + n_neg) / (2 n_c)`.
pub fn class_weights(n_pos: usize, n_neg: usize) -> Result<ClassWeights> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(format!(
            "balanced class weights need both classes (positive={n_pos}, negative={n_neg})"
        )));
    }
    let total = (n_pos + n_neg) as f64;
    Ok(ClassWeights {
        positive: total / (2.0 * n_pos as f64),
        negative: total / (2.0 * n_neg as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Texts sampled per user.
    pub k: usize,
    pub epochs: usize,
    /// Users whose gradients are averaged before each optimizer step.
    pub effective_batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Length of one full triangular cycle, in epochs.
    pub cycle_epochs: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fixed weights; balanced weights from the training split when `None`.
    #[serde(default)]
    pub class_weights: Option<ClassWeights>,
    /// Share of labelled users held out (stratified) for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 16,
            epochs: 120,
            effective_batch_size: 128,
            lr_min: 1e-5,
            lr_max: 1e-4,
            cycle_epochs: 6.0,
            weight_decay: 0.01,
            seed: 0,
            class_weights: None,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.lr_min < self.lr_max) || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.cycle_epochs > 0.0) {
            return Err(Error::Config("cycle_epochs must be > 0".into()));
        }
        if self.effective_batch_size == 0 {
            return Err(Error::Config("effective_batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Indices of the posts making up one text-set: `k` distinct posts drawn
/// uniformly without replacement, or all posts when the user has fewer.
/// Returned in chronological order.
pub fn sample_post_indices<R: Rng + ?Sized>(
    user: &UserRecord,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = user.posts.len();
    if n == 0 {
        return Err(Error::Data(format!("user {} has no posts", user.user_id)));
    }
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if n <= k {
        return Ok((0..n).collect());
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_text_set<R: Rng + ?Sized>(
    user: &UserRecord,
    store: &EmbeddingStore,
    k: usize,
    rng: &mut R,
) -> Result<TextSet> {
    let idx = sample_post_indices(user, k, rng)?;
    let ids: Vec<&str> = idx.iter().map(|&i| user.posts[i].post_id.as_str()).collect();
    store.text_set(&user.user_id, &ids)
}

/// Triangular cyclical schedule: linear rise from `lr_min` to `lr_max` over
/// the first half of each cycle, linear fall back over the second half.
pub fn cyclical_lr(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let cycle = cfg.cycle_epochs * steps_per_epoch.max(1) as f64;
    let half = cycle / 2.0;
    let pos = (step as f64) % cycle;
    let frac = if pos <= half {
        pos / half
    } else {
        (cycle - pos) / half
    };
    let lr = cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac;
    lr.clamp(cfg.lr_min, cfg.lr_max)
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() {
        return Err(Error::Contract(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            names.len()
        )));
    }
    for (name, g) in names.iter().zip(grads) {
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {name} at flat index {pos}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape() != g.shape() {
            return Err(Error::dim("adamw_step", p.shape(), g.shape()));
        }
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *pv);
        }
    }
    Ok(())
}

/// Stratified split of labelled users into `(train, validation)` corpus
/// indices. Unlabelled users are left out of both.
pub fn stratified_split(users: &[UserRecord], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, class) in [Label::Positive, Label::Negative].into_iter().enumerate() {
        let mut idx: Vec<usize> = users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.label == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut SeedTree::new(seed).path(&[label::SPLIT, c as u64]).rng());
        let n_val = (val_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Visiting order of the training users in `epoch`.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut SeedTree::new(seed).path(&[label::SHUFFLE, epoch as u64]).rng());
    order
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: f64,
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
    pub global_step: usize,
    pub best_params: ModelParams,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub log: Vec<LogRecord>,
}

impl TrainingState {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self> {
        model_config.validate()?;
        train_config.validate()?;
        let params = ModelParams::init(
            &model_config,
            SeedTree::new(train_config.seed).fork(label::INIT),
        )?;
        Ok(TrainingState {
            optimizer: OptimizerState::new(&params),
            best_params: params.clone(),
            params,
            model_config,
            train_config,
            epochs_done: 0,
            global_step: 0,
            best_val_f1: f64::NEG_INFINITY,
            best_epoch: 0,
            log: Vec::new(),
        })
    }

    /// Model with the best validation F1 so far (initial weights before any
    /// epoch has run).
    pub fn best_model(&self) -> SetClassifier {
        SetClassifier::new(self.model_config.clone(), self.best_params.clone())
    }

    pub fn final_model(&self) -> SetClassifier {
        SetClassifier::new(self.model_config.clone(), self.params.clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "kind": "training-state",
            "config": to_json(&self.model_config)?,
            "train_config": to_json(&self.train_config)?,
            "epochs_done": self.epochs_done,
            "global_step": self.global_step,
            "optimizer_step": self.optimizer.step,
            // stored as raw bits so -inf and every f64 survive exactly
            "best_val_f1_bits": self.best_val_f1.to_bits(),
            "best_epoch": self.best_epoch,
            "log": to_json(&self.log)?,
        });
        let mut tensors = prefixed("param/", &self.params);
        tensors.extend(prefixed("best/", &self.best_params));
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (n, (m, v)) in names.iter().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            tensors.push((format!("adam_m/{n}"), m.clone()));
            tensors.push((format!("adam_v/{n}"), v.clone()));
        }
        Ok(Container { meta, tensors })
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let get = |key: &str| {
            c.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Data(format!("training state is missing {key}")))
        };
        let model_config: ModelConfig = serde_json::from_value(get("config")?)
            .map_err(|e| Error::Data(e.to_string()))?;
        let train_config: TrainConfig = serde_json::from_value(get("train_config")?)
            .map_err(|e| Error::Data(e.to_string()))?;
        let num = |v: serde_json::Value, key: &str| {
            v.as_u64()
                .ok_or_else(|| Error::Data(format!("training state field {key} is not an integer")))
        };
        let epochs_done = num(get("epochs_done")?, "epochs_done")? as usize;
        let global_step = num(get("global_step")?, "global_step")? as usize;
        let optimizer_step = num(get("optimizer_step")?, "optimizer_step")?;
        let best_val_f1 = f64::from_bits(num(get("best_val_f1_bits")?, "best_val_f1_bits")?);
        let best_epoch = num(get("best_epoch")?, "best_epoch")? as usize;
        let log: Vec<LogRecord> =
            serde_json::from_value(get("log")?).map_err(|e| Error::Data(e.to_string()))?;

        let params = ModelParams::from_named(&model_config, c.take_prefixed("param/"))?;
        let best_params = ModelParams::from_named(&model_config, c.take_prefixed("best/"))?;
        let m = ModelParams::from_named(&model_config, c.take_prefixed("adam_m/"))?;
        let v = ModelParams::from_named(&model_config, c.take_prefixed("adam_v/"))?;
        let optimizer = OptimizerState {
            m: m.tensors().into_iter().cloned().collect(),
            v: v.tensors().into_iter().cloned().collect(),
            step: optimizer_step,
        };
        Ok(TrainingState {
            model_config,
            train_config,
            params,
            optimizer,
            epochs_done,
            global_step,
            best_params,
            best_val_f1,
            best_epoch,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainingState::from_container(Container::read(path)?)
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Data(e.to_string()))
}

/// Labelled training data and its fixed train/validation split.
pub struct TrainData<'a> {
    pub users: &'a [UserRecord],
    pub store: &'a EmbeddingStore,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub weights: ClassWeights,
}

impl<'a> TrainData<'a> {
    pub fn new(users: &'a [UserRecord], store: &'a EmbeddingStore, cfg: &TrainConfig) -> Result<Self> {
        let (train, val) = stratified_split(users, cfg.val_fraction, cfg.seed);
        let count = |class: Label| train.iter().filter(|&&i| users[i].label == class).count();
        let (n_pos, n_neg) = (count(Label::Positive), count(Label::Negative));
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::Data(format!(
                "training split needs both classes (positive={n_pos}, negative={n_neg})"
            )));
        }
        let weights = match cfg.class_weights {
            Some(w) => w,
            None => class_weights(n_pos, n_neg)?,
        };
        if let Some(missing) = users
            .iter()
            .filter(|u| u.label != Label::Unknown)
            .flat_map(|u| u.post_ids())
            .find(|id| store.get(id).is_none())
        {
            return Err(Error::Data(format!("post {missing} missing from embedding store")));
        }
        if store.dimension() == 0 {
            return Err(Error::Data("embedding store has zero dimension".into()));
        }
        Ok(TrainData {
            users,
            store,
            train,
            val,
            weights,
        })
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.train.len().div_ceil(batch)
    }

    /// Fixed validation text-set of corpus user `i` (same in every epoch).
    pub fn validation_set(&self, i: usize, k: usize, seed: u64) -> Result<TextSet> {
        let mut rng = SeedTree::new(seed).path(&[label::VALIDATION, i as u64]).rng();
        sample_text_set(&self.users[i], self.store, k, &mut rng)
    }
}

/// Validation F1 at [`VALIDATION_THRESHOLD`].
pub fn validation_f1(
    data: &TrainData<'_>,
    model: &SetClassifier,
    k: usize,
    seed: u64,
    exec: &Executor,
) -> Result<f64> {
    let preds = exec.try_map(&data.val, |&i| {
        let set = data.validation_set(i, k, seed)?;
        model.predict(&set)
    })?;
    let mut conf = Confusion::default();
    for (&i, p) in data.val.iter().zip(preds) {
        conf.add(p >= VALIDATION_THRESHOLD, data.users[i].label.is_positive());
    }
    Ok(conf.f1())
}

/// Element-wise mean of per-user gradients, summed in the given order.
pub fn mean_gradients(per_user: &[Vec<Tensor>]) -> Vec<Tensor> {
    let n = per_user.len() as f64;
    let mut acc: Vec<Tensor> = per_user[0].iter().map(|t| Tensor::zeros(t.shape())).collect();
    for grads in per_user {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= n;
        }
    }
    acc
}

/// Runs `epochs` more epochs on `state`.
pub fn train_epochs(
    state: &mut TrainingState,
    data: &TrainData<'_>,
    epochs: usize,
    exec: &Executor,
) -> Result<()> {
    let cfg = state.train_config.clone();
    let mcfg = state.model_config.clone();
    if mcfg.input_dim != data.store.dimension() {
        return Err(Error::Config(format!(
            "model input_dim {} does not match embedding dimension {}",
            mcfg.input_dim,
            data.store.dimension()
        )));
    }
    let steps_per_epoch = data.steps_per_epoch(cfg.effective_batch_size);
    let root = SeedTree::new(cfg.seed);

    for _ in 0..epochs {
        let epoch = state.epochs_done;
        let order = epoch_order(&data.train, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_min;
        for window in order.chunks(cfg.effective_batch_size) {
            let params = &state.params;
            let results = exec.try_map(window, |&i| {
                let user = &data.users[i];
                let target = user.label.target().expect("training users are labelled");
                let mut rng = root.path(&[label::SAMPLE, epoch as u64, i as u64]).rng();
                let set = sample_text_set(user, data.store, cfg.k, &mut rng)?;
                let dropout = root.path(&[label::DROPOUT, epoch as u64, i as u64]);
                loss_and_grads(
                    &set,
                    target,
                    data.weights.for_target(target),
                    params,
                    &mcfg,
                    Mode::Train(dropout),
                )
            })?;
            let window_loss: f64 = results.iter().map(|(l, _)| l).sum();
            let grads: Vec<Vec<Tensor>> = results.into_iter().map(|(_, g)| g).collect();
            let mean = mean_gradients(&grads);
            let diverged = !window_loss.is_finite() || mean.iter().any(|t| !t.is_finite());
            if diverged {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step: state.global_step,
                    reason: format!("non-finite loss or gradient (window loss {window_loss})"),
                    last_good: Box::new(state.params.clone()),
                });
            }
            loss_sum += window_loss;
            lr = cyclical_lr(state.global_step, steps_per_epoch, &cfg);
            adamw_step(&mut state.params, &mean, &mut state.optimizer, lr, cfg.weight_decay)?;
            state.global_step += 1;
        }
        if !state.params.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                step: state.global_step,
                reason: "parameters became non-finite".into(),
                last_good: Box::new(state.best_params.clone()),
            });
        }
        let model = SetClassifier::new(mcfg.clone(), state.params.clone());
        let val_f1 = if data.val.is_empty() {
            0.0
        } else {
            validation_f1(data, &model, cfg.k, cfg.seed, exec)?
        };
        state.epochs_done += 1;
        if val_f1 > state.best_val_f1 {
            state.best_val_f1 = val_f1;
            state.best_params = state.params.clone();
            state.best_epoch = state.epochs_done;
        }
        let record = LogRecord {
            epoch: state.epochs_done,
            step: state.global_step,
            lr,
            train_loss: loss_sum / order.len().max(1) as f64,
            val_f1,
        };
        log::info!(
            "epoch {:>3} step {:>6} lr {:.2e} loss {:.5} val_f1 {:.4}",
            record.epoch,
            record.step,
            record.lr,
            record.train_loss,
            record.val_f1
        );
        state.log.push(record);
    }
    Ok(())
}

/// Full run: fresh state, `train_config.epochs` epochs.
pub fn train(
    users: &[UserRecord],
    store: &EmbeddingStore,
    model_config: ModelConfig,
    train_config: TrainConfig,
    exec: &Executor,
) -> Result<TrainingState> {
    let mut state = TrainingState::new(model_config, train_config)?;
    let data = TrainData::new(users, store, &state.train_config)?;
    let epochs = state.train_config.epochs;
    train_epochs(&mut state, &data, epochs, exec)?;
    Ok(state)
}
