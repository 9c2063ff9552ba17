//! Permutation-invariant set encoder and user-level classifier.
//!
//! A text-set of `K` post embeddings is projected to `d_model`, passed through
//! `n_layers` post-norm transformer encoder layers with no positional
//! information of any kind, mean-pooled over the `K` rows and mapped to a
//! single positive-class logit. Because no operation depends on row order,
//! the layers are row-permutation equivariant and the pooled output is
//! invariant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the incoming sentence embeddings.
    pub input_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Full-size configuration: 4 layers, 8 heads, width 256.
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            d_ff: 1024,
            dropout_rate: 0.1,
        }
    }

    /// Small configuration for tests and desk-scale experiments; `d_ff` is
    /// kept at four times the width.
    pub fn small(input_dim: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        ModelConfig {
            input_dim,
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("n_layers and n_heads must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Per-head key width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (i, d, f) = (self.input_dim, self.d_model, self.d_ff);
        let input = i * d + d;
        let attention = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let ff = (d * f + f) + (f * d + d);
        let head = d + 1;
        input + self.n_layers * (attention + norms + ff) + head
    }
}

/// Weights of one encoder layer. Per-head projections are fused into
/// `d_model x d_model` matrices; head `i` owns columns `i*d_k..(i+1)*d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_KEYS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "ff1_w", "ff1_b",
    "ff2_w", "ff2_b", "ln2_gamma", "ln2_beta",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub input_w: Tensor,
    pub input_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains. Each
    /// tensor draws from its own stream so the layout of one tensor never
    /// shifts the values of another.
    pub fn init(cfg: &ModelConfig, seed: SeedTree) -> Result<Self> {
        cfg.validate()?;
        let (i, d, f) = (cfg.input_dim, cfg.d_model, cfg.d_ff);
        let mut stream = 0u64;
        let mut xavier = |fan_in, fan_out| {
            stream += 1;
            Tensor::xavier_uniform(fan_in, fan_out, &mut seed.fork(stream).rng())
        };
        let input_w = xavier(i, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: xavier(d, d),
                bq: Tensor::zeros(&[d]),
                wk: xavier(d, d),
                bk: Tensor::zeros(&[d]),
                wv: xavier(d, d),
                bv: Tensor::zeros(&[d]),
                wo: xavier(d, d),
                bo: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                ff1_w: xavier(d, f),
                ff1_b: Tensor::zeros(&[f]),
                ff2_w: xavier(f, d),
                ff2_b: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = xavier(d, 1);
        Ok(ModelParams {
            input_w,
            input_b: Tensor::zeros(&[d]),
            layers,
            head_w,
            head_b: Tensor::zeros(&[1]),
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.w".to_string(), &self.input_w),
            ("input.b".to_string(), &self.input_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (key, t) in LAYER_KEYS.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{key}"), t));
            }
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_w, &mut self.input_b];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Rebuilds parameters from `(name, tensor)` pairs, checking every name
    /// and shape against the layout `cfg` implies.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ModelParams::init(cfg, SeedTree::new(0))?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((slot, (want_name, want_shape)), (name, tensor)) in
            params.tensors_mut().into_iter().zip(&expected).zip(named)
        {
            if &name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    tensor.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(params)
    }

    /// All parameters as one flat vector, in `named` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// The `K` embeddings sampled for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSet {
    pub user_id: String,
    pub embeddings: Tensor,
    pub post_ids: Vec<String>,
}

impl TextSet {
    pub fn new(user_id: impl Into<String>, embeddings: Tensor, post_ids: Vec<String>) -> Result<Self> {
        if embeddings.ndim() != 2 {
            return Err(Error::Contract(format!(
                "text-set embeddings must be a matrix, got shape {:?}",
                embeddings.shape()
            )));
        }
        if embeddings.rows() == 0 {
            return Err(Error::Data("text-set must hold at least one post".into()));
        }
        if embeddings.rows() != post_ids.len() {
            return Err(Error::Contract(format!(
                "{} embedding rows but {} post ids",
                embeddings.rows(),
                post_ids.len()
            )));
        }
        Ok(TextSet {
            user_id: user_id.into(),
            embeddings,
            post_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.post_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post_ids.is_empty()
    }

    /// Same posts, rows reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> TextSet {
        TextSet {
            user_id: self.user_id.clone(),
            embeddings: self.embeddings.select_rows(perm),
            post_ids: perm.iter().map(|&i| self.post_ids[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the given stream.
    Train(SeedTree),
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct LayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_gamma: Var,
    ln1_beta: Var,
    ff1_w: Var,
    ff1_b: Var,
    ff2_w: Var,
    ff2_b: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    input_w: Var,
    input_b: Var,
    layers: Vec<LayerVars>,
    head_w: Var,
    head_b: Var,
    all: Vec<Var>,
}

impl BoundParams {
    /// Tape handles in [`ModelParams::named`] order.
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// Places every parameter on `tape`, as gradient leaves when `trainable`.
pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> BoundParams {
    let mut all = Vec::new();
    let mut put = |tape: &mut Tape, t: &Tensor| {
        let v = if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        };
        all.push(v);
        v
    };
    let input_w = put(tape, &params.input_w);
    let input_b = put(tape, &params.input_b);
    let layers = params
        .layers
        .iter()
        .map(|l| LayerVars {
            wq: put(tape, &l.wq),
            bq: put(tape, &l.bq),
            wk: put(tape, &l.wk),
            bk: put(tape, &l.bk),
            wv: put(tape, &l.wv),
            bv: put(tape, &l.bv),
            wo: put(tape, &l.wo),
            bo: put(tape, &l.bo),
            ln1_gamma: put(tape, &l.ln1_gamma),
            ln1_beta: put(tape, &l.ln1_beta),
            ff1_w: put(tape, &l.ff1_w),
            ff1_b: put(tape, &l.ff1_b),
            ff2_w: put(tape, &l.ff2_w),
            ff2_b: put(tape, &l.ff2_b),
            ln2_gamma: put(tape, &l.ln2_gamma),
            ln2_beta: put(tape, &l.ln2_beta),
        })
        .collect();
    let head_w = put(tape, &params.head_w);
    let head_b = put(tape, &params.head_b);
    BoundParams {
        input_w,
        input_b,
        layers,
        head_w,
        head_b,
        all,
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

struct Dropout {
    rate: f64,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

impl Dropout {
    fn new(cfg: &ModelConfig, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train(seed) if cfg.dropout_rate > 0.0 => Some(seed.rng()),
            _ => None,
        };
        Dropout {
            rate: cfg.dropout_rate,
            rng,
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - self.rate);
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// Scaled dot-product self-attention with `n_heads` heads; queries, keys and
/// values are all `x`.
fn self_attention(tape: &mut Tape, x: Var, lv: &LayerVars, cfg: &ModelConfig) -> Result<Var> {
    let q = linear(tape, x, lv.wq, lv.bq)?;
    let k = linear(tape, x, lv.wk, lv.bk)?;
    let v = linear(tape, x, lv.wv, lv.bv)?;
    let dk = cfg.d_k();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let weights = tape.softmax_rows(scores, scale)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    linear(tape, concat, lv.wo, lv.bo)
}

fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    lv: &LayerVars,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<Var> {
    let attn = self_attention(tape, x, lv, cfg)?;
    let attn = dropout.apply(tape, attn)?;
    let res = tape.add(x, attn)?;
    let h = tape.layer_norm(res, lv.ln1_gamma, lv.ln1_beta, LAYER_NORM_EPS)?;

    let f = linear(tape, h, lv.ff1_w, lv.ff1_b)?;
    let f = tape.relu(f);
    let f = linear(tape, f, lv.ff2_w, lv.ff2_b)?;
    let f = dropout.apply(tape, f)?;
    let res = tape.add(h, f)?;
    tape.layer_norm(res, lv.ln2_gamma, lv.ln2_beta, LAYER_NORM_EPS)
}

fn check_input(tape: &Tape, x: Var, cfg: &ModelConfig) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::Config(format!(
            "text-set width {:?} does not match model input_dim {}",
            shape, cfg.input_dim
        )));
    }
    if shape[0] == 0 {
        return Err(Error::Data("empty text-set".into()));
    }
    Ok(())
}

/// Encoder stack followed by mean pooling: `[K x input_dim] -> [1 x d_model]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<Var> {
    check_input(tape, x, cfg)?;
    let mut dropout = Dropout::new(cfg, mode);
    let mut h = linear(tape, x, bound.input_w, bound.input_b)?;
    for lv in &bound.layers {
        h = encoder_layer(tape, h, lv, cfg, &mut dropout)?;
    }
    tape.mean_rows(h)
}

/// Positive-class logit, shape `[1 x 1]`.
pub fn logit_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<Var> {
    let pooled = encode_on_tape(tape, bound, x, cfg, mode)?;
    linear(tape, pooled, bound.head_w, bound.head_b)
}

/// One multi-head self-attention sublayer (no residual, no norm), for layer
/// `layer` of `params`.
pub fn multi_head_self_attention(
    x: &Tensor,
    params: &ModelParams,
    layer: usize,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.ndim() != 2 || x.cols() != cfg.d_model {
        return Err(Error::Config(format!(
            "attention input {:?} must have width d_model={}",
            x.shape(),
            cfg.d_model
        )));
    }
    let lp = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("no layer {layer}")))?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let put = |tape: &mut Tape, t: &Tensor| tape.constant(t.clone());
    let lv = LayerVars {
        wq: put(&mut tape, &lp.wq),
        bq: put(&mut tape, &lp.bq),
        wk: put(&mut tape, &lp.wk),
        bk: put(&mut tape, &lp.bk),
        wv: put(&mut tape, &lp.wv),
        bv: put(&mut tape, &lp.bv),
        wo: put(&mut tape, &lp.wo),
        bo: put(&mut tape, &lp.bo),
        ln1_gamma: put(&mut tape, &lp.ln1_gamma),
        ln1_beta: put(&mut tape, &lp.ln1_beta),
        ff1_w: put(&mut tape, &lp.ff1_w),
        ff1_b: put(&mut tape, &lp.ff1_b),
        ff2_w: put(&mut tape, &lp.ff2_w),
        ff2_b: put(&mut tape, &lp.ff2_b),
        ln2_gamma: put(&mut tape, &lp.ln2_gamma),
        ln2_beta: put(&mut tape, &lp.ln2_beta),
    };
    let out = self_attention(&mut tape, xv, &lv, cfg)?;
    Ok(tape.value(out).clone())
}

/// Pooled `d_model` representation of a text-set.
pub fn encode_set(set: &TextSet, params: &ModelParams, cfg: &ModelConfig, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let x = tape.constant(set.embeddings.clone());
    let pooled = encode_on_tape(&mut tape, &bound, x, cfg, mode)?;
    tape.value(pooled).clone().reshape(vec![cfg.d_model])
}

/// Positive-class logit of a raw `[K x input_dim]` embedding matrix, eval mode.
pub fn logit(embeddings: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let x = tape.constant(embeddings.clone());
    let z = logit_on_tape(&mut tape, &bound, x, cfg, Mode::Eval)?;
    tape.value(z).item()
}

/// Probability that the user belongs to the positive class (eval mode).
pub fn predict_user(set: &TextSet, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    let z = logit(&set.embeddings, params, cfg)?;
    Ok(sigmoid(z))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logit and its gradient with respect to the input embeddings.
pub fn logit_input_grad(
    embeddings: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let x = tape.leaf(embeddings.clone());
    let z = logit_on_tape(&mut tape, &bound, x, cfg, Mode::Eval)?;
    let zv = tape.value(z).item()?;
    let s = tape.sum(z);
    tape.backward(s)?;
    let g = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(embeddings.shape()));
    Ok((zv, g))
}

/// Class-weighted BCE of one text-set and the gradient of every parameter,
/// in [`ModelParams::named`] order.
pub fn loss_and_grads(
    set: &TextSet,
    target: f64,
    weight: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let x = tape.constant(set.embeddings.clone());
    let z = logit_on_tape(&mut tape, &bound, x, cfg, mode)?;
    let loss = tape.bce_with_logits(z, target, weight)?;
    let lv = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    Ok((lv, grads))
}

/// A trained classifier: configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SetClassifier {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl SetClassifier {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        SetClassifier { config, params }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, SeedTree::new(seed).fork(crate::rng::label::INIT))?;
        Ok(SetClassifier { config, params })
    }

    pub fn predict(&self, set: &TextSet) -> Result<f64> {
        predict_user(set, &self.params, &self.config)
    }

    pub fn logit(&self, embeddings: &Tensor) -> Result<f64> {
        logit(embeddings, &self.params, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = SeedTree::new(seed).rng();
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn small() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::small(6, 8, 2, 2);
        let params = ModelParams::init(&cfg, SeedTree::new(3)).unwrap();
        (cfg, params)
    }

    fn set_of(x: Tensor) -> TextSet {
        let ids = (0..x.rows()).map(|i| format!("p{i}")).collect();
        TextSet::new("u", x, ids).unwrap()
    }

    #[test]
    fn param_count_hand_count_reduced_config() {
        // input 8x16+16 = 144; per layer: 4*(256+16) + 4*16 + (16*64+64) + (64*16+16)
        // = 1088 + 64 + 1088 + 1040 = 3280; head 16+1 = 17.
        let cfg = ModelConfig {
            input_dim: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            dropout_rate: 0.0,
        };
        assert_eq!(cfg.param_count(), 144 + 3280 + 17);
        let params = ModelParams::init(&cfg, SeedTree::new(0)).unwrap();
        assert_eq!(params.param_count(), 3441);
    }

    #[test]
    fn param_count_full_config() {
        let cfg = ModelConfig::new(768);
        let params = ModelParams::init(&cfg, SeedTree::new(0)).unwrap();
        assert_eq!(params.param_count(), cfg.param_count());
        assert!(params.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::small(4, 10, 1, 3);
        assert!(cfg.validate().is_err());
        cfg.n_heads = 2;
        assert!(cfg.validate().is_ok());
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout_rate = 0.0;
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_single_row_is_value_path() {
        let (cfg, params) = small();
        let x = random_matrix(1, cfg.d_model, 11);
        let out = multi_head_self_attention(&x, &params, 0, &cfg).unwrap();
        let l = &params.layers[0];
        // softmax over one key is 1, so each head returns its value slice
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(l.wv.clone());
        let bv = t.constant(l.bv.clone());
        let wo = t.constant(l.wo.clone());
        let bo = t.constant(l.bo.clone());
        let v = linear(&mut t, xv, wv, bv).unwrap();
        let o = linear(&mut t, v, wo, bo).unwrap();
        assert!(out.max_abs_diff(t.value(o)) < 1e-12);
    }

    #[test]
    fn attention_is_row_equivariant() {
        let (cfg, params) = small();
        let x = random_matrix(7, cfg.d_model, 5);
        let out = multi_head_self_attention(&x, &params, 1, &cfg).unwrap();
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut SeedTree::new(9).rng());
        let out_p = multi_head_self_attention(&x.select_rows(&perm), &params, 1, &cfg).unwrap();
        assert!(out.select_rows(&perm).max_abs_diff(&out_p) < 1e-9);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let (cfg, params) = small();
        let row = random_matrix(1, cfg.d_model, 2);
        let x = Tensor::from_rows(&[row.row(0), row.row(0)]).unwrap();
        let out = multi_head_self_attention(&x, &params, 0, &cfg).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn encode_single_row_set() {
        let (cfg, params) = small();
        let set = set_of(random_matrix(1, cfg.input_dim, 8));
        let pooled = encode_set(&set, &params, &cfg, Mode::Eval).unwrap();
        assert_eq!(pooled.shape(), &[cfg.d_model]);
        assert!(pooled.is_finite());
    }

    #[test]
    fn encode_invariant_to_duplication() {
        let (cfg, params) = small();
        let x = random_matrix(5, cfg.input_dim, 4);
        let doubled = x.select_rows(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        let a = encode_set(&set_of(x), &params, &cfg, Mode::Eval).unwrap();
        let b = encode_set(&set_of(doubled), &params, &cfg, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (cfg, params) = small();
        let set = set_of(random_matrix(3, cfg.input_dim + 1, 1));
        assert!(matches!(
            predict_user(&set, &params, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (cfg, mut params) = small();
        params.head_w = Tensor::zeros(&[cfg.d_model, 1]);
        params.head_b = Tensor::zeros(&[1]);
        let set = set_of(random_matrix(4, cfg.input_dim, 1));
        assert_eq!(predict_user(&set, &params, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let (mut cfg, params) = small();
        cfg.dropout_rate = 0.5;
        let set = set_of(random_matrix(4, cfg.input_dim, 1));
        let e1 = encode_set(&set, &params, &cfg, Mode::Eval).unwrap();
        let e2 = encode_set(&set, &params, &cfg, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let t1 = encode_set(&set, &params, &cfg, Mode::Train(SeedTree::new(1))).unwrap();
        let t1b = encode_set(&set, &params, &cfg, Mode::Train(SeedTree::new(1))).unwrap();
        let t2 = encode_set(&set, &params, &cfg, Mode::Train(SeedTree::new(2))).unwrap();
        assert_eq!(t1, t1b);
        assert_ne!(t1, t2);
        assert_ne!(t1, e1);
    }

    #[test]
    fn from_named_round_trip_and_rejects_bad_shapes() {
        let (cfg, params) = small();
        let named: Vec<(String, Tensor)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ModelParams::from_named(&cfg, named.clone()).unwrap(), params);
        let mut bad = named;
        bad[0].1 = Tensor::zeros(&[1, 1]);
        assert!(ModelParams::from_named(&cfg, bad).is_err());
    }
}
