//! Integrated Gradients over text-sets.
//!
//! Attributions are taken on the pre-sigmoid positive logit with a midpoint
//! Riemann sum along the straight path from a baseline (zero by default) to
//! the input. A post's score is the sum of its per-dimension attributions.

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, UserRecord};
use crate::error::{Error, Result};
use crate::model::{logit_input_grad, SetClassifier, TextSet};
use crate::parallel::Executor;
use crate::sim::RiskModel;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 64;

/// A scalar function of an embedding matrix with a gradient.
pub trait Differentiable: Sync {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

impl Differentiable for SetClassifier {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        logit_input_grad(x, &self.params, &self.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub user_id: String,
    pub post_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// `|Σ scores − (F(x) − F(baseline))|`
    pub completeness_gap: f64,
    pub steps_used: usize,
    pub f_x: f64,
    pub f_baseline: f64,
}

impl AttributionResult {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// Gap relative to `|F(x) − F(baseline)|`.
    pub fn relative_gap(&self) -> f64 {
        self.completeness_gap / (self.f_x - self.f_baseline).abs()
    }

    /// Indices of posts by descending score, ties broken by post id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then_with(|| self.post_ids[a].cmp(&self.post_ids[b]))
        });
        idx
    }
}

/// Per-element IG along the path `baseline → x`.
pub fn integrated_gradients_matrix<F: Differentiable + ?Sized>(
    f: &F,
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    exec: &Executor,
) -> Result<(Tensor, f64, f64)> {
    if steps == 0 {
        return Err(Error::Contract("integrated gradients needs at least one step".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::dim("integrated_gradients", x.shape(), baseline.shape()));
    }
    let delta: Vec<f64> = x
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(a, b)| a - b)
        .collect();
    let grads = exec.map_range(steps, |k| {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = baseline
            .data()
            .iter()
            .zip(&delta)
            .map(|(b, d)| b + alpha * d)
            .collect();
        let point = Tensor::new(x.shape().to_vec(), point)?;
        f.value_and_grad(&point).map(|(_, g)| g)
    });
    // running mean in step order: exact when every step sees the same gradient
    let mut mean = vec![0.0; x.numel()];
    for (k, g) in grads.into_iter().enumerate() {
        let n = (k + 1) as f64;
        for (a, v) in mean.iter_mut().zip(g?.data()) {
            *a += (v - *a) / n;
        }
    }
    let ig: Vec<f64> = mean.iter().zip(&delta).map(|(a, d)| d * a).collect();
    let (f_x, _) = f.value_and_grad(x)?;
    let (f_b, _) = f.value_and_grad(baseline)?;
    Ok((Tensor::new(x.shape().to_vec(), ig)?, f_x, f_b))
}

/// Post-level IG of a text-set. `baseline = None` means the zero matrix.
pub fn integrated_gradients<F: Differentiable + ?Sized>(
    set: &TextSet,
    f: &F,
    steps: usize,
    baseline: Option<&Tensor>,
    exec: &Executor,
) -> Result<AttributionResult> {
    let zero;
    let baseline = match baseline {
        Some(b) => b,
        None => {
            zero = Tensor::zeros(set.embeddings.shape());
            &zero
        }
    };
    let (ig, f_x, f_baseline) = integrated_gradients_matrix(f, &set.embeddings, baseline, steps, exec)?;
    let cols = ig.cols();
    let scores: Vec<f64> = ig.data().chunks(cols).map(|r| r.iter().sum()).collect();
    let total: f64 = scores.iter().sum();
    Ok(AttributionResult {
        user_id: set.user_id.clone(),
        post_ids: set.post_ids.clone(),
        scores,
        completeness_gap: (total - (f_x - f_baseline)).abs(),
        steps_used: steps,
        f_x,
        f_baseline,
    })
}

/// A classifier whose post scores come from IG with a fixed step count.
pub struct IgScorer<'a> {
    model: &'a SetClassifier,
    steps: usize,
}

impl<'a> IgScorer<'a> {
    pub fn new(model: &'a SetClassifier, steps: usize) -> Self {
        IgScorer { model, steps }
    }
}

impl RiskModel for IgScorer<'_> {
    fn score(&self, set: &TextSet) -> Result<f64> {
        self.model.predict(set)
    }

    fn post_scores(&self, set: &TextSet) -> Result<Vec<f64>> {
        integrated_gradients(set, self.model, self.steps, None, &Executor::sequential()).map(|r| r.scores)
    }
}

/// Splits `n` items into `ceil(n / k)` contiguous chunks whose sizes differ
/// by at most one.
pub fn chunk_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = n.div_ceil(k);
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Scores every post in `ordered` (already in canonical order), one IG
/// evaluation per chunk of at most `k` posts.
pub fn score_history(
    model: &dyn RiskModel,
    store: &EmbeddingStore,
    user_id: &str,
    ordered: &[String],
    k: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(ordered.len());
    for (a, b) in chunk_bounds(ordered.len(), k) {
        let set = store.text_set(user_id, &ordered[a..b])?;
        scores.extend(model.post_scores(&set)?);
    }
    Ok(scores)
}

/// The `k` highest-attribution posts among `ordered` (chronological), kept in
/// chronological order. Returns everything when there are at most `k`.
pub fn select_top_k_from<S: AsRef<str>>(
    model: &dyn RiskModel,
    store: &EmbeddingStore,
    user_id: &str,
    ordered: &[S],
    k: usize,
) -> Result<TextSet> {
    if ordered.is_empty() {
        return Err(Error::Data(format!("user {user_id} has no posts to select from")));
    }
    let ids: Vec<String> = ordered.iter().map(|s| s.as_ref().to_string()).collect();
    if ids.len() <= k {
        return store.text_set(user_id, &ids);
    }
    let scores = score_history(model, store, user_id, &ids, k)?;
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    let chosen: Vec<&String> = keep.iter().map(|&i| &ids[i]).collect();
    store.text_set(user_id, &chosen)
}

/// Canonical post order: timestamp, then post id.
pub fn canonical_post_ids(user: &UserRecord) -> Vec<String> {
    let mut posts: Vec<(i64, &str)> = user
        .posts
        .iter()
        .map(|p| (p.timestamp, p.post_id.as_str()))
        .collect();
    posts.sort();
    posts.into_iter().map(|(_, id)| id.to_string()).collect()
}

pub fn select_top_k_posts(
    user: &UserRecord,
    store: &EmbeddingStore,
    model: &dyn RiskModel,
    k: usize,
) -> Result<TextSet> {
    select_top_k_from(model, store, &user.user_id, &canonical_post_ids(user), k)
}

/// One line of an attribution report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPost {
    pub user_id: String,
    pub post_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Scores a user's whole history (windowed) and ranks the posts.
pub fn rank_posts(
    user: &UserRecord,
    store: &EmbeddingStore,
    model: &dyn RiskModel,
    k: usize,
) -> Result<Vec<RankedPost>> {
    let ids = canonical_post_ids(user);
    let scores = score_history(model, store, &user.user_id, &ids, k)?;
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    Ok(idx
        .into_iter()
        .enumerate()
        .map(|(r, i)| RankedPost {
            user_id: user.user_id.clone(),
            post_id: ids[i].clone(),
            score: scores[i],
            rank: r + 1,
        })
        .collect())
}

/// Plain-text listing of a ranked report, optionally with post text.
pub fn render_report(ranked: &[RankedPost], user: Option<&UserRecord>) -> String {
    let mut out = String::new();
    if let Some(first) = ranked.first() {
        out.push_str(&format!("user {}\n", first.user_id));
    }
    for r in ranked {
        let text = user
            .and_then(|u| u.posts.iter().find(|p| p.post_id == r.post_id))
            .and_then(|p| p.text.as_deref())
            .unwrap_or("");
        out.push_str(&format!("{:>4}  {:>+10.5}  {}  {}\n", r.rank, r.score, r.post_id, text));
    }
    out
}
