//! Independent oracles shared by the integration and acceptance tests. None
//! of these call into the library code they are used to check.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use setrisk_core::corpus::{Label, SyntheticCorpus};
use setrisk_core::sim::DecisionEvent;
use setrisk_core::training::sample_text_set;
use setrisk_core::{SeedTree, SetClassifier, Tensor, TextSet};

pub fn gaussian(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_set(n: usize, d: usize, seed: u64) -> TextSet {
    let x = gaussian(&[n, d], 1.0, &mut SeedTree::new(seed).rng());
    TextSet::new("u", x, (0..n).map(|i| format!("p{i:03}")).collect()).unwrap()
}

/// Adds `N(0, std²)` noise to every bias and layer-norm shift, so that the
/// model is not positively homogeneous in its input.
pub fn perturb_biases(model: &mut SetClassifier, std: f64, seed: u64) {
    let mut rng = SeedTree::new(seed).rng();
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.params.tensors_mut()) {
        let last = name.rsplit('.').next().unwrap();
        let is_bias = last == "b" || last.ends_with("_b") || last.ends_with("beta") || last.starts_with('b');
        if is_bias {
            for v in t.data_mut() {
                *v += std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
        }
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`. The floor keeps gradients that are
/// zero in exact arithmetic from comparing round-off against round-off.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a.data()).max(norm(b.data())).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub erde_5: f64,
    pub erde_50: f64,
    pub latency_tp: Option<f64>,
    pub speed: Option<f64>,
    pub latency_weighted_f1: f64,
    /// `(round, P@10, NDCG@10, NDCG@100)`
    pub ranking: Vec<(usize, f64, f64, f64)>,
}

/// Metrics by direct enumeration: every user's event history is replayed on
/// its own, and every user's rank is counted pairwise.
pub fn brute_force_metrics(
    events: &[DecisionEvent],
    labels: &HashMap<String, Label>,
    c_fp: Option<f64>,
    p: f64,
    rounds: &[usize],
) -> BruteMetrics {
    let mut history: BTreeMap<&str, Vec<&DecisionEvent>> = BTreeMap::new();
    for e in events {
        history.entry(&e.user_id).or_default().push(e);
    }
    let n = history.len() as f64;
    let positive = |u: &str| labels[u] == Label::Positive;
    let n_pos = history.keys().filter(|u| positive(u)).count() as f64;
    let c_fp = c_fp.unwrap_or(n_pos / n);

    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    let (mut cost5, mut cost50) = (0.0, 0.0);
    let mut tp_ks = Vec::new();
    for (u, evs) in &history {
        let mut evs = evs.clone();
        evs.sort_by_key(|e| e.round);
        let fired = evs.iter().find(|e| e.decision == 1);
        let pos = positive(u);
        match (fired, pos) {
            (Some(e), true) => {
                tp += 1.0;
                let k = e.round as f64;
                tp_ks.push(k);
                cost5 += 1.0 - 1.0 / (1.0 + (k - 5.0).exp());
                cost50 += 1.0 - 1.0 / (1.0 + (k - 50.0).exp());
            }
            (Some(_), false) => {
                fp += 1.0;
                cost5 += c_fp;
                cost50 += c_fp;
            }
            (None, true) => {
                fneg += 1.0;
                cost5 += 1.0;
                cost50 += 1.0;
            }
            (None, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    tp_ks.sort_by(f64::total_cmp);
    let latency_tp = match tp_ks.len() {
        0 => None,
        m if m % 2 == 1 => Some(tp_ks[m / 2]),
        m => Some((tp_ks[m / 2 - 1] + tp_ks[m / 2]) / 2.0),
    };
    let speed = latency_tp.map(|l| 1.0 - (-1.0 + 2.0 / (1.0 + (-p * (l - 1.0)).exp())));

    let mut ranking = Vec::new();
    for &r in rounds {
        let mut latest: Vec<(&str, f64)> = Vec::new();
        for (u, evs) in &history {
            if let Some(e) = evs.iter().filter(|e| e.round <= r).max_by_key(|e| e.round) {
                latest.push((u, e.score));
            }
        }
        if latest.is_empty() {
            continue;
        }
        let rank_of = |u: &str, s: f64| {
            1 + latest
                .iter()
                .filter(|(v, t)| *t > s || (*t == s && *v < u))
                .count()
        };
        let relevant = latest.iter().filter(|(u, _)| positive(u)).count();
        let avail = latest.len();
        let mut p10 = 0.0;
        let mut dcg10 = 0.0;
        let mut dcg100 = 0.0;
        for &(u, s) in &latest {
            let rank = rank_of(u, s);
            if positive(u) {
                let disc = 1.0 / ((rank + 1) as f64).log2();
                if rank <= 10 {
                    p10 += 1.0;
                    dcg10 += disc;
                }
                if rank <= 100 {
                    dcg100 += disc;
                }
            }
        }
        let idcg = |k: usize| (1..=relevant.min(k).min(avail)).map(|i| 1.0 / ((i + 1) as f64).log2()).sum::<f64>();
        let ndcg = |dcg: f64, k: usize| if idcg(k) > 0.0 { dcg / idcg(k) } else { 0.0 };
        ranking.push((r, p10 / 10f64.min(avail as f64), ndcg(dcg10, 10), ndcg(dcg100, 100)));
    }
    BruteMetrics {
        precision,
        recall,
        f1,
        erde_5: cost5 / n,
        erde_50: cost50 / n,
        latency_tp,
        speed,
        latency_weighted_f1: f1 * speed.unwrap_or(0.0),
        ranking,
    }
}

/// A random decision log that follows the streaming rules: each user reports
/// once per round until it fires (then keeps reporting 1 with a frozen
/// score until the run ends) or runs out of posts. Scores come from a small
/// grid, so ties occur.
pub fn toy_log(n_users: usize, seed: u64) -> (Vec<DecisionEvent>, HashMap<String, Label>) {
    let mut rng = SeedTree::new(seed).rng();
    let mut labels = HashMap::new();
    let mut plans = Vec::new();
    for i in 0..n_users {
        let user = format!("t{i:02}");
        let pos = rng.random_bool(0.4);
        labels.insert(user.clone(), if pos { Label::Positive } else { Label::Negative });
        let posts = rng.random_range(1..=120usize);
        let fire = if rng.random_bool(if pos { 0.7 } else { 0.25 }) {
            Some(rng.random_range(1..=posts))
        } else {
            None
        };
        plans.push((user, posts, fire));
    }
    let last_round = plans.iter().map(|(_, posts, fire)| fire.unwrap_or(*posts)).max().unwrap_or(0);
    let mut events = Vec::new();
    let mut frozen: HashMap<String, f64> = HashMap::new();
    for round in 1..=last_round {
        for (user, posts, fire) in &plans {
            if let Some(&s) = frozen.get(user) {
                events.push(DecisionEvent { round, user_id: user.clone(), decision: 1, score: s });
                continue;
            }
            if round > *posts {
                continue;
            }
            if *fire == Some(round) {
                let s = rng.random_range(18..=20) as f64 / 20.0;
                frozen.insert(user.clone(), s);
                events.push(DecisionEvent { round, user_id: user.clone(), decision: 1, score: s });
            } else {
                let s = rng.random_range(0..=17) as f64 / 20.0;
                events.push(DecisionEvent { round, user_id: user.clone(), decision: 0, score: s });
            }
        }
    }
    (events, labels)
}

/// F1 of the closed-form linear discriminant on set means: project onto the
/// planted direction and threshold halfway between "no signal post" and
/// "one signal post" in a `k`-post set.
pub fn linear_probe_f1(corpus: &SyntheticCorpus, k: usize, seed: u64) -> f64 {
    let u = &corpus.metadata.signal_direction;
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (i, user) in corpus.users.iter().enumerate() {
        let set = sample_text_set(user, &corpus.store, k, &mut SeedTree::new(seed).fork(i as u64).rng()).unwrap();
        let cols = set.embeddings.cols();
        let rows = set.embeddings.rows() as f64;
        let z: f64 = set
            .embeddings
            .data()
            .chunks(cols)
            .map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / rows;
        let predicted = z > 0.5 / rows;
        match (predicted, user.label == Label::Positive) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    2.0 * tp / (2.0 * tp + fp + fneg)
}
