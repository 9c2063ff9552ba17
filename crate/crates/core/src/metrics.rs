//! Decision-based and ranking-based evaluation of early-risk runs.
//!
//! Decision-based: precision, recall, F1, ERDE at two latency knees, median
//! true-positive latency, speed and latency-weighted F1. Ranking-based: P@10
//! and NDCG@{10,100} over users ranked by their risk score at fixed rounds.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::sim::{final_decisions, scores_at_round, DecisionEvent, FinalDecision};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Cost constants for ERDE and the latency penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    /// False-positive cost; the share of positive users when `None`.
    #[serde(default)]
    pub c_fp: Option<f64>,
    pub c_fn: f64,
    pub c_tp: f64,
    /// Slope of the latency penalty sigmoid.
    pub latency_p: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            c_fp: None,
            c_fn: 1.0,
            c_tp: 1.0,
            latency_p: 0.0078,
        }
    }
}

impl CostConfig {
    pub fn resolved_c_fp(&self, n_pos: usize, n_total: usize) -> f64 {
        self.c_fp.unwrap_or_else(|| ratio(n_pos, n_total))
    }
}

/// Latency cost factor `lc_o(k) = 1 - 1 / (1 + e^{k - o})`.
pub fn latency_cost(k: f64, o: f64) -> f64 {
    // 1 - 1/(1+e^x) == 1/(1+e^{-x}), which stays accurate for large |x|
    1.0 / (1.0 + (o - k).exp())
}

fn gold<'a>(labels: &'a HashMap<String, Label>, user: &str) -> Result<&'a Label> {
    let l = labels
        .get(user)
        .ok_or_else(|| Error::Data(format!("no gold label for user {user}")))?;
    if *l == Label::Unknown {
        return Err(Error::Data(format!("user {user} has an unknown gold label")));
    }
    Ok(l)
}

/// Early risk detection error: mean per-user cost where a false positive
/// costs `c_fp`, a false negative `c_fn`, a true positive decided after `k`
/// posts `lc_o(k) * c_tp` and a true negative nothing.
pub fn erde(
    decisions: &[FinalDecision],
    labels: &HashMap<String, Label>,
    o: f64,
    c_fp: f64,
    c_fn: f64,
    c_tp: f64,
) -> Result<f64> {
    if decisions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for d in decisions {
        let positive = gold(labels, &d.user_id)?.is_positive();
        total += match (d.decision, positive) {
            (true, false) => c_fp,
            (false, true) => c_fn,
            (true, true) => latency_cost(d.k as f64, o) * c_tp,
            (false, false) => 0.0,
        };
    }
    Ok(total / decisions.len() as f64)
}

/// Penalty `-1 + 2 / (1 + e^{-p (k - 1)})`; 0 at `k = 1`.
pub fn latency_penalty(k: f64, p: f64) -> f64 {
    -1.0 + 2.0 / (1.0 + (-p * (k - 1.0)).exp())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySpeed {
    /// Median posts seen before a true-positive decision; `None` without TPs.
    pub latency_tp: Option<f64>,
    pub speed: Option<f64>,
}

pub fn latency_and_speed(
    decisions: &[FinalDecision],
    labels: &HashMap<String, Label>,
    p: f64,
) -> Result<LatencySpeed> {
    let mut ks = Vec::new();
    for d in decisions {
        if d.decision && gold(labels, &d.user_id)?.is_positive() {
            ks.push(d.k as f64);
        }
    }
    let latency_tp = median(&mut ks);
    Ok(LatencySpeed {
        latency_tp,
        speed: latency_tp.map(|l| 1.0 - latency_penalty(l, p)),
    })
}

pub fn latency_weighted_f1(f1: f64, speed: f64) -> f64 {
    f1 * speed
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingScores {
    pub p_at_10: f64,
    pub ndcg_at_10: f64,
    pub ndcg_at_100: f64,
    /// Fewer users than the largest cutoff; metrics use the available prefix.
    pub truncated: bool,
}

/// Users ordered by descending score, ties by user id.
pub fn rank_users(scores: &[(String, f64)]) -> Vec<&(String, f64)> {
    let mut ranked: Vec<&(String, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Precision of the first `k` entries of a ranked relevance list. Divides by
/// the prefix length actually available.
pub fn precision_at(relevance: &[bool], k: usize) -> f64 {
    let n = k.min(relevance.len());
    ratio(relevance[..n].iter().filter(|&&r| r).count(), n)
}

/// Binary-gain NDCG with `log2(rank + 1)` discounts. 0 when the list holds
/// no relevant item.
pub fn ndcg_at(relevance: &[bool], k: usize) -> f64 {
    let dcg = |rel: &mut dyn Iterator<Item = bool>| -> f64 {
        rel.take(k)
            .enumerate()
            .filter(|(_, r)| *r)
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    let idcg = dcg(&mut ideal.into_iter());
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(&mut relevance.iter().copied()) / idcg
}

pub fn ranking_metrics(scores: &[(String, f64)], labels: &HashMap<String, Label>) -> Result<RankingScores> {
    let ranked = rank_users(scores);
    let relevance = ranked
        .iter()
        .map(|(u, _)| gold(labels, u).map(|l| l.is_positive()))
        .collect::<Result<Vec<bool>>>()?;
    Ok(RankingScores {
        p_at_10: precision_at(&relevance, 10),
        ndcg_at_10: ndcg_at(&relevance, 10),
        ndcg_at_100: ndcg_at(&relevance, 100),
        truncated: relevance.len() < 100,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingAt {
    pub round: usize,
    #[serde(flatten)]
    pub scores: RankingScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub erde_5: f64,
    pub erde_50: f64,
    pub latency_tp: Option<f64>,
    pub speed: Option<f64>,
    pub latency_weighted_f1: f64,
    pub ranking: Vec<RankingAt>,
}

/// Rounds at which ranking metrics are reported.
pub const RANKING_ROUNDS: [usize; 4] = [1, 100, 500, 1000];

/// Scores a complete decision log against gold labels.
pub fn evaluate(
    events: &[DecisionEvent],
    labels: &HashMap<String, Label>,
    costs: &CostConfig,
    ranking_rounds: &[usize],
) -> Result<MetricsReport> {
    let decisions = final_decisions(events);
    let mut conf = Confusion::default();
    let mut n_pos = 0;
    for d in &decisions {
        let positive = gold(labels, &d.user_id)?.is_positive();
        n_pos += usize::from(positive);
        conf.add(d.decision, positive);
    }
    let c_fp = costs.resolved_c_fp(n_pos, decisions.len());
    let erde_5 = erde(&decisions, labels, 5.0, c_fp, costs.c_fn, costs.c_tp)?;
    let erde_50 = erde(&decisions, labels, 50.0, c_fp, costs.c_fn, costs.c_tp)?;
    let ls = latency_and_speed(&decisions, labels, costs.latency_p)?;
    let f1 = conf.f1();
    let mut ranking = Vec::new();
    for &round in ranking_rounds {
        let scores = scores_at_round(events, round);
        if scores.is_empty() {
            continue;
        }
        ranking.push(RankingAt {
            round,
            scores: ranking_metrics(&scores, labels)?,
        });
    }
    Ok(MetricsReport {
        users: decisions.len(),
        precision: conf.precision(),
        recall: conf.recall(),
        f1,
        erde_5,
        erde_50,
        latency_tp: ls.latency_tp,
        speed: ls.speed,
        latency_weighted_f1: latency_weighted_f1(f1, ls.speed.unwrap_or(0.0)),
        ranking,
    })
}

impl MetricsReport {
    /// Decision-based table, one row per named run.
    pub fn decision_table(rows: &[(&str, &MetricsReport)]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>6} {:>6} {:>7} {:>7} {:>10} {:>6} {:>19}",
            "Run", "P", "R", "F1", "ERDE5", "ERDE50", "LatencyTP", "Speed", "LatencyWeightedF1"
        );
        for (name, r) in rows {
            let lat = r.latency_tp.map_or("-".to_string(), |v| format!("{v:.1}"));
            let speed = r.speed.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{:<16} {:>6.3} {:>6.3} {:>6.3} {:>7.3} {:>7.3} {:>10} {:>6} {:>19.3}",
                name, r.precision, r.recall, r.f1, r.erde_5, r.erde_50, lat, speed,
                r.latency_weighted_f1
            );
        }
        s
    }

    /// Ranking-based table: P@10, NDCG@10, NDCG@100 per reported round.
    pub fn ranking_table(rows: &[(&str, &MetricsReport)]) -> String {
        let mut s = String::new();
        let rounds: Vec<usize> = rows
            .iter()
            .flat_map(|(_, r)| r.ranking.iter().map(|x| x.round))
            .fold(Vec::new(), |mut acc, r| {
                if !acc.contains(&r) {
                    acc.push(r);
                }
                acc
            });
        let _ = write!(s, "{:<16}", "Run");
        for r in &rounds {
            let label = if *r == 1 { "writing" } else { "writings" };
            let _ = write!(s, " | {:^23}", format!("{r} {label}"));
        }
        s.push('\n');
        let _ = write!(s, "{:<16}", "");
        for _ in &rounds {
            let _ = write!(s, " | {:>6} {:>7} {:>8}", "P@10", "NDCG@10", "NDCG@100");
        }
        s.push('\n');
        for (name, rep) in rows {
            let _ = write!(s, "{:<16}", name);
            for r in &rounds {
                match rep.ranking.iter().find(|x| x.round == *r) {
                    Some(x) => {
                        let _ = write!(
                            s,
                            " | {:>6.2} {:>7.2} {:>8.2}",
                            x.scores.p_at_10, x.scores.ndcg_at_10, x.scores.ndcg_at_100
                        );
                    }
                    None => {
                        let _ = write!(s, " | {:>6} {:>7} {:>8}", "-", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pos: &[&str], neg: &[&str]) -> HashMap<String, Label> {
        pos.iter()
            .map(|u| (u.to_string(), Label::Positive))
            .chain(neg.iter().map(|u| (u.to_string(), Label::Negative)))
            .collect()
    }

    fn dec(u: &str, decision: bool, k: usize) -> FinalDecision {
        FinalDecision {
            user_id: u.into(),
            decision,
            k,
            score: if decision { 1.0 } else { 0.0 },
        }
    }

    #[test]
    fn f1_is_zero_without_hits() {
        let c = Confusion::default();
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn erde_all_true_negatives_is_zero() {
        let l = labels(&[], &["a", "b"]);
        let d = [dec("a", false, 10), dec("b", false, 3)];
        assert_eq!(erde(&d, &l, 5.0, 0.1, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn erde_single_early_true_positive() {
        let l = labels(&["a"], &[]);
        let v = erde(&[dec("a", true, 1)], &l, 5.0, 0.5, 1.0, 1.0).unwrap();
        let closed = 1.0 - 1.0 / (1.0 + (-4f64).exp());
        assert!((v - closed).abs() < 1e-15);
        assert!((v - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn erde_late_true_positive_approaches_miss_cost() {
        let l = labels(&["a"], &[]);
        let late = erde(&[dec("a", true, 100_000)], &l, 5.0, 0.5, 1.0, 1.0).unwrap();
        let miss = erde(&[dec("a", false, 100_000)], &l, 5.0, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(late, miss);
    }

    #[test]
    fn erde_missing_label_is_error() {
        let l = labels(&["a"], &[]);
        assert!(matches!(
            erde(&[dec("zz", true, 1)], &l, 5.0, 0.5, 1.0, 1.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn speed_examples() {
        assert_eq!(latency_penalty(1.0, 0.0078), 0.0);
        let pen = latency_penalty(100.0, 0.0078);
        // -1 + 2/(1+e^(-0.0078*99)) = 0.36799...; 0.37 at two decimals
        assert!((pen - 0.36799).abs() < 1e-5, "{pen}");
        assert!(((pen * 100.0).round() / 100.0 - 0.37).abs() < 1e-12);
        let mut prev = 1.0;
        for k in 2..200 {
            let s = 1.0 - latency_penalty(k as f64, 0.0078);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn latency_absent_without_true_positives() {
        let l = labels(&["a"], &["b"]);
        let ls = latency_and_speed(&[dec("a", false, 4), dec("b", true, 2)], &l, 0.0078).unwrap();
        assert_eq!(ls.latency_tp, None);
        assert_eq!(ls.speed, None);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn latency_weighted_f1_examples() {
        assert_eq!(latency_weighted_f1(1.0, 1.0), 1.0);
        assert_eq!(latency_weighted_f1(0.410, 1.000), 0.410);
        assert_eq!(latency_weighted_f1(0.7, 0.0), 0.0);
    }

    #[test]
    fn ndcg_worked_example() {
        let mut rel = vec![false; 100];
        for i in [0, 2, 4] {
            rel[i] = true;
        }
        let dcg = 1.0 + 1.0 / 4f64.log2() + 1.0 / 6f64.log2();
        let idcg = 1.0 + 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
        assert!((dcg - 1.8869).abs() < 1e-4 && (idcg - 2.1309).abs() < 1e-4);
        let v = ndcg_at(&rel, 10);
        assert!((v - dcg / idcg).abs() < 1e-15);
        assert!((v - 0.8855).abs() < 1e-4);
    }

    #[test]
    fn ranking_perfect_and_reversed() {
        let n = 150;
        let pos: Vec<String> = (0..12).map(|i| format!("p{i:03}")).collect();
        let neg: Vec<String> = (0..n - 12).map(|i| format!("n{i:03}")).collect();
        let mut l = HashMap::new();
        for p in &pos {
            l.insert(p.clone(), Label::Positive);
        }
        for q in &neg {
            l.insert(q.clone(), Label::Negative);
        }
        let perfect: Vec<(String, f64)> = pos
            .iter()
            .map(|u| (u.clone(), 0.9))
            .chain(neg.iter().map(|u| (u.clone(), 0.1)))
            .collect();
        let r = ranking_metrics(&perfect, &l).unwrap();
        assert_eq!((r.p_at_10, r.ndcg_at_10, r.ndcg_at_100), (1.0, 1.0, 1.0));
        assert!(!r.truncated);

        let reversed: Vec<(String, f64)> = pos
            .iter()
            .map(|u| (u.clone(), 0.1))
            .chain(neg.iter().map(|u| (u.clone(), 0.9)))
            .collect();
        let r = ranking_metrics(&reversed, &l).unwrap();
        assert_eq!((r.p_at_10, r.ndcg_at_10, r.ndcg_at_100), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ranking_short_list_flags_truncation() {
        let l = labels(&["a"], &["b", "c"]);
        let s = vec![("a".to_string(), 0.5), ("b".into(), 0.2), ("c".into(), 0.1)];
        let r = ranking_metrics(&s, &l).unwrap();
        assert!(r.truncated);
        assert!((r.p_at_10 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.ndcg_at_10, 1.0);
    }

    #[test]
    fn ties_broken_by_user_id() {
        let s = vec![("b".to_string(), 0.5), ("a".into(), 0.5), ("c".into(), 0.7)];
        let order: Vec<&str> = rank_users(&s).iter().map(|x| x.0.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }
}
