//! Round-based replay of an early-risk stream.
//!
//! In round `r` every user who still has writings releases their `r`-th post.
//! For each undecided user the run policy builds a text-set from the posts
//! seen so far, the model scores it, and the user is flagged positive once
//! the score reaches the threshold. A positive flag is final: the user
//! consumes no further posts and keeps reporting the score it fired with.
//! Users who run out of posts without firing are closed as negative.
//!
//! Because posts arrive one per round from round 1, the round at which a
//! decision is taken equals the number of posts seen at that point.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, UserRecord};
use crate::error::{Error, Result};
use crate::model::{SetClassifier, TextSet};
use crate::parallel::Executor;

/// Scores text-sets; optionally scores individual posts for IG selection.
pub trait RiskModel: Sync {
    /// Probability of the positive class.
    fn score(&self, set: &TextSet) -> Result<f64>;

    /// Contribution of each post of `set` (same order) to a positive
    /// decision.
    fn post_scores(&self, _set: &TextSet) -> Result<Vec<f64>> {
        Err(Error::Contract(
            "this model cannot score individual posts".into(),
        ))
    }
}

impl RiskModel for SetClassifier {
    fn score(&self, set: &TextSet) -> Result<f64> {
        self.predict(set)
    }

    fn post_scores(&self, set: &TextSet) -> Result<Vec<f64>> {
        crate::attribution::IgScorer::new(self, crate::attribution::DEFAULT_STEPS).post_scores(set)
    }
}

/// Returns the same score for every set.
#[derive(Clone, Copy, Debug)]
pub struct ConstantModel(pub f64);

impl RiskModel for ConstantModel {
    fn score(&self, _set: &TextSet) -> Result<f64> {
        Ok(self.0)
    }
}

/// Scores 1 for users whose gold label is positive and 0 otherwise. Useful
/// as an upper bound and for testing the evaluation pipeline.
#[derive(Clone, Debug)]
pub struct LabelOracle {
    positives: std::collections::HashSet<String>,
}

impl LabelOracle {
    pub fn new(users: &[UserRecord]) -> Self {
        LabelOracle {
            positives: users
                .iter()
                .filter(|u| u.label.is_positive())
                .map(|u| u.user_id.clone())
                .collect(),
        }
    }
}

impl RiskModel for LabelOracle {
    fn score(&self, set: &TextSet) -> Result<f64> {
        Ok(if self.positives.contains(&set.user_id) { 1.0 } else { 0.0 })
    }

    fn post_scores(&self, set: &TextSet) -> Result<Vec<f64>> {
        Ok(vec![0.0; set.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// The most recent `K` posts.
    RecentK,
    /// The `K` posts with the highest attribution so far.
    IgSelectedK,
    /// The newest post alone.
    PostLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPolicy {
    pub kind: PolicyKind,
    pub k: usize,
    pub threshold: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.9;

impl RunPolicy {
    pub fn new(kind: PolicyKind, k: usize, threshold: f64) -> Result<Self> {
        let p = RunPolicy { kind, k, threshold };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "decision threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("policy K must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Undecided,
    /// Flagged positive after seeing `round` posts.
    Fired { round: usize },
    /// Ran out of posts without firing.
    Exhausted { round: usize },
}

/// One line of the decision log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub round: usize,
    pub user_id: String,
    pub decision: u8,
    pub score: f64,
}

#[derive(Clone, Debug)]
struct UserStream {
    user_id: String,
    seen: Vec<String>,
    status: Status,
    score: f64,
}

/// Per-user streaming state, ordered by user id.
#[derive(Clone, Debug)]
pub struct StreamState {
    users: Vec<UserStream>,
    index: HashMap<String, usize>,
    round: usize,
}

impl StreamState {
    pub fn new<S: AsRef<str>>(user_ids: &[S]) -> Result<Self> {
        let mut ids: Vec<String> = user_ids.iter().map(|s| s.as_ref().to_string()).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate user id {}", w[0])));
        }
        let index = ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let users = ids
            .into_iter()
            .map(|user_id| UserStream {
                user_id,
                seen: Vec::new(),
                status: Status::Undecided,
                score: 0.0,
            })
            .collect();
        Ok(StreamState {
            users,
            index,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn status(&self, user_id: &str) -> Option<Status> {
        self.index.get(user_id).map(|&i| self.users[i].status)
    }

    pub fn posts_seen(&self, user_id: &str) -> Option<&[String]> {
        self.index.get(user_id).map(|&i| self.users[i].seen.as_slice())
    }

    pub fn any_undecided(&self) -> bool {
        self.users.iter().any(|u| u.status == Status::Undecided)
    }

    /// Total posts consumed across users.
    pub fn posts_consumed(&self) -> usize {
        self.users.iter().map(|u| u.seen.len()).sum()
    }

    /// Latest score of every user, in user-id order.
    pub fn scores(&self) -> Vec<(String, f64)> {
        self.users.iter().map(|u| (u.user_id.clone(), u.score)).collect()
    }
}

/// The text-set a policy feeds the model, given the posts seen so far
/// (chronological).
pub fn policy_input(
    policy: &RunPolicy,
    user_id: &str,
    seen: &[String],
    model: &dyn RiskModel,
    store: &EmbeddingStore,
) -> Result<TextSet> {
    match policy.kind {
        PolicyKind::RecentK => {
            let start = seen.len().saturating_sub(policy.k);
            store.text_set(user_id, &seen[start..])
        }
        PolicyKind::PostLevel => store.text_set(user_id, &seen[seen.len() - 1..]),
        PolicyKind::IgSelectedK => {
            crate::attribution::select_top_k_from(model, store, user_id, seen, policy.k)
        }
    }
}

/// Advances the stream by one round. `new_posts` holds at most one
/// `(user_id, post_id)` pair per user. Returns the round's events in user-id
/// order.
pub fn step_round(
    state: &mut StreamState,
    new_posts: &[(String, String)],
    policy: &RunPolicy,
    model: &dyn RiskModel,
    store: &EmbeddingStore,
    exec: &Executor,
) -> Result<Vec<DecisionEvent>> {
    state.round += 1;
    let round = state.round;
    let mut received = vec![false; state.users.len()];
    for (user_id, post_id) in new_posts {
        let &i = state
            .index
            .get(user_id)
            .ok_or_else(|| Error::Data(format!("round {round}: unknown user id {user_id}")))?;
        if received[i] {
            return Err(Error::Data(format!(
                "round {round}: user {user_id} released more than one post"
            )));
        }
        received[i] = true;
        let u = &mut state.users[i];
        match u.status {
            Status::Undecided => u.seen.push(post_id.clone()),
            Status::Fired { .. } => {}
            Status::Exhausted { .. } => {
                return Err(Error::Data(format!(
                    "round {round}: user {user_id} released a post after running out"
                )))
            }
        }
    }

    let mut to_score = Vec::new();
    for (i, u) in state.users.iter_mut().enumerate() {
        if u.status == Status::Undecided {
            if received[i] {
                to_score.push(i);
            } else {
                u.status = Status::Exhausted { round: round - 1 };
            }
        }
    }

    let users = &state.users;
    let scores = exec.try_map(&to_score, |&i| {
        let u = &users[i];
        let set = policy_input(policy, &u.user_id, &u.seen, model, store)?;
        let s = model.score(&set)?;
        if !s.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite score for user {} in round {round}",
                u.user_id
            )));
        }
        Ok(s)
    })?;
    for (&i, s) in to_score.iter().zip(scores) {
        let u = &mut state.users[i];
        u.score = s;
        if s >= policy.threshold {
            u.status = Status::Fired { round };
        }
    }

    Ok(state
        .users
        .iter()
        .filter_map(|u| match u.status {
            Status::Undecided => Some((u, 0)),
            Status::Fired { .. } => Some((u, 1)),
            Status::Exhausted { .. } => None,
        })
        .map(|(u, decision)| DecisionEvent {
            round,
            user_id: u.user_id.clone(),
            decision,
            score: u.score,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    pub events: Vec<DecisionEvent>,
    /// Latest score per user at each snapshot round.
    pub snapshots: Vec<(usize, Vec<(String, f64)>)>,
    pub rounds: usize,
    pub posts_consumed: usize,
}

/// Replays every user's posts in chronological order until all users are
/// decided or `max_rounds` is reached.
pub fn run_simulation(
    users: &[UserRecord],
    store: &EmbeddingStore,
    policy: &RunPolicy,
    model: &dyn RiskModel,
    max_rounds: usize,
    snapshot_rounds: &[usize],
    exec: &Executor,
) -> Result<SimulationOutput> {
    policy.validate()?;
    if let Some(u) = users.iter().find(|u| u.posts.is_empty()) {
        return Err(Error::Data(format!("user {} has no posts to stream", u.user_id)));
    }
    let ids: Vec<&str> = users.iter().map(|u| u.user_id.as_str()).collect();
    let mut state = StreamState::new(&ids)?;
    let mut events = Vec::new();
    while state.any_undecided() && state.round() < max_rounds {
        let r = state.round();
        let new_posts: Vec<(String, String)> = users
            .iter()
            .filter(|u| {
                r < u.posts.len() && state.status(&u.user_id) == Some(Status::Undecided)
            })
            .map(|u| (u.user_id.clone(), u.posts[r].post_id.clone()))
            .collect();
        if new_posts.is_empty() {
            break;
        }
        events.extend(step_round(&mut state, &new_posts, policy, model, store, exec)?);
    }
    let snapshots = snapshot_rounds
        .iter()
        .filter(|&&r| r <= max_rounds)
        .map(|&r| (r, scores_at_round(&events, r)))
        .collect();
    Ok(SimulationOutput {
        events,
        snapshots,
        rounds: state.round(),
        posts_consumed: state.posts_consumed(),
    })
}

/// A user's closing state, derived from the decision log.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalDecision {
    pub user_id: String,
    pub decision: bool,
    /// Posts seen when the decision was taken (or when the user was closed).
    pub k: usize,
    pub score: f64,
}

/// One decision per user, in user-id order: the first positive event if any,
/// else the last event.
pub fn final_decisions(events: &[DecisionEvent]) -> Vec<FinalDecision> {
    let mut by_user: BTreeMap<&str, FinalDecision> = BTreeMap::new();
    for e in events {
        let entry = by_user.entry(&e.user_id).or_insert_with(|| FinalDecision {
            user_id: e.user_id.clone(),
            decision: false,
            k: e.round,
            score: e.score,
        });
        if entry.decision {
            continue;
        }
        entry.decision = e.decision == 1;
        entry.k = e.round;
        entry.score = e.score;
    }
    by_user.into_values().collect()
}

/// Each user's most recent score at or before `round`, in user-id order.
pub fn scores_at_round(events: &[DecisionEvent], round: usize) -> Vec<(String, f64)> {
    let mut latest: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for e in events.iter().filter(|e| e.round <= round) {
        let slot = latest.entry(&e.user_id).or_insert((e.round, e.score));
        if e.round >= slot.0 {
            *slot = (e.round, e.score);
        }
    }
    latest
        .into_iter()
        .map(|(u, (_, s))| (u.to_string(), s))
        .collect()
}

pub fn write_decision_log(path: &Path, events: &[DecisionEvent]) -> Result<()> {
    let mut out = String::with_capacity(events.len() * 64);
    for e in events {
        out.push_str(&serde_json::to_string(e).map_err(|err| Error::Data(err.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_decision_log(path: &Path) -> Result<Vec<DecisionEvent>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: DecisionEvent = serde_json::from_str(&line).map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: err.to_string(),
        })?;
        if e.decision > 1 || !(0.0..=1.0).contains(&e.score) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "decision must be 0/1 and score in [0, 1]".into(),
            });
        }
        events.push(e);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Post};

    /// Fires when the newest post in the set is in the trigger list.
    struct Trigger(Vec<&'static str>);

    impl RiskModel for Trigger {
        fn score(&self, set: &TextSet) -> Result<f64> {
            let last = set.post_ids.last().unwrap();
            Ok(if self.0.contains(&last.as_str()) { 0.95 } else { 0.2 })
        }
    }

    /// Records the size of every set it sees, as a score.
    struct SizeEcho;

    impl RiskModel for SizeEcho {
        fn score(&self, set: &TextSet) -> Result<f64> {
            Ok(set.len() as f64 / 1000.0)
        }
    }

    fn corpus(lens: &[usize]) -> (Vec<UserRecord>, EmbeddingStore) {
        let mut users = Vec::new();
        let mut entries = Vec::new();
        for (i, &n) in lens.iter().enumerate() {
            let uid = format!("u{i}");
            let posts = (0..n)
                .map(|j| {
                    let pid = format!("u{i}_{j:03}");
                    entries.push((pid.clone(), vec![j as f32, i as f32]));
                    Post {
                        post_id: pid,
                        timestamp: j as i64,
                        text: None,
                    }
                })
                .collect();
            users.push(UserRecord {
                user_id: uid,
                label: Label::Negative,
                posts,
            });
        }
        (users, EmbeddingStore::from_entries("t", 2, entries).unwrap())
    }

    fn policy(kind: PolicyKind, k: usize) -> RunPolicy {
        RunPolicy::new(kind, k, 0.9).unwrap()
    }

    #[test]
    fn first_round_sees_first_post_only() {
        let (users, store) = corpus(&[5, 3]);
        let model = SizeEcho;
        for kind in [PolicyKind::RecentK, PolicyKind::PostLevel] {
            let out = run_simulation(&users, &store, &policy(kind, 16), &model, 1, &[], &Executor::sequential())
                .unwrap();
            assert!(out.events.iter().all(|e| e.score == 0.001));
        }
    }

    #[test]
    fn recent_k_window_at_round_20() {
        let (users, store) = corpus(&[30]);
        let seen: Vec<String> = users[0].posts[..20].iter().map(|p| p.post_id.clone()).collect();
        let set = policy_input(&policy(PolicyKind::RecentK, 16), "u0", &seen, &SizeEcho, &store).unwrap();
        // posts 5..=20 in 1-based numbering
        assert_eq!(set.post_ids.first().unwrap(), "u0_004");
        assert_eq!(set.post_ids.last().unwrap(), "u0_019");
        assert_eq!(set.len(), 16);
    }

    #[test]
    fn fired_decision_is_irrevocable() {
        let (users, store) = corpus(&[10, 10]);
        let model = Trigger(vec!["u0_002"]);
        let out = run_simulation(
            &users,
            &store,
            &policy(PolicyKind::PostLevel, 1),
            &model,
            100,
            &[],
            &Executor::sequential(),
        )
        .unwrap();
        let u0: Vec<&DecisionEvent> = out.events.iter().filter(|e| e.user_id == "u0").collect();
        assert_eq!(u0[0].decision, 0);
        assert_eq!(u0[2].round, 3);
        assert!(u0[2..].iter().all(|e| e.decision == 1 && e.score == 0.95));
        let fin = final_decisions(&out.events);
        assert_eq!(fin[0].k, 3);
        assert!(fin[0].decision);
        assert!(!fin[1].decision);
        assert_eq!(fin[1].k, 10);
        // u0 stopped consuming after firing at round 3
        assert_eq!(out.posts_consumed, 3 + 10);
    }

    #[test]
    fn unknown_user_and_double_post_rejected() {
        let (_, store) = corpus(&[3]);
        let mut st = StreamState::new(&["u0"]).unwrap();
        let p = policy(PolicyKind::RecentK, 4);
        let ex = Executor::sequential();
        let err = step_round(&mut st, &[("zz".into(), "x".into())], &p, &SizeEcho, &store, &ex);
        assert!(matches!(err, Err(Error::Data(_))));
        let mut st = StreamState::new(&["u0"]).unwrap();
        let two = [("u0".to_string(), "u0_000".to_string()), ("u0".into(), "u0_001".into())];
        assert!(step_round(&mut st, &two, &p, &SizeEcho, &store, &ex).is_err());
    }

    #[test]
    fn silent_user_becomes_exhausted() {
        let (_, store) = corpus(&[1]);
        let mut st = StreamState::new(&["u0"]).unwrap();
        let p = policy(PolicyKind::RecentK, 4);
        let ex = Executor::sequential();
        let ev = step_round(&mut st, &[("u0".into(), "u0_000".into())], &p, &SizeEcho, &store, &ex).unwrap();
        assert_eq!(ev.len(), 1);
        let ev = step_round(&mut st, &[], &p, &SizeEcho, &store, &ex).unwrap();
        assert!(ev.is_empty());
        assert_eq!(st.status("u0"), Some(Status::Exhausted { round: 1 }));
        assert!(!st.any_undecided());
    }

    #[test]
    fn scores_at_round_uses_latest_event() {
        let ev = |round, u: &str, s| DecisionEvent {
            round,
            user_id: u.into(),
            decision: 0,
            score: s,
        };
        let events = vec![ev(1, "a", 0.1), ev(1, "b", 0.2), ev(2, "a", 0.3), ev(3, "a", 0.4)];
        assert_eq!(
            scores_at_round(&events, 2),
            vec![("a".to_string(), 0.3), ("b".to_string(), 0.2)]
        );
    }

    #[test]
    fn decision_log_round_trip() {
        let events = vec![
            DecisionEvent {
                round: 1,
                user_id: "a".into(),
                decision: 0,
                score: 0.1 + 0.2,
            },
            DecisionEvent {
                round: 2,
                user_id: "a".into(),
                decision: 1,
                score: 0.9731,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_decision_log(&path, &events).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"round":1,"user_id":"a","decision":0,"score":0.30000000000000004}"#
        );
        assert_eq!(read_decision_log(&path).unwrap(), events);
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(RunPolicy::new(PolicyKind::RecentK, 16, 1.0).is_err());
        assert!(RunPolicy::new(PolicyKind::RecentK, 16, 0.0).is_err());
        assert!(RunPolicy::new(PolicyKind::RecentK, 0, 0.5).is_err());
    }
}
