//! Corpus and embedding-store I/O, plus the planted-signal generator.
//!
//! The corpus is line-delimited JSON, one user per line. The embedding store
//! is a binary file with a plain-text header; see `docs/formats.md`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TextSet;
use crate::rng::{label, SeedTree};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    /// Training target, `None` for unlabelled users.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Positive => Some(1.0),
            Label::Negative => Some(0.0),
            Label::Unknown => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub label: Label,
    /// Chronological: ordered by timestamp, then post id.
    pub posts: Vec<Post>,
}

impl UserRecord {
    pub fn post_ids(&self) -> impl Iterator<Item = &str> {
        self.posts.iter().map(|p| p.post_id.as_str())
    }

    /// Puts posts in chronological order. Returns `true` if they were not
    /// already in order.
    pub fn sort_posts(&mut self) -> bool {
        let sorted = self
            .posts
            .windows(2)
            .all(|w| (w[0].timestamp, &w[0].post_id) <= (w[1].timestamp, &w[1].post_id));
        if !sorted {
            self.posts
                .sort_by(|a, b| (a.timestamp, &a.post_id).cmp(&(b.timestamp, &b.post_id)));
        }
        !sorted
    }

    fn check_unique_posts(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.posts.len());
        for p in &self.posts {
            if !seen.insert(p.post_id.as_str()) {
                return Err(Error::Data(format!(
                    "user {} has duplicate post id {}",
                    self.user_id, p.post_id
                )));
            }
        }
        Ok(())
    }
}

/// Parses a corpus from any reader; `origin` is used in error messages.
pub fn parse_corpus<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<UserRecord>> {
    let mut users = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut user: UserRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if !ids.insert(user.user_id.clone()) {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                msg: format!("duplicate user id {}", user.user_id),
            });
        }
        user.check_unique_posts().map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if user.sort_posts() {
            log::warn!(
                "{}:{}: posts of user {} were out of chronological order; re-sorted",
                origin.display(),
                lineno,
                user.user_id
            );
        }
        users.push(user);
    }
    Ok(users)
}

pub fn load_corpus(path: &Path) -> Result<Vec<UserRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(f), path)
}

pub fn write_corpus(path: &Path, users: &[UserRecord]) -> Result<()> {
    let mut out = Vec::new();
    for u in users {
        serde_json::to_writer(&mut out, u).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Frozen sentence-encoder vectors keyed by post id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub encoder_name: String,
    pub version: u32,
    dimension: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

const STORE_MAGIC: &str = "SETRISK-EMB";
pub const STORE_VERSION: u32 = 1;

impl EmbeddingStore {
    pub fn from_entries(
        encoder_name: impl Into<String>,
        dimension: usize,
        mut entries: Vec<(String, Vec<f32>)>,
    ) -> Result<Self> {
        let encoder_name = encoder_name.into();
        if encoder_name.contains('\n') {
            return Err(Error::Data("encoder name may not contain a newline".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dimension);
        for (id, v) in entries {
            if v.len() != dimension {
                return Err(Error::Data(format!(
                    "vector for {id} has {} entries, store dimension is {dimension}",
                    v.len()
                )));
            }
            if ids.last() == Some(&id) {
                return Err(Error::Data(format!("duplicate post id {id} in store")));
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Ok(EmbeddingStore {
            encoder_name,
            version: STORE_VERSION,
            dimension,
            ids,
            data,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, post_id: &str) -> Option<&[f32]> {
        let i = self
            .ids
            .binary_search_by(|probe| probe.as_str().cmp(post_id))
            .ok()?;
        Some(&self.data[i * self.dimension..(i + 1) * self.dimension])
    }

    /// Embeds the given posts of one user as a text-set, rows in the given
    /// order.
    pub fn text_set<S: AsRef<str>>(&self, user_id: &str, post_ids: &[S]) -> Result<TextSet> {
        let mut data = Vec::with_capacity(post_ids.len() * self.dimension);
        for id in post_ids {
            let v = self.get(id.as_ref()).ok_or_else(|| {
                Error::Data(format!("post {} of user {user_id} missing from embedding store", id.as_ref()))
            })?;
            data.extend(v.iter().map(|&x| f64::from(x)));
        }
        let emb = Tensor::matrix(post_ids.len(), self.dimension, data)?;
        TextSet::new(
            user_id,
            emb,
            post_ids.iter().map(|s| s.as_ref().to_string()).collect(),
        )
    }

    /// Post ids of `users` that the store cannot resolve.
    pub fn missing<'a>(&self, users: &'a [UserRecord]) -> Vec<&'a str> {
        users
            .iter()
            .flat_map(|u| u.post_ids())
            .filter(|id| self.get(id).is_none())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(
            format!(
                "{STORE_MAGIC}\nversion={}\nencoder_name={}\ndimension={}\ncount={}\n\n",
                self.version,
                self.encoder_name,
                self.dimension,
                self.ids.len()
            )
            .as_bytes(),
        );
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("embedding store: {msg}"));
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            *pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line(&mut pos)? != STORE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut version = None;
        let mut encoder_name = None;
        let mut dimension = None;
        let mut count = None;
        loop {
            let line = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad {key}: {v}")));
            match key {
                "version" => version = Some(num(value)? as u32),
                "encoder_name" => encoder_name = Some(value.to_string()),
                "dimension" => dimension = Some(num(value)?),
                "count" => count = Some(num(value)?),
                _ => log::warn!("embedding store: ignoring unknown header key {key}"),
            }
        }
        let version = version.ok_or_else(|| bad("missing version".into()))?;
        if version != STORE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dimension = dimension.ok_or_else(|| bad("missing dimension".into()))?;
        let count = count.ok_or_else(|| bad("missing count".into()))?;
        let encoder_name = encoder_name.unwrap_or_default();

        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len_bytes = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| bad("truncated id table".into()))?;
            let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            pos += 4;
            let raw = bytes
                .get(pos..pos + len)
                .ok_or_else(|| bad("truncated id table".into()))?;
            pos += len;
            let id = String::from_utf8(raw.to_vec()).map_err(|_| bad("post id is not UTF-8".into()))?;
            if let Some(prev) = ids.last() {
                if *prev >= id {
                    return Err(bad(format!("id table not strictly sorted at {id}")));
                }
            }
            ids.push(id);
        }
        let payload = &bytes[pos..];
        if payload.len() != count * dimension * 4 {
            return Err(bad(format!(
                "vector payload is {} bytes, expected {} ({} x {} f32)",
                payload.len(),
                count * dimension * 4,
                count,
                dimension
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(EmbeddingStore {
            encoder_name,
            version,
            dimension,
            ids,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        EmbeddingStore::from_bytes(&bytes)
    }
}

/// Parameters of the planted-signal corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub posts_min: usize,
    pub posts_max: usize,
    /// Fraction of a positive user's posts that carry the signal direction.
    pub signal_rate: f64,
    /// Noise norm relative to the unit signal direction.
    pub noise_sigma: f64,
    pub dimension: usize,
    pub seed: u64,
    /// Fraction of a negative user's posts that also carry the signal
    /// direction (hard negatives). Zero by default.
    #[serde(default)]
    pub negative_signal_rate: f64,
    /// Norm of a per-user offset shared by all of that user's posts,
    /// independent of the label. Zero by default.
    #[serde(default)]
    pub user_style: f64,
}

impl SyntheticSpec {
    pub fn new(n_pos: usize, n_neg: usize, dimension: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_pos,
            n_neg,
            posts_min: 20,
            posts_max: 80,
            signal_rate: 0.3,
            noise_sigma: 0.3,
            dimension,
            seed,
            negative_signal_rate: 0.0,
            user_style: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_rate > 0.0 && self.signal_rate <= 1.0) {
            return Err(Error::Config(format!(
                "signal_rate must be in (0, 1], got {}",
                self.signal_rate
            )));
        }
        if !(0.0..1.0).contains(&self.negative_signal_rate) {
            return Err(Error::Config("negative_signal_rate must be in [0, 1)".into()));
        }
        if self.dimension < 2 {
            return Err(Error::Config("dimension must be >= 2".into()));
        }
        if self.posts_min == 0 || self.posts_min > self.posts_max {
            return Err(Error::Config(format!(
                "invalid posts-per-user range {}..={}",
                self.posts_min, self.posts_max
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.user_style >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalMetadata {
    pub signal_direction: Vec<f64>,
    /// Every post carrying the planted direction.
    pub signal_posts: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub users: Vec<UserRecord>,
    pub store: EmbeddingStore,
    pub metadata: SignalMetadata,
}

fn gaussian_unit_scale<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    let s = scale / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect()
}

fn planted_count(n: usize, rate: f64, at_least_one: bool) -> usize {
    let c = (rate * n as f64).round() as usize;
    let c = if at_least_one { c.max(1) } else { c };
    c.min(n)
}

/// Generates users, their embeddings and the record of which posts carry the
/// signal.
///
/// Background posts are `noise_sigma * e` with `e ~ N(0, I/d)` (expected norm
/// one). A positive user has `round(signal_rate * n)` posts (at least one)
/// equal to `u + noise_sigma * e`, where `u` is a fixed random unit vector.
/// Labels are assigned to user ids in a shuffled order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let root = SeedTree::new(spec.seed).fork(label::SYNTH);
    let d = spec.dimension;

    let mut dir_rng = root.fork(0).rng();
    let mut u = gaussian_unit_scale(&mut dir_rng, d, 1.0);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut u {
        *v /= norm;
    }

    let n_users = spec.n_pos + spec.n_neg;
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Positive, spec.n_pos)
        .chain(std::iter::repeat_n(Label::Negative, spec.n_neg))
        .collect();
    {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut root.fork(1).rng());
    }

    let width = n_users.max(1).to_string().len().max(4);
    let mut users = Vec::with_capacity(n_users);
    let mut entries = Vec::new();
    let mut signal_posts = BTreeSet::new();
    for (i, &lab) in labels.iter().enumerate() {
        let mut rng = root.path(&[2, i as u64]).rng();
        let user_id = format!("user{i:0width$}");
        let n = rng.random_range(spec.posts_min..=spec.posts_max);
        let n_signal = match lab {
            Label::Positive => planted_count(n, spec.signal_rate, true),
            _ => planted_count(n, spec.negative_signal_rate, false),
        };
        let signal_idx: HashSet<usize> = sample(&mut rng, n, n_signal).into_iter().collect();
        let style = if spec.user_style > 0.0 {
            gaussian_unit_scale(&mut rng, d, spec.user_style)
        } else {
            vec![0.0; d]
        };
        let mut posts = Vec::with_capacity(n);
        for j in 0..n {
            let post_id = format!("{user_id}_{j:04}");
            let noise = gaussian_unit_scale(&mut rng, d, spec.noise_sigma);
            let carries = signal_idx.contains(&j);
            let v: Vec<f32> = (0..d)
                .map(|k| {
                    let base = if carries { u[k] } else { 0.0 };
                    (base + style[k] + noise[k]) as f32
                })
                .collect();
            if carries {
                signal_posts.insert(post_id.clone());
            }
            entries.push((post_id.clone(), v));
            posts.push(Post {
                post_id,
                timestamp: 1_600_000_000 + (j as i64) * 3_600,
                text: None,
            });
        }
        users.push(UserRecord {
            user_id,
            label: lab,
            posts,
        });
    }
    let store = EmbeddingStore::from_entries(format!("synthetic-d{d}-seed{}", spec.seed), d, entries)?;
    Ok(SyntheticCorpus {
        users,
        store,
        metadata: SignalMetadata {
            signal_direction: u,
            signal_posts,
        },
    })
}
