//! One function per subcommand. Each writes its effective manifest into the
//! output directory before doing any work and again, with the paths of the
//! artifacts it produced, once it succeeds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use setrisk_core::attribution::{rank_posts, render_report, IgScorer, RankedPost};
use setrisk_core::checkpoint::{load_model, save_model};
use setrisk_core::corpus::{generate_synthetic, load_corpus, write_corpus, EmbeddingStore, Label, UserRecord};
use setrisk_core::metrics::{evaluate as score_log, MetricsReport};
use setrisk_core::sim::{
    read_decision_log, run_simulation, write_decision_log, ConstantModel, LabelOracle, RiskModel,
};
use setrisk_core::training::{
    stratified_split, train_epochs, write_log, TrainData, TrainingState,
};
use setrisk_core::{Error, Executor, SetClassifier};

use crate::error::{CliError, CliResult};
use crate::manifest::{ModelSource, RunManifest, UserSplit};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const SIGNAL_FILE: &str = "signal.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";
pub const ATTRIBUTION_JSONL: &str = "attribution.jsonl";
pub const ATTRIBUTION_TXT: &str = "attribution.txt";
pub const ABLATION_JSONL: &str = "ablation.jsonl";
pub const ABLATION_SUMMARY: &str = "ablation_summary.json";
pub const ABLATION_TXT: &str = "ablation.txt";

/// Runs the command named in `m.command`.
pub fn dispatch(m: &mut RunManifest) -> CliResult<String> {
    match m.command.as_str() {
        "gen-synth" => gen_synth(m),
        "train" => train(m),
        "simulate" => simulate(m),
        "evaluate" => evaluate(m),
        "attribute" => attribute(m),
        "ablate" => ablate(m),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

/// Creates the output directory and echoes the effective manifest into it.
fn start(m: &RunManifest) -> CliResult<()> {
    let dir = m.output_dir();
    let target = dir.join(crate::manifest::MANIFEST_FILE);
    if let Some(src) = &m.source {
        let same = src.canonicalize().ok().zip(target.canonicalize().ok()).is_some_and(|(a, b)| a == b);
        if same && RunManifest::load(src).is_ok_and(|prev| prev.command != m.command) {
            return Err(CliError::Usage(format!(
                "{} belongs to another command; choose another --out",
                target.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    m.write(dir)?;
    Ok(())
}

/// Refuses to write an output over one of the command's inputs.
fn guard(inputs: &[&Path], outputs: &[PathBuf]) -> CliResult<()> {
    for out in outputs {
        let Ok(o) = out.canonicalize() else { continue };
        for input in inputs {
            if input.canonicalize().is_ok_and(|i| i == o) {
                return Err(CliError::Usage(format!(
                    "output {} would overwrite an input; choose another --out",
                    out.display()
                )));
            }
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn load_inputs(m: &RunManifest) -> CliResult<(PathBuf, Vec<UserRecord>, PathBuf, EmbeddingStore)> {
    let corpus = m.input("corpus", &m.paths.corpus)?;
    let emb = m.input("embeddings", &m.paths.embeddings)?;
    let users = load_corpus(&corpus)?;
    let store = EmbeddingStore::read(&emb)?;
    Ok((corpus, users, emb, store))
}

fn checkpoint_model(m: &RunManifest, store: &EmbeddingStore) -> CliResult<(PathBuf, SetClassifier)> {
    let path = m.input("checkpoint", &m.paths.checkpoint)?;
    let model = load_model(&path)?;
    if model.config.input_dim != store.dimension() {
        return Err(Error::Data(format!(
            "checkpoint expects {}-dimensional embeddings, store has {}",
            model.config.input_dim,
            store.dimension()
        ))
        .into());
    }
    Ok((path, model))
}

pub fn gen_synth(m: &mut RunManifest) -> CliResult<String> {
    m.synthetic.validate()?;
    m.model.input_dim = m.synthetic.dimension;
    let dir = m.output_dir().to_path_buf();
    start(m)?;
    let corpus = generate_synthetic(&m.synthetic)?;
    let corpus_path = dir.join(CORPUS_FILE);
    let store_path = dir.join(EMBEDDINGS_FILE);
    write_corpus(&corpus_path, &corpus.users)?;
    corpus.store.write(&store_path)?;
    write_json(&dir.join(SIGNAL_FILE), &corpus.metadata)?;
    m.paths.corpus = Some(corpus_path);
    m.paths.embeddings = Some(store_path);
    m.write(&dir)?;
    Ok(format!(
        "{} users ({} positive), {} posts, {} signal posts -> {}",
        corpus.users.len(),
        m.synthetic.n_pos,
        corpus.store.len(),
        corpus.metadata.signal_posts.len(),
        dir.display()
    ))
}

pub fn train(m: &mut RunManifest) -> CliResult<String> {
    let (corpus_path, users, store_path, store) = load_inputs(m)?;
    m.model.input_dim = store.dimension();
    m.model.validate()?;
    m.train.validate()?;
    let resume = match &m.paths.resume {
        Some(_) => Some(m.input("resume", &m.paths.resume)?),
        None => None,
    };
    let dir = m.output_dir().to_path_buf();
    let (model_path, state_path, log_path) =
        (dir.join(MODEL_FILE), dir.join(STATE_FILE), dir.join(TRAIN_LOG_FILE));
    let mut inputs = vec![corpus_path.as_path(), store_path.as_path()];
    if let Some(r) = &resume {
        inputs.push(r);
    }
    guard(&inputs, &[model_path.clone(), state_path.clone(), log_path.clone()])?;
    start(m)?;

    let mut state = match &resume {
        Some(path) => {
            let mut s = TrainingState::load(path)?;
            let mut expected = m.train.clone();
            expected.epochs = s.train_config.epochs;
            if s.model_config != m.model || s.train_config != expected {
                return Err(Error::Config(format!(
                    "{} was trained with a different configuration",
                    path.display()
                ))
                .into());
            }
            s.train_config.epochs = m.train.epochs;
            s
        }
        None => TrainingState::new(m.model.clone(), m.train.clone())?,
    };
    let data = TrainData::new(&users, &store, &state.train_config)?;
    let remaining = m.train.epochs.saturating_sub(state.epochs_done);
    let exec = Executor::new(m.workers);
    if let Err(e) = train_epochs(&mut state, &data, remaining, &exec) {
        if let Error::Diverged { last_good, .. } = &e {
            let model = SetClassifier::new(m.model.clone(), (**last_good).clone());
            save_model(&dir.join(LAST_GOOD_FILE), &model)?;
            write_log(&log_path, &state.log)?;
        }
        return Err(e.into());
    }
    save_model(&model_path, &state.best_model())?;
    state.save(&state_path)?;
    write_log(&log_path, &state.log)?;
    m.paths.checkpoint = Some(model_path);
    m.paths.resume = None;
    m.write(&dir)?;
    Ok(format!(
        "{} epochs, best validation F1 {:.4} at epoch {} ({} train / {} validation users) -> {}",
        state.epochs_done,
        state.best_val_f1,
        state.best_epoch,
        data.train.len(),
        data.val.len(),
        dir.display()
    ))
}

fn select_users(m: &RunManifest, users: Vec<UserRecord>) -> Vec<UserRecord> {
    match m.simulation.users {
        UserSplit::All => users,
        UserSplit::Validation => {
            let (_, val) = stratified_split(&users, m.train.val_fraction, m.train.seed);
            val.into_iter().map(|i| users[i].clone()).collect()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotRow<'a> {
    round: usize,
    user_id: &'a str,
    score: f64,
}

pub fn simulate(m: &mut RunManifest) -> CliResult<String> {
    m.policy.validate()?;
    let (corpus_path, users, store_path, store) = load_inputs(m)?;
    let classifier;
    let scorer;
    let oracle;
    let constant;
    let model: &dyn RiskModel = match m.simulation.model {
        ModelSource::Checkpoint => {
            classifier = checkpoint_model(m, &store)?.1;
            scorer = IgScorer::new(&classifier, m.attribution.steps);
            &scorer
        }
        ModelSource::Oracle => {
            oracle = LabelOracle::new(&users);
            &oracle
        }
        ModelSource::Constant { score } => {
            if !(0.0..=1.0).contains(&score) {
                return Err(CliError::Usage(format!("constant score {score} is not a probability")));
            }
            constant = ConstantModel(score);
            &constant
        }
    };
    let users = select_users(m, users);
    let dir = m.output_dir().to_path_buf();
    let (log_path, snap_path) = (dir.join(DECISIONS_FILE), dir.join(SNAPSHOTS_FILE));
    guard(&[&corpus_path, &store_path], &[log_path.clone(), snap_path.clone()])?;
    start(m)?;

    let exec = Executor::new(m.workers);
    let out = run_simulation(
        &users,
        &store,
        &m.policy,
        model,
        m.simulation.max_rounds,
        &m.simulation.ranking_rounds,
        &exec,
    )?;
    write_decision_log(&log_path, &out.events)?;
    let rows: Vec<SnapshotRow> = out
        .snapshots
        .iter()
        .flat_map(|(round, scores)| {
            scores.iter().map(|(u, s)| SnapshotRow {
                round: *round,
                user_id: u,
                score: *s,
            })
        })
        .collect();
    write_jsonl(&snap_path, &rows)?;
    m.paths.decisions = Some(log_path);
    m.write(&dir)?;
    let fired = setrisk_core::sim::final_decisions(&out.events)
        .iter()
        .filter(|d| d.decision)
        .count();
    Ok(format!(
        "{} users, {} rounds, {} posts read, {} flagged -> {}",
        users.len(),
        out.rounds,
        out.posts_consumed,
        fired,
        dir.display()
    ))
}

pub fn evaluate(m: &mut RunManifest) -> CliResult<String> {
    let log_path = m.input("decisions", &m.paths.decisions)?;
    let corpus_path = m.input("corpus", &m.paths.corpus)?;
    if m.costs.c_fp.is_some_and(|c| !(c >= 0.0)) || !(m.costs.latency_p > 0.0) {
        return Err(CliError::Usage("costs must be non-negative and latency_p positive".into()));
    }
    let dir = m.output_dir().to_path_buf();
    let (json_path, txt_path) = (dir.join(METRICS_JSON), dir.join(METRICS_TXT));
    guard(&[&log_path, &corpus_path], &[json_path.clone(), txt_path.clone()])?;
    start(m)?;
    let events = read_decision_log(&log_path)?;
    let labels: HashMap<String, Label> = load_corpus(&corpus_path)?
        .into_iter()
        .map(|u| (u.user_id, u.label))
        .collect();
    let report = score_log(&events, &labels, &m.costs, &m.simulation.ranking_rounds)?;
    let name = log_path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    let rows = [(name.as_str(), &report)];
    let mut text = MetricsReport::decision_table(&rows);
    if !report.ranking.is_empty() {
        text.push('\n');
        text.push_str(&MetricsReport::ranking_table(&rows));
    }
    write_json(&json_path, &report)?;
    write_text(&txt_path, &text)?;
    Ok(text)
}

pub fn attribute(m: &mut RunManifest) -> CliResult<String> {
    if m.attribution.steps == 0 || m.policy.k == 0 {
        return Err(CliError::Usage("steps and k must be positive".into()));
    }
    let (corpus_path, users, store_path, store) = load_inputs(m)?;
    let (ckpt_path, model) = checkpoint_model(m, &store)?;
    let selected: Vec<&UserRecord> = if m.attribution.users.is_empty() {
        users.iter().filter(|u| u.label.is_positive()).collect()
    } else {
        m.attribution
            .users
            .iter()
            .map(|id| {
                users
                    .iter()
                    .find(|u| &u.user_id == id)
                    .ok_or_else(|| Error::Data(format!("user {id} not in corpus")))
            })
            .collect::<Result<_, _>>()?
    };
    let dir = m.output_dir().to_path_buf();
    let (jsonl, txt) = (dir.join(ATTRIBUTION_JSONL), dir.join(ATTRIBUTION_TXT));
    guard(&[&corpus_path, &store_path, &ckpt_path], &[jsonl.clone(), txt.clone()])?;
    start(m)?;

    let scorer = IgScorer::new(&model, m.attribution.steps);
    let k = m.policy.k;
    let exec = Executor::new(m.workers);
    let ranked: Vec<Vec<RankedPost>> = exec.try_map(&selected, |u| rank_posts(u, &store, &scorer, k))?;
    let mut report = String::new();
    for (u, r) in selected.iter().zip(&ranked) {
        report.push_str(&render_report(r, Some(u)));
        report.push('\n');
    }
    let rows: Vec<&RankedPost> = ranked.iter().flatten().collect();
    write_jsonl(&jsonl, &rows)?;
    write_text(&txt, &report)?;
    Ok(format!("{} users, {} posts ranked -> {}", selected.len(), rows.len(), dir.display()))
}

/// One epoch of one ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub store: String,
    pub k: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub store: String,
    pub encoder: String,
    pub k: usize,
    pub best_val_f1: f64,
    pub best_epoch: usize,
}

/// Best validation F1 per K (rows) and store (columns).
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut stores: Vec<&str> = Vec::new();
    let mut ks: Vec<usize> = Vec::new();
    for c in cells {
        if !stores.contains(&c.store.as_str()) {
            stores.push(&c.store);
        }
        if !ks.contains(&c.k) {
            ks.push(c.k);
        }
    }
    let mut s = format!("{:>5}", "K");
    for st in &stores {
        let _ = write!(s, " {st:>18}");
    }
    s.push('\n');
    for k in ks {
        let _ = write!(s, "{k:>5}");
        for st in &stores {
            match cells.iter().find(|c| c.k == k && c.store == *st) {
                Some(c) => {
                    let _ = write!(s, " {:>18.4}", c.best_val_f1);
                }
                None => {
                    let _ = write!(s, " {:>18}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn ablate(m: &mut RunManifest) -> CliResult<String> {
    if m.ablation.ks.is_empty() || m.ablation.ks.contains(&0) {
        return Err(CliError::Usage("ablation needs positive K values".into()));
    }
    let corpus_path = m.input("corpus", &m.paths.corpus)?;
    let store_paths: Vec<PathBuf> = if m.ablation.stores.is_empty() {
        vec![m.input("embeddings", &m.paths.embeddings)?]
    } else {
        m.ablation
            .stores
            .iter()
            .map(|p| m.input("store", &Some(p.clone())))
            .collect::<CliResult<_>>()?
    };
    m.train.validate()?;
    let users = load_corpus(&corpus_path)?;
    let dir = m.output_dir().to_path_buf();
    let outputs = [dir.join(ABLATION_JSONL), dir.join(ABLATION_SUMMARY), dir.join(ABLATION_TXT)];
    let mut inputs: Vec<&Path> = store_paths.iter().map(PathBuf::as_path).collect();
    inputs.push(&corpus_path);
    guard(&inputs, &outputs)?;
    start(m)?;

    let exec = Executor::new(m.workers);
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for path in &store_paths {
        let store = EmbeddingStore::read(path)?;
        let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let mut mcfg = m.model.clone();
        mcfg.input_dim = store.dimension();
        mcfg.validate()?;
        for &k in &m.ablation.ks {
            let mut tcfg = m.train.clone();
            tcfg.k = k;
            log::info!("ablation cell store={name} K={k}");
            let state = setrisk_core::training::train(&users, &store, mcfg.clone(), tcfg, &exec)?;
            records.extend(state.log.iter().map(|r| AblationRecord {
                store: name.clone(),
                k,
                epoch: r.epoch,
                lr: r.lr,
                train_loss: r.train_loss,
                val_f1: r.val_f1,
            }));
            cells.push(AblationCell {
                store: name.clone(),
                encoder: store.encoder_name.clone(),
                k,
                best_val_f1: state.best_val_f1,
                best_epoch: state.best_epoch,
            });
        }
    }
    let table = ablation_table(&cells);
    write_jsonl(&outputs[0], &records)?;
    write_json(&outputs[1], &cells)?;
    write_text(&outputs[2], &table)?;
    Ok(table)
}
