use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use setrisk_core::sim::PolicyKind;

use crate::manifest::{ModelSource, RunManifest, UserSplit, OUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "setrisk", version, about = "Set-transformer early risk detection at desk scale")]
pub struct Cli {
    /// Manifest to start from; flags override its values.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[arg(long, global = true, help = format!("Output directory [fallback: ${OUT_DIR_ENV}, then ./setrisk-out]"))]
    pub out: Option<PathBuf>,

    /// Worker threads for per-user work (0 = one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signal corpus and its embedding store.
    GenSynth(GenSynthArgs),
    /// Train a set classifier.
    Train(TrainArgs),
    /// Replay users post by post and log streaming decisions.
    Simulate(SimulateArgs),
    /// Score a decision log against gold labels.
    Evaluate(EvaluateArgs),
    /// Rank each user's posts by integrated-gradients attribution.
    Attribute(AttributeArgs),
    /// Validation-F1 curves over texts per user and embedding stores.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::Train(_) => "train",
            Command::Simulate(_) => "simulate",
            Command::Evaluate(_) => "evaluate",
            Command::Attribute(_) => "attribute",
            Command::Ablate(_) => "ablate",
        }
    }
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_some<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub n_pos: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub posts_min: Option<usize>,
    #[arg(long)]
    pub posts_max: Option<usize>,
    #[arg(long)]
    pub signal_rate: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub negative_signal_rate: Option<f64>,
    #[arg(long)]
    pub user_style: Option<f64>,
}

impl GenSynthArgs {
    fn apply(&self, m: &mut RunManifest) {
        let s = &mut m.synthetic;
        set(&mut s.n_pos, &self.n_pos);
        set(&mut s.n_neg, &self.n_neg);
        set(&mut s.dimension, &self.dim);
        set(&mut s.posts_min, &self.posts_min);
        set(&mut s.posts_max, &self.posts_max);
        set(&mut s.signal_rate, &self.signal_rate);
        set(&mut s.noise_sigma, &self.noise_sigma);
        set(&mut s.negative_signal_rate, &self.negative_signal_rate);
        set(&mut s.user_style, &self.user_style);
    }
}

/// Model and optimizer settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Texts sampled per user.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub cycle_epochs: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, m: &mut RunManifest) {
        set_some(&mut m.paths.corpus, &self.corpus);
        let t = &mut m.train;
        set(&mut t.k, &self.k);
        set(&mut t.epochs, &self.epochs);
        set(&mut t.effective_batch_size, &self.batch_size);
        set(&mut t.lr_min, &self.lr_min);
        set(&mut t.lr_max, &self.lr_max);
        set(&mut t.cycle_epochs, &self.cycle_epochs);
        set(&mut t.weight_decay, &self.weight_decay);
        set(&mut t.val_fraction, &self.val_fraction);
        let c = &mut m.model;
        set(&mut c.d_model, &self.d_model);
        set(&mut c.n_layers, &self.layers);
        set(&mut c.n_heads, &self.heads);
        set(&mut c.d_ff, &self.d_ff);
        set(&mut c.dropout_rate, &self.dropout);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Training state (`state.ckpt`) to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// checkpoint, oracle or constant:<p>.
    #[arg(long)]
    pub model: Option<ModelSource>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Posts fed to the model per decision.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long, value_enum)]
    pub users: Option<UserSplit>,
    #[arg(long, value_delimiter = ',')]
    pub rounds: Option<Vec<usize>>,
    /// Integration steps for IG-selected windows.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum PolicyArg {
    RecentK,
    IgSelectedK,
    PostLevel,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::RecentK => PolicyKind::RecentK,
            PolicyArg::IgSelectedK => PolicyKind::IgSelectedK,
            PolicyArg::PostLevel => PolicyKind::PostLevel,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    /// Corpus holding the gold labels.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// False-positive cost (default: share of positive users).
    #[arg(long)]
    pub c_fp: Option<f64>,
    #[arg(long)]
    pub c_fn: Option<f64>,
    #[arg(long)]
    pub c_tp: Option<f64>,
    #[arg(long)]
    pub latency_p: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub rounds: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// User to report (repeatable); all positive users by default.
    #[arg(long = "user")]
    pub users: Vec<String>,
    /// Window size for scoring long histories.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Embedding store to compare (repeatable).
    #[arg(long = "store")]
    pub stores: Vec<PathBuf>,
}

impl Cli {
    /// Layers the flags over `m`.
    pub fn apply(&self, m: &mut RunManifest) {
        set_some(&mut m.paths.output_dir, &self.out);
        set(&mut m.workers, &self.workers);
        set(&mut m.seed, &self.seed);
        match &self.command {
            Command::GenSynth(a) => a.apply(m),
            Command::Train(a) => {
                a.train.apply(m);
                set_some(&mut m.paths.embeddings, &a.embeddings);
                set_some(&mut m.paths.resume, &a.resume);
            }
            Command::Simulate(a) => {
                set_some(&mut m.paths.corpus, &a.corpus);
                set_some(&mut m.paths.embeddings, &a.embeddings);
                set_some(&mut m.paths.checkpoint, &a.checkpoint);
                set(&mut m.simulation.model, &a.model);
                if let Some(p) = a.policy {
                    m.policy.kind = p.into();
                }
                set(&mut m.policy.k, &a.k);
                set(&mut m.policy.threshold, &a.threshold);
                set(&mut m.simulation.max_rounds, &a.max_rounds);
                set(&mut m.simulation.users, &a.users);
                set(&mut m.simulation.ranking_rounds, &a.rounds);
                set(&mut m.attribution.steps, &a.steps);
            }
            Command::Evaluate(a) => {
                set_some(&mut m.paths.decisions, &a.decisions);
                set_some(&mut m.paths.corpus, &a.corpus);
                if a.c_fp.is_some() {
                    m.costs.c_fp = a.c_fp;
                }
                set(&mut m.costs.c_fn, &a.c_fn);
                set(&mut m.costs.c_tp, &a.c_tp);
                set(&mut m.costs.latency_p, &a.latency_p);
                set(&mut m.simulation.ranking_rounds, &a.rounds);
            }
            Command::Attribute(a) => {
                set_some(&mut m.paths.corpus, &a.corpus);
                set_some(&mut m.paths.embeddings, &a.embeddings);
                set_some(&mut m.paths.checkpoint, &a.checkpoint);
                if !a.users.is_empty() {
                    m.attribution.users.clone_from(&a.users);
                }
                set(&mut m.policy.k, &a.k);
                set(&mut m.attribution.steps, &a.steps);
            }
            Command::Ablate(a) => {
                a.train.apply(m);
                set(&mut m.ablation.ks, &a.ks);
                if !a.stores.is_empty() {
                    m.ablation.stores.clone_from(&a.stores);
                }
            }
        }
    }
}
