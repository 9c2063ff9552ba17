//! Run manifest: every setting a command needs, serialized next to its
//! outputs so the run can be repeated from that file alone.
//!
//! Values are layered as defaults, then a manifest file, then command-line
//! flags. The top-level `seed` is copied into the section the running
//! command draws randomness from: the synthetic section for `gen-synth`, the
//! training config (sampling, dropout, validation split) otherwise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use setrisk_core::corpus::SyntheticSpec;
use setrisk_core::metrics::{CostConfig, RANKING_ROUNDS};
use setrisk_core::sim::{PolicyKind, RunPolicy, DEFAULT_THRESHOLD};
use setrisk_core::training::TrainConfig;
use setrisk_core::{Error, ModelConfig};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SETRISK_OUT";
pub const DEFAULT_OUT_DIR: &str = "setrisk-out";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_KS: [usize; 6] = [4, 8, 16, 32, 64, 128];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub decisions: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Which scorer drives the streaming simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelSource {
    /// Trained set classifier from `paths.checkpoint`.
    Checkpoint,
    /// Gold labels: positive users score 1, everyone else 0.
    Oracle,
    Constant { score: f64 },
}

impl FromStr for ModelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "checkpoint" => Ok(ModelSource::Checkpoint),
            "oracle" => Ok(ModelSource::Oracle),
            _ => match s.strip_prefix("constant:") {
                Some(v) => v
                    .parse()
                    .map(|score| ModelSource::Constant { score })
                    .map_err(|_| format!("bad constant score {v:?}")),
                None => Err(format!(
                    "unknown model {s:?} (expected checkpoint, oracle or constant:<p>)"
                )),
            },
        }
    }
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSource::Checkpoint => f.write_str("checkpoint"),
            ModelSource::Oracle => f.write_str("oracle"),
            ModelSource::Constant { score } => write!(f, "constant:{score}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum UserSplit {
    All,
    /// The held-out users of the training split for `train.seed`.
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub model: ModelSource,
    pub users: UserSplit,
    pub max_rounds: usize,
    /// Rounds at which scores are snapshotted and ranking metrics reported.
    pub ranking_rounds: Vec<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            model: ModelSource::Checkpoint,
            users: UserSplit::All,
            max_rounds: 2000,
            ranking_rounds: RANKING_ROUNDS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Users to report; every positive user when empty.
    pub users: Vec<String>,
    pub steps: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            users: Vec::new(),
            steps: setrisk_core::attribution::DEFAULT_STEPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub ks: Vec<usize>,
    /// Embedding stores compared against each other; `paths.embeddings`
    /// when empty.
    pub stores: Vec<PathBuf>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            ks: ABLATION_KS.to_vec(),
            stores: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    /// Command that wrote this manifest.
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: RunPolicy,
    pub costs: CostConfig,
    pub simulation: SimulationConfig,
    pub attribution: AttributionConfig,
    pub ablation: AblationConfig,
    /// File this manifest was read from, if any.
    #[serde(skip)]
    pub source: Option<PathBuf>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            command: String::new(),
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            synthetic: SyntheticSpec::new(200, 800, 64, 0),
            model: ModelConfig::new(64),
            train: TrainConfig::default(),
            policy: RunPolicy {
                kind: PolicyKind::RecentK,
                k: 16,
                threshold: DEFAULT_THRESHOLD,
            },
            costs: CostConfig::default(),
            simulation: SimulationConfig::default(),
            attribution: AttributionConfig::default(),
            ablation: AblationConfig::default(),
            source: None,
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid manifest {}: {e}", path.display())))?;
        m.source = Some(path.to_path_buf());
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Applies the seed and fills the output directory from the
    /// environment or the built-in default when neither a flag nor the
    /// manifest set it.
    pub fn resolve(&mut self, command: &str) {
        self.command = command.to_string();
        if command == "gen-synth" {
            self.synthetic.seed = self.seed;
        } else {
            self.train.seed = self.seed;
        }
        if self.paths.output_dir.is_none() {
            let dir = std::env::var_os(OUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from);
            self.paths.output_dir = Some(dir);
        }
    }

    pub fn output_dir(&self) -> &Path {
        self.paths
            .output_dir
            .as_deref()
            .unwrap_or(Path::new(DEFAULT_OUT_DIR))
    }

    /// The input file stored under `name`, which must be set and exist.
    pub fn input(&self, name: &str, value: &Option<PathBuf>) -> CliResult<PathBuf> {
        let path = value
            .clone()
            .ok_or_else(|| CliError::Usage(format!("no {name} path given (flag or manifest)")))?;
        if !path.is_file() {
            return Err(Error::Data(format!("{name} file {} not found", path.display())).into());
        }
        Ok(path)
    }
}
