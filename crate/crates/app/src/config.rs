//! Run configuration: a TOML file with one table per concern, overridable
//! from the command line. Every run writes the resolved file next to its
//! outputs.
//!
//! ```toml
//! [paths]
//! corpus = "data/synth/corpus.jsonl"
//! run_dir = "runs/synth"
//!
//! [train]
//! num_states = 8
//! learning_rate = 0.01
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lstn::baseline::SplitConfig;
use lstn::corpus::CorpusFormat;
use lstn::em::TrainConfig;
use lstn::inference::BeamConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub format: CorpusFormat,
    pub lexicon: Option<PathBuf>,
    /// Gold state labels for synthetic corpora; enables the purity score.
    pub gold: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            format: CorpusFormat::Jsonl,
            lexicon: None,
            gold: None,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam: BeamConfig,
    /// Split evaluated by `eval`.
    pub split: String,
    /// Keep per-dialog scores in the written report.
    pub per_dialog: bool,
    /// Score state purity when gold labels are configured.
    pub purity: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            split: "test".into(),
            per_dialog: true,
            purity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub idle_timeout_secs: u64,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            idle_timeout_secs: 1800,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub min_edge_count: usize,
    pub top_r: usize,
    pub duplicate_threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            min_edge_count: 1,
            top_r: 3,
            duplicate_threshold: lstn::interpret::DEFAULT_DUPLICATE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_values: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Machine description; the built-in weather machine when absent.
    pub machine: Option<PathBuf>,
    pub dialogs: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            machine: None,
            dialogs: 500,
            max_turns: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub min_count: usize,
    pub train: TrainConfig,
    pub baseline: SplitConfig,
    pub eval: EvalConfig,
    pub graph: GraphConfig,
    pub sweep: SweepConfig,
    pub synth: SynthConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            min_count: 1,
            train: TrainConfig::default(),
            baseline: SplitConfig::default(),
            eval: EvalConfig::default(),
            graph: GraphConfig::default(),
            sweep: SweepConfig::default(),
            synth: SynthConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
