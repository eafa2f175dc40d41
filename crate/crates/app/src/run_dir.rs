//! Run directory layout.
//!
//! | file | written by |
//! |---|---|
//! | `config.resolved.toml` | every command that writes here |
//! | `model.json`, `vocab.json`, `cache.json`, `train_log.jsonl` | `train`, `train-baseline` |
//! | `eval_report.jsonl`, `purity.json` | `eval` |
//! | `sweep.jsonl`, `sweep.tsv` | `sweep-k` |
//! | `intents.jsonl`, `graph.jsonl`, `graph.dot`, `duplicates.json` | `export-tree` |
//! | `manifest.json` | refreshed after each write |
//!
//! The manifest maps every other file to its SHA-256 digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lstn::corpus::Vocabulary;
use lstn::inference::ResponseCache;
use lstn::Lstn;
use sha2::{Digest, Sha256};

pub const CONFIG: &str = "config.resolved.toml";
pub const MODEL: &str = "model.json";
pub const VOCAB: &str = "vocab.json";
pub const CACHE: &str = "cache.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.jsonl";
pub const PURITY: &str = "purity.json";
pub const SWEEP_JSONL: &str = "sweep.jsonl";
pub const SWEEP_TSV: &str = "sweep.tsv";
pub const INTENTS: &str = "intents.jsonl";
pub const GRAPH_JSONL: &str = "graph.jsonl";
pub const GRAPH_DOT: &str = "graph.dot";
pub const DUPLICATES: &str = "duplicates.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).with_context(|| format!("creating run directory {}", self.root.display()))
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        self.create()?;
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn read(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn load_model(&self) -> Result<Lstn> {
        Ok(Lstn::load(&self.path(MODEL))?)
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        let p = self.path(VOCAB);
        serde_json::from_str(&self.read(VOCAB)?).with_context(|| format!("parsing {}", p.display()))
    }

    pub fn load_cache(&self) -> Result<ResponseCache> {
        Ok(ResponseCache::load(&self.path(CACHE))?)
    }

    /// Digests of every file except the manifest, by name.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let entries =
            std::fs::read_dir(&self.root).with_context(|| format!("listing {}", self.root.display()))?;
        for e in entries {
            let e = e?;
            let name = e.file_name().to_string_lossy().into_owned();
            if name == MANIFEST || !e.file_type()?.is_file() {
                continue;
            }
            let bytes = std::fs::read(e.path()).with_context(|| format!("reading {}", e.path().display()))?;
            out.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
        Ok(out)
    }

    pub fn write_manifest(&self) -> Result<()> {
        let files = self.digests()?;
        let body = serde_json::to_string_pretty(&serde_json::json!({ "files": files }))?;
        self.write(MANIFEST, body + "\n")
    }
}
