//! Run configuration: one JSON document, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kgfuse_core::hygiene::CorpusScope;
use kgfuse_core::model::{ModelConfig, TrainConfig};
use kgfuse_core::relgraph::SparsifierPolicy;
use kgfuse_core::text::TextVariant;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// α = 1 everywhere.
    #[default]
    Text,
    /// α = 0 everywhere.
    Structural,
    /// α chosen per dataset on validation MRR.
    Hybrid,
}

/// Which queries a pretraining dataset contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// The training graph's own facts.
    #[default]
    TrainGraph,
    /// Test queries against the test graph (harder-style supervision).
    TestQueries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PretrainSource {
    Path(PathBuf),
    Detailed {
        path: PathBuf,
        #[serde(default)]
        queries: QuerySource,
    },
}

impl PretrainSource {
    pub fn path(&self) -> &Path {
        match self {
            Self::Path(p) | Self::Detailed { path: p, .. } => p,
        }
    }

    pub fn queries(&self) -> QuerySource {
        match self {
            Self::Path(_) => QuerySource::TrainGraph,
            Self::Detailed { queries, .. } => *queries,
        }
    }

    fn path_mut(&mut self) -> &mut PathBuf {
        match self {
            Self::Path(p) | Self::Detailed { path: p, .. } => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatConfig {
    /// OpenAI-compatible chat completions endpoint.
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        /// Record every exchange as a replayable fixture here.
        #[serde(default)]
        record_dir: Option<PathBuf>,
    },
    Fixture {
        dir: PathBuf,
    },
    /// No model: every relation keeps its raw identifier.
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        record_file: Option<PathBuf>,
    },
    Fixture {
        path: PathBuf,
    },
    Hashing {
        dim: usize,
    },
}

fn default_key_env() -> String {
    "KGFUSE_API_KEY".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub variant: TextVariant,
    pub sparsifier: SparsifierPolicy,
    pub chat: ChatConfig,
    pub embedder: EmbedderConfig,
    pub max_relations_per_request: usize,
    pub retries: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            variant: TextVariant::LlmRelDesc,
            sparsifier: SparsifierPolicy::default(),
            chat: ChatConfig::Offline,
            embedder: EmbedderConfig::Hashing { dim: 1024 },
            max_relations_per_request: 500,
            retries: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Evaluation datasets (directories with a manifest).
    pub datasets: Vec<PathBuf>,
    /// Pretraining mixture.
    pub pretrain: Vec<PretrainSource>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub text: TextConfig,
    pub alpha: AlphaPolicy,
    /// Root seed; every component derives its stream from it.
    pub seed: u64,
    /// Independent training runs (seeds derived from the root seed).
    pub runs: usize,
    /// Caches, checkpoints, logs and reports live here.
    pub work_dir: PathBuf,
    pub mask_ratio: f64,
    pub leakage_scope: CorpusScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            pretrain: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            text: TextConfig::default(),
            alpha: AlphaPolicy::default(),
            seed: 0,
            runs: 1,
            work_dir: PathBuf::from("runs/default"),
            mask_ratio: 0.25,
            leakage_scope: CorpusScope::Train,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.datasets.iter_mut().for_each(fix);
        cfg.pretrain.iter_mut().for_each(|s| fix(s.path_mut()));
        fix(&mut cfg.work_dir);
        match &mut cfg.text.chat {
            ChatConfig::Fixture { dir } => fix(dir),
            ChatConfig::Http { record_dir: Some(d), .. } => fix(d),
            _ => {}
        }
        match &mut cfg.text.embedder {
            EmbedderConfig::Fixture { path } => fix(path),
            EmbedderConfig::Http { record_file: Some(f), .. } => fix(f),
            _ => {}
        }
        Ok(cfg)
    }

    /// Offline mode: replay chat replies and embeddings from a fixture directory.
    pub fn use_fixtures(&mut self, dir: &Path) {
        self.text.chat = ChatConfig::Fixture { dir: dir.to_path_buf() };
        self.text.embedder = EmbedderConfig::Fixture { path: dir.join("embeddings.json") };
    }

    pub fn uses_text(&self) -> bool {
        self.alpha != AlphaPolicy::Structural
    }

    /// Checks ranges and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.text.sparsifier.validate()?;
        ensure!(self.runs >= 1, "runs must be at least 1");
        ensure!(
            self.mask_ratio > 0.0 && self.mask_ratio < 1.0,
            "mask_ratio must lie in (0, 1), got {}",
            self.mask_ratio
        );
        ensure!(self.text.max_relations_per_request >= 1, "text.max_relations_per_request must be positive");
        for p in self.datasets.iter().map(PathBuf::as_path).chain(self.pretrain.iter().map(PretrainSource::path)) {
            if !p.join("manifest.json").is_file() {
                bail!("dataset {} has no manifest.json", p.display());
            }
        }
        match &self.text.chat {
            ChatConfig::Fixture { dir } if !dir.is_dir() => bail!("chat fixture directory {} does not exist", dir.display()),
            _ => {}
        }
        match &self.text.embedder {
            EmbedderConfig::Fixture { path } if !path.is_file() => {
                bail!("embedding fixture file {} does not exist", path.display())
            }
            EmbedderConfig::Hashing { dim: 0 } => bail!("hashing embedder needs a positive dim"),
            _ => {}
        }
        Ok(())
    }

    pub fn text_dir(&self, dataset: &str) -> PathBuf {
        self.work_dir.join("text").join(dataset)
    }

    pub fn checkpoint(&self, run: usize) -> PathBuf {
        self.work_dir.join("checkpoints").join(format!("run{run}.ckpt"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.work_dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"pretrain": ["a", {"path": "b", "queries": "test_queries"}], "train": {"steps": 5}, "alpha": "hybrid"}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.pretrain[1].queries(), QuerySource::TestQueries);
        assert_eq!(cfg.alpha, AlphaPolicy::Hybrid);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"stepz": 3}"#).is_err());
    }
}
