use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icl_core::data::{
    generate_synthetic, prepare_users, read_jsonl, read_labels, SyntheticConfig, Truncation, Vocabulary,
    WindowBounds, WindowedUser,
};
use icl_core::eval::EvalConfig;
use icl_core::model::GradSuiteConfig;
use icl_core::train::TrainConfig;
use icl_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON Lines dataset; synthetic data is generated when absent.
    pub dataset: Option<PathBuf>,
    /// Tab-separated `user_id -> class` labels for the probe.
    pub labels: Option<PathBuf>,
    /// Window boundaries, required with `dataset`.
    pub bounds: Option<WindowBounds>,
    pub truncation: Truncation,
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            labels: None,
            bounds: None,
            truncation: Truncation::default(),
            max_vocab: 50_000,
        }
    }
}

/// Everything a command reads. The top-level seed drives every random
/// choice; sections may not carry their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub gradcheck: GradSuiteConfig,
}

const SEEDED_SECTIONS: [&str; 3] = ["synthetic", "train", "gradcheck"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for section in SEEDED_SECTIONS {
            if value.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::Config(format!("{section}.seed is not allowed, set the top-level seed")));
            }
        }
        if value.pointer("/eval/probe/seed").is_some() {
            return Err(Error::Config("eval.probe.seed is not allowed, set the top-level seed".into()));
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    /// Read `path`; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.dataset, &mut cfg.data.labels, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = seed;
        self.train.seed = seed;
        self.eval.probe.seed = seed;
        self.gradcheck.seed = seed;
    }

    /// Canonical JSON with every default filled in.
    pub fn to_canonical_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

pub struct Loaded {
    pub users: Vec<WindowedUser>,
    pub labels: Option<BTreeMap<String, usize>>,
    pub vocab: Vocabulary,
}

/// Load (or generate) the dataset and window it. A given vocabulary is
/// reused, otherwise one is built from the corpus.
pub fn load_data(cfg: &RunConfig, vocab: Option<Vocabulary>) -> Result<Loaded> {
    let d = &cfg.data;
    match &d.dataset {
        Some(path) => {
            let bounds = d
                .bounds
                .ok_or_else(|| Error::Config("data.bounds is required with data.dataset".into()))?;
            let logs = read_jsonl(path)?;
            let vocab = match vocab {
                Some(v) => v,
                None => Vocabulary::build(logs.iter().flat_map(|l| l.corpus_tokens()), d.max_vocab)?,
            };
            let users = prepare_users(&logs, &bounds, &vocab, &d.truncation)?;
            let labels = d.labels.as_deref().map(read_labels).transpose()?;
            Ok(Loaded { users, labels, vocab })
        }
        None => {
            let ds = generate_synthetic(&cfg.synthetic)?;
            let vocab = match vocab {
                Some(v) => v,
                None => ds.vocabulary(d.max_vocab)?,
            };
            let users = ds.windowed(&vocab, &d.truncation)?;
            Ok(Loaded {
                users,
                labels: Some(ds.labels),
                vocab,
            })
        }
    }
}
