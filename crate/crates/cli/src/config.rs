use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use persona::corpus::{SplitSpec, SynthConfig};
use persona::encoder::ModelConfig;
use persona::evaluation::{ApConfig, TaskConfig, VerifyConfig};
use persona::tokenizer::TokenizerConfig;
use persona::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// One experiment: where the corpus comes from and how every stage is run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// JSONL corpus; a synthetic corpus is generated when unset.
    pub path: Option<PathBuf>,
    /// Fail on malformed JSONL lines instead of skipping them.
    pub strict: bool,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    /// The last `novel_authors` users (in id order) never enter training.
    pub novel_authors: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            strict: false,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            novel_authors: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub query_len: usize,
    pub target_len: usize,
    /// Every `query_every`-th author contributes a ranking query.
    pub query_every: usize,
    pub seed: u64,
    pub scap_n: usize,
    pub affinity: ApConfig,
    pub verify: VerifyConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let task = TaskConfig::default();
        Self {
            query_len: task.query_len,
            target_len: task.target_len,
            query_every: 3,
            seed: task.seed,
            scap_n: persona::baselines::SCAP_DEFAULT_N,
            affinity: ApConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file (defaults when `path` is None). A `train` section
    /// that sets `total_iters` without `lr_drops` gets drops at 50% and 75%
    /// of the new total.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_value(raw.clone())
            .with_context(|| format!("config {}", path.display()))?;
        let train = raw.get("train");
        let has = |key: &str| train.and_then(|t| t.get(key)).is_some();
        if has("total_iters") && !has("lr_drops") {
            cfg.train.lr_drops = TrainConfig::with_total(cfg.train.total_iters).lr_drops;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.split.validate()?;
        if self.corpus.path.is_none() {
            self.corpus.synth.validate()?;
        }
        self.train.validate()?;
        if self.eval.query_every == 0 || self.eval.query_len == 0 || self.eval.target_len == 0 {
            bail!("eval.query_every, eval.query_len and eval.target_len must be positive");
        }
        Ok(())
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            query_len: self.eval.query_len,
            target_len: self.eval.target_len,
            train_fraction: self.corpus.split.train_fraction,
            query_target_boundary: self.corpus.split.query_target_boundary,
            seed: self.eval.seed,
        }
    }
}

/// Written next to every output: what produced it.
#[derive(Serialize)]
pub struct RunRecord<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a C,
}
