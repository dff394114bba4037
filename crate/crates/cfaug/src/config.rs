//! Pipeline configuration file.
//!
//! A TOML document with one table per stage. Every field has a default, so
//! an empty file is a valid config. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use cfaug_core::judge::DEFAULT_LEXICON_MARGIN;
use cfaug_core::model::DisAeConfig;
use cfaug_core::prompt::{DEFAULT_MAX_EDIT, DEFAULT_NUM_EXAMPLES, DEFAULT_TEMPERATURE};
use cfaug_core::reproduce::FilterConfig;
use cfaug_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {}: {message}", path.display())]
    Read { path: PathBuf, message: String },
    #[error("invalid override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Hand-written seed demonstrations (optional prompt file).
    pub seed_prompt: Option<PathBuf>,
    /// Items for prompt optimization; defaults to the first m+n rating-5
    /// corpus reviews.
    pub evalset: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub prompt: PathBuf,
    pub pairs: PathBuf,
    pub augmented: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/reviews.jsonl".into(),
            seed_prompt: None,
            evalset: None,
            annotations: None,
            prompt: "out/prompt.toml".into(),
            pairs: "out/pairs.jsonl".into(),
            augmented: "out/augmented.jsonl".into(),
            checkpoints: "out/checkpoints".into(),
            reports: "out/reports".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.prompt,
            &mut self.pairs,
            &mut self.augmented,
            &mut self.checkpoints,
            &mut self.reports,
        ] {
            fix(p);
        }
        for p in [&mut self.seed_prompt, &mut self.evalset, &mut self.annotations]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("model.ckpt")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("base.ckpt")
    }

    pub fn augmented_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("augmented.ckpt")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub min_freq: usize,
    /// Cap on rating-5 reviews sent for rewriting (none = all).
    pub max_rewrites: Option<usize>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            min_freq: cfaug_core::corpus::DEFAULT_MIN_FREQ,
            max_rewrites: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Number of demonstrations the seed prompt is expected to hold.
    pub k: usize,
    pub temperature: f64,
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub model: String,
    pub endpoint: Option<String>,
    pub max_attempts: usize,
    pub max_edit: f64,
    pub concurrency: usize,
    pub timeout_secs: u64,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_NUM_EXAMPLES,
            temperature: DEFAULT_TEMPERATURE,
            m: 40,
            n: 10,
            delta: 0.8,
            epsilon: 0.1,
            model: "gpt-4o-mini".into(),
            endpoint: None,
            max_attempts: 3,
            max_edit: DEFAULT_MAX_EDIT,
            concurrency: 4,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceSection {
    pub per_product_quota: usize,
    pub max_parents: Option<usize>,
}

impl Default for ReproduceSection {
    fn default() -> Self {
        Self {
            per_product_quota: 10,
            max_parents: Some(200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Held-out pairs for counterfactual reconstruction (defaults to the
    /// training pairs file).
    pub pairs: Option<PathBuf>,
    /// Review groups to summarize, one product id per group.
    pub groups: Option<PathBuf>,
    pub lexicon_margin: f64,
    /// Epochs for the plain autoencoders used as summarizers (defaults to
    /// the train section).
    pub summarizer_epochs: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            pairs: None,
            groups: None,
            lexicon_margin: DEFAULT_LEXICON_MARGIN,
            summarizer_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub prompt: PromptSection,
    pub model: DisAeConfig,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub reproduce: ReproduceSection,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            prompt: PromptSection::default(),
            model: DisAeConfig::default(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            reproduce: ReproduceSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

/// Parses `section.key=value`; the value is read as a TOML literal, falling
/// back to a plain string.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.into()))?;
    let keys: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if keys.iter().any(String::is_empty) {
        return Err(ConfigError::Override(s.into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.into()));
    Ok((keys, value))
}

fn apply_override(doc: &mut toml::Table, keys: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut table = doc;
    for k in parents {
        table = table
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{} is not a table", keys.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (if given), applies overrides, resolves relative paths
    /// and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut doc, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                let doc: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Read {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (doc, base)
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            let (keys, value) = parse_override(o)?;
            apply_override(&mut doc, &keys, value)?;
        }
        let mut cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.paths.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let p = &self.prompt;
        if !(p.delta > 0.0 && p.delta <= 1.0) {
            return bad(format!("prompt.delta must be in (0, 1], got {}", p.delta));
        }
        if !(p.epsilon > 0.0 && p.epsilon <= 1.0) {
            return bad(format!("prompt.epsilon must be in (0, 1], got {}", p.epsilon));
        }
        if !(0.0..=1.0).contains(&p.temperature) {
            return bad(format!("prompt.temperature must be in [0, 1], got {}", p.temperature));
        }
        if p.n == 0 {
            return bad("prompt.n must be >= 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filter.validate().map_err(ConfigError::Invalid)?;
        let mut model = self.model.clone();
        // vocab_size comes from the corpus; any positive value passes here.
        model.vocab_size = model.vocab_size.max(4);
        model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// The effective configuration as TOML, for logs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
