//! Run configuration: one TOML tree covering data handling, the encoder, the
//! selector, both training stages, and output plumbing. A truncated SHA-256
//! digest of the model-relevant sections stamps every artifact so checkpoints
//! and evaluation configs can be matched.

use crate::data::DataFormat;
use crate::encoder::EncoderConfig;
use crate::gbls::GblsConfig;
use crate::select::SelectorConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Sentinel selecting the built-in sentiment lexicon.
pub const BUNDLED_LEXICON: &str = "bundled";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    pub format: DataFormat,
    /// Train/val/test fractions, must sum to 1.
    pub split: [f64; 3],
    pub stratified: bool,
    /// Token budget per text including the leading CLS slot.
    pub max_len: usize,
    pub min_frequency: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: PathBuf::new(),
            format: DataFormat::Csv,
            split: [0.8, 0.1, 0.1],
            stratified: true,
            max_len: 24,
            min_frequency: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_relative_distance: usize,
    pub reductions: Vec<usize>,
    pub se_ratio: usize,
    pub dropout: f64,
    pub use_se: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_relative_distance: 8,
            reductions: vec![32, 16],
            se_ratio: 4,
            dropout: 0.1,
            use_se: true,
        }
    }
}

impl EncoderSection {
    /// Vocabulary size and sequence budget are runtime facts, not config.
    pub fn to_config(&self, vocab_size: usize, max_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_relative_distance: self.max_relative_distance,
            max_len,
            reductions: self.reductions.clone(),
            se_ratio: self.se_ratio,
            dropout: self.dropout,
            use_se: self.use_se,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub contrastive_weight: f64,
    pub contrastive_temperature: f64,
    pub patience: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let d = crate::train::Stage1Config::default();
        Stage1Section {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            contrastive_weight: d.contrastive_weight,
            contrastive_temperature: d.contrastive_temperature,
            patience: d.patience,
        }
    }
}

impl Stage1Section {
    pub fn to_config(&self) -> crate::train::Stage1Config {
        crate::train::Stage1Config {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            contrastive_weight: self.contrastive_weight,
            contrastive_temperature: self.contrastive_temperature,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GblsSection {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_groups: usize,
    pub dropout: f64,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for GblsSection {
    fn default() -> Self {
        let d = GblsConfig::new(1);
        GblsSection {
            hidden_dim: d.hidden_dim,
            n_heads: d.n_heads,
            n_groups: d.n_groups,
            dropout: d.dropout,
            l2_lambda: d.l2_lambda,
            learning_rate: d.learning_rate,
            max_epochs: d.max_epochs,
            patience: d.patience,
            batch_size: d.batch_size,
        }
    }
}

impl GblsSection {
    /// Input width is known only after selection.
    pub fn to_config(&self, input_dim: usize) -> GblsConfig {
        GblsConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            n_groups: self.n_groups,
            dropout: self.dropout,
            l2_lambda: self.l2_lambda,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Fuse the 4 sentiment scores into the feature vector.
    pub use_sentiment: bool,
    /// Lexicon TSV path, or "bundled" for the built-in one.
    pub lexicon: String,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub selector: SelectorConfig,
    pub stage1: Stage1Section,
    pub gbls: GblsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/out"),
            use_sentiment: true,
            lexicon: BUNDLED_LEXICON.to_string(),
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            selector: SelectorConfig::default(),
            stage1: Stage1Section::default(),
            gbls: GblsSection::default(),
        }
    }
}

/// Only the sections that shape the model function enter the digest: output
/// and dataset paths may move without invalidating a checkpoint, and the seed
/// is baked into the weights themselves.
#[derive(Serialize)]
struct DigestView<'a> {
    use_sentiment: bool,
    encoder: &'a EncoderSection,
    selector: &'a SelectorConfig,
    stage1: &'a Stage1Section,
    gbls: &'a GblsSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Truncated hex SHA-256 over the canonical JSON of the model-relevant
    /// sections; value-sensitive, formatting-insensitive.
    pub fn digest(&self) -> String {
        let view = DigestView {
            use_sentiment: self.use_sentiment,
            encoder: &self.encoder,
            selector: &self.selector,
            stage1: &self.stage1,
            gbls: &self.gbls,
        };
        let canonical = serde_json::to_string(&view).expect("digest view serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Structural and file-existence checks. `require_dataset` is off for
    /// subcommands that take their data from elsewhere.
    pub fn validate(&self, require_dataset: bool) -> Result<(), ConfigError> {
        let s = &self.dataset.split;
        if (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 || s.iter().any(|&r| r < 0.0) {
            return Err(ConfigError::Invalid(format!("split {s:?} must be nonnegative and sum to 1")));
        }
        if self.dataset.max_len < 2 {
            return Err(ConfigError::Invalid("dataset.max_len must be >= 2".into()));
        }
        if self.dataset.min_frequency == 0 {
            return Err(ConfigError::Invalid("dataset.min_frequency must be >= 1".into()));
        }
        if require_dataset {
            if self.dataset.path.as_os_str().is_empty() {
                return Err(ConfigError::Invalid("dataset.path is required".into()));
            }
            if !self.dataset.path.exists() {
                return Err(ConfigError::Invalid(format!(
                    "dataset file {} does not exist",
                    self.dataset.path.display()
                )));
            }
        }
        if self.lexicon != BUNDLED_LEXICON && !Path::new(&self.lexicon).exists() {
            return Err(ConfigError::Invalid(format!(
                "lexicon file {} does not exist",
                self.lexicon
            )));
        }
        self.encoder
            .to_config(3, self.dataset.max_len)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.selector.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.gbls.to_config(1).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.stage1.to_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
