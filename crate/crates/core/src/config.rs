//! Run configuration: one TOML file with a section per pipeline stage. The
//! SHA-256 of its canonical JSON form tags every artifact a run writes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::AugmentSource;
use crate::bias_audit::{BiasKind, DEFAULT_CWB_WORDS, DEFAULT_MIN_COUNT, DEFAULT_NOT_OVERLAP_THRESHOLD};
use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train_eval::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev_matched: Option<PathBuf>,
    pub dev_mismatched: Option<PathBuf>,
    /// Word vectors in GloVe text format; random initialization when absent.
    pub embeddings: Option<PathBuf>,
    pub min_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            dev_matched: None,
            dev_mismatched: None,
            embeddings: None,
            min_freq: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub min_count: usize,
    pub threshold: f64,
    pub top_k: usize,
    /// Appended to the selected words regardless of their statistics.
    pub extra_words: Vec<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            min_count: DEFAULT_MIN_COUNT,
            threshold: 0.5,
            top_k: 4,
            extra_words: vec!["not".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub words: Vec<String>,
    pub target_per_class: usize,
    pub not_overlap_threshold: f64,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            words: DEFAULT_CWB_WORDS.iter().map(|w| w.to_string()).collect(),
            target_per_class: 550,
            not_overlap_threshold: DEFAULT_NOT_OVERLAP_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub bias: BiasKind,
    pub source: AugmentSource,
    pub n_additional: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            bias: BiasKind::Cwb,
            source: AugmentSource::Synthetic,
            n_additional: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub audit: AuditConfig,
    pub extract: ExtractConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.explain.validate()?;
        self.synth.validate()?;
        if !(self.audit.threshold > 0.0 && self.audit.threshold < 1.0) {
            return Err(Error::Config("audit.threshold must lie in (0, 1)".into()));
        }
        if self.extract.target_per_class == 0 {
            return Err(Error::Config("extract.target_per_class must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn sections_parse_and_defaults_fill_in() {
        let cfg = RunConfig::from_toml_str(
            r#"
[data]
train = "train.jsonl"

[model]
kind = "hex"

[model.encoder]
d_h = 64

[train]
lr = 0.001
max_epochs = 3
"#,
        )
        .unwrap();
        assert_eq!(cfg.data.train.as_deref(), Some(Path::new("train.jsonl")));
        assert_eq!(cfg.model.kind, ModelKind::Hex);
        assert_eq!(cfg.model.encoder.d_h, 64);
        assert_eq!(cfg.model.encoder.d_e, 300);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.extract.target_per_class, 550);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("[data]\ntrian = 'x'\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_str("[nonsense]\n").is_err());
        for nested in [
            "[train]\nlearning_rate = 1\n",
            "[model.encoder]\nd_hidden = 4\n",
            "[model.grl]\nlamda = 1\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(nested), Err(Error::Config(_))),
                "{nested}"
            );
        }
        let cfg = RunConfig::from_toml_str("[model.grl]\nvariant = \"basic\"\nlambda = 0.25\n").unwrap();
        assert_eq!(cfg.model.grl.loss.lambda, 0.25);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let text = a.to_toml().unwrap();
        let b = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.train.seed = 1;
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
