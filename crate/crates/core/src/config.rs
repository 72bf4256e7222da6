//! Pipeline configuration: a TOML file with one table per stage. Every
//! table rejects unknown keys; missing keys take their defaults.
//!
//! ```toml
//! [folds]
//! m = 5
//! seed = 42
//!
//! [head]
//! meta_hidden = 256
//! fusion_dim = 1024
//!
//! [head.train]
//! epochs = 50
//! learning_rate = 1e-5
//!
//! [tta]
//! mode = "ss"
//! crop = 224
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{Scoring, DEFAULT_GUARD};
use crate::head::{HeadDims, TrainConfig};
use crate::preprocess::PreprocessConfig;
use crate::tta::DEFAULT_RR_SCALES;

/// Environment variable consulted when no `--config` is given.
pub const CONFIG_ENV: &str = "DERMPIPE_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldsConfig {
    pub m: usize,
    pub seed: u64,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        Self { m: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Exponent of the inverse-frequency class weights.
    pub k: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { k: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Expected feature dimension; taken from the feature file when unset.
    pub feature_dim: Option<usize>,
    pub meta_hidden: usize,
    pub fusion_dim: usize,
    pub train: TrainConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            feature_dim: None,
            meta_hidden: 256,
            fusion_dim: 1024,
            train: TrainConfig::default(),
        }
    }
}

impl HeadConfig {
    pub fn dims(&self, feature_dim: usize) -> Result<HeadDims, ConfigError> {
        if let Some(f) = self.feature_dim {
            if f != feature_dim {
                return Err(ConfigError::Invalid(format!(
                    "head.feature_dim = {f} but the features have dimension {feature_dim}"
                )));
            }
        }
        Ok(HeadDims::new(feature_dim, self.meta_hidden, self.fusion_dim))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    /// 36 same-size crops.
    Ss,
    /// 4 scaled center crops x 4 flips.
    Rr,
    /// Average whatever views the feature file holds.
    None,
}

impl TtaMode {
    pub fn code(self) -> &'static str {
        match self {
            TtaMode::Ss => "ss",
            TtaMode::Rr => "rr",
            TtaMode::None => "none",
        }
    }

    /// Views per image the mode expects, if fixed.
    pub fn views(self) -> Option<usize> {
        match self {
            TtaMode::Ss => Some(crate::tta::SS_VIEWS),
            TtaMode::Rr => Some(crate::tta::RR_VIEWS),
            TtaMode::None => None,
        }
    }
}

impl std::str::FromStr for TtaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ss" => Ok(TtaMode::Ss),
            "rr" => Ok(TtaMode::Rr),
            "none" => Ok(TtaMode::None),
            other => Err(format!("unknown TTA mode `{other}` (ss | rr | none)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub mode: TtaMode,
    /// Same-size crop side.
    pub crop: usize,
    /// Network input side for resized crops.
    pub input: usize,
    pub scales: [f64; 4],
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            mode: TtaMode::Ss,
            crop: 224,
            input: 224,
            scales: DEFAULT_RR_SCALES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Configuration directories; resolved relative to the working directory.
    pub pool: Vec<PathBuf>,
    pub guard: usize,
    pub scoring: Scoring,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            pool: Vec::new(),
            guard: DEFAULT_GUARD,
            scoring: Scoring::Pooled,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub folds: FoldsConfig,
    pub loss: LossConfig,
    pub head: HeadConfig,
    pub tta: TtaConfig,
    pub ensemble: EnsembleConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.preprocess.validate() {
            return invalid(format!("[preprocess] {e}"));
        }
        if self.folds.m < 2 {
            return invalid(format!("[folds] m = {} (need >= 2)", self.folds.m));
        }
        if !(self.loss.k >= 0.0 && self.loss.k.is_finite()) {
            return invalid(format!("[loss] k = {} (need >= 0)", self.loss.k));
        }
        if self.head.meta_hidden == 0 || self.head.fusion_dim == 0 {
            return invalid("[head] layer widths must be positive".into());
        }
        if let Err(e) = self.head.train.validate() {
            return invalid(format!("[head.train] {e}"));
        }
        if self.tta.crop == 0 || self.tta.input == 0 {
            return invalid("[tta] crop and input must be positive".into());
        }
        if self.tta.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return invalid("[tta] scales must lie in (0, 1]".into());
        }
        if self.ensemble.guard == 0 {
            return invalid("[ensemble] guard must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_toml(&text, &path.display().to_string())?)
    }

    /// Load from `explicit`, else from `$DERMPIPE_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> crate::Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml(), "mem").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(PipelineConfig::from_toml("", "mem").unwrap(), cfg);
    }

    #[test]
    fn partial_tables() {
        let cfg = PipelineConfig::from_toml(
            "[folds]\nseed = 9\n[head.train]\nepochs = 3\n[tta]\nmode = \"rr\"\n[ensemble]\nscoring = \"per-fold-mean\"\n",
            "mem",
        )
        .unwrap();
        assert_eq!(cfg.folds, FoldsConfig { m: 5, seed: 9 });
        assert_eq!(cfg.head.train.epochs, 3);
        assert_eq!(cfg.head.train.batch_size, 20);
        assert_eq!(cfg.tta.mode, TtaMode::Rr);
        assert_eq!(cfg.ensemble.scoring, Scoring::PerFoldMean);
    }

    #[test]
    fn unknown_keys_carry_location() {
        let err = PipelineConfig::from_toml("[folds]\nm = 5\nsede = 1\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml"), "{msg}");
        assert!(msg.contains("sede"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(PipelineConfig::from_toml("[nope]\n", "c").is_err());
        assert!(PipelineConfig::from_toml("[folds]\nm = 1\n", "c").is_err());
    }
}
