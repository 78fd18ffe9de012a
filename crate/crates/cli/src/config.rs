//! Declarative experiment description read from TOML.

use std::path::{Path, PathBuf};

use fusehead::fusion::FusionVariant;
use fusehead::head::HeadConfig;
use fusehead::model::ModelConfig;
use fusehead::training::TrainConfig;
use fusehead::Error;
use serde::{Deserialize, Serialize};

pub const DATA_ENV: &str = "FUSEHEAD_DATA";
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `manifest.csv` and `features.fcache`. Falls back to
    /// `$FUSEHEAD_DATA`.
    pub data_dir: Option<PathBuf>,
    pub run_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: Analysis,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub fusion: FusionVariant,
    /// Defaults to the feature width of the data.
    pub input_dim: Option<usize>,
    #[serde(default)]
    pub head: HeadSection,
}

/// Overrides of the head sizes. Unset fields derive from `d`, which itself
/// defaults to the variant's standard width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub d: Option<usize>,
    pub lstm_hidden: Option<usize>,
    pub mlp_width: Option<usize>,
    pub severity_embed_dim: Option<usize>,
    pub adapter_rank: Option<usize>,
    pub conv_kernel: Option<usize>,
}

impl HeadSection {
    pub fn resolve(&self, default_d: usize) -> HeadConfig {
        let base = HeadConfig::with_d(self.d.unwrap_or(default_d));
        HeadConfig {
            d: base.d,
            lstm_hidden: self.lstm_hidden.unwrap_or(base.lstm_hidden),
            mlp_width: self.mlp_width.unwrap_or(base.mlp_width),
            severity_embed_dim: self.severity_embed_dim.unwrap_or(base.severity_embed_dim),
            adapter_rank: self.adapter_rank.unwrap_or(base.adapter_rank),
            conv_kernel: self.conv_kernel.unwrap_or(base.conv_kernel),
        }
    }
}

/// Optimization settings; the per-run seed comes from `seeds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub folds: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self { lr: d.lr, weight_decay: d.weight_decay, batch_size: d.batch_size, clip_norm: d.clip_norm, epochs: d.epochs, folds: d.folds }
    }
}

impl TrainSection {
    pub fn to_train_config(self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            epochs: self.epochs,
            folds: self.folds,
            ..TrainConfig::default()
        }
    }
}

/// Reports produced by `evaluate` without extra flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Analysis {
    pub severity: bool,
    pub system: bool,
    pub shift_sweep: bool,
    pub params: bool,
}

impl Default for Analysis {
    fn default() -> Self {
        Self { severity: true, system: true, shift_sweep: false, params: false }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<(Self, String), Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.run_dir = base.join(&cfg.run_dir);
        cfg.data_dir = cfg.data_dir.map(|d| base.join(d));
        Ok((cfg, text))
    }

    pub fn resolve_data_dir(&self) -> Result<PathBuf, Error> {
        match (&self.data_dir, std::env::var_os(DATA_ENV)) {
            (Some(d), _) => Ok(d.clone()),
            (None, Some(env)) => Ok(PathBuf::from(env)),
            (None, None) => Err(Error::Config(format!("no data_dir in the config and {DATA_ENV} is unset"))),
        }
    }

    pub fn model_config(&self, feature_dim: usize) -> Result<ModelConfig, Error> {
        let mut cfg = ModelConfig::new(self.model.fusion);
        cfg.input_dim = self.model.input_dim.unwrap_or(feature_dim);
        cfg.head = self.model.head.resolve(cfg.head.d);
        cfg.validate()?;
        Ok(cfg)
    }
}
