//! Run configuration: a TOML file of flat key=value sections, with every key
//! overridable on the command line as `--section.key value`.

use std::path::Path;

use qdnet::distill::KDConfig;
use qdnet::nn::TrainConfig;
use qdnet::{QdError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub num_classes: usize,
    /// Per-class train count for the most frequent class; later classes decay
    /// geometrically (ratio 0.7).
    pub base_count: usize,
    /// Dataset generation seed, independent of the training seed so the same
    /// data serves multiple training runs.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_classes: 10,
            base_count: 120,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub milestones: Vec<usize>,
    pub lr_gamma: f32,
    pub dropout_p: f32,
    pub freeze_epoch: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            milestones: d.milestones,
            lr_gamma: d.lr_gamma,
            dropout_p: d.dropout_p,
            freeze_epoch: d.freeze_epoch,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct KdSection {
    pub beta: f64,
    pub temperature: f64,
    pub literal_eq1: bool,
}

impl Default for KdSection {
    fn default() -> Self {
        Self {
            beta: 0.9,
            temperature: 3.0,
            literal_eq1: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width_multiplier: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width_multiplier: 0.5,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed; mandatory, no default.
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub kd: KdSection,
    #[serde(default)]
    pub model: ModelSection,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            milestones: self.train.milestones.clone(),
            lr_gamma: self.train.lr_gamma,
            dropout_p: self.train.dropout_p,
            freeze_epoch: self.train.freeze_epoch,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    pub fn kd_config(&self) -> Result<KDConfig> {
        let mut kd = KDConfig::new(self.kd.beta, self.kd.temperature)?;
        kd.literal_eq1 = self.kd.literal_eq1;
        Ok(kd)
    }

    pub fn dataset(&self) -> Result<qdnet::data::Dataset> {
        let counts =
            qdnet::data::default_class_counts(self.dataset.num_classes, self.dataset.base_count);
        qdnet::data::generate_shapes_dataset(self.dataset.num_classes, &counts, self.dataset.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.kd_config()?;
        if self.model.width_multiplier <= 0.0 {
            return Err(QdError::Config(format!(
                "model.width_multiplier must be positive, got {}",
                self.model.width_multiplier
            )));
        }
        Ok(())
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    // try a full TOML literal (numbers, bools, arrays, quoted strings) and
    // fall back to a bare string
    if let Ok(t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
            Ok(())
        }
        Some((section, rest)) => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry.as_table_mut() {
                Some(sub) => set_path(sub, rest, value),
                None => Err(QdError::Config(format!(
                    "override {key}: {section} is not a section"
                ))),
            }
        }
    }
}

/// Parses trailing `--section.key value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| {
            QdError::Config(format!("expected an override flag (--section.key), got {flag}"))
        })?;
        let value = it
            .next()
            .ok_or_else(|| QdError::Config(format!("override --{key} is missing a value")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

/// Loads the config file (if any), applies overrides, and validates. With no
/// file, overrides apply on top of an empty table, so `--seed N` alone is a
/// complete configuration.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse().map_err(|e: toml::de::Error| QdError::Parse {
                offset: e.span().map(|s| s.start).unwrap_or(0),
                message: format!("{}: {}", p.display(), e.message()),
            })?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        set_path(&mut table, key, parse_toml_value(raw))?;
    }
    if !table.contains_key("seed") {
        return Err(QdError::Config(
            "seed is mandatory: set it in the config file or pass --seed N".into(),
        ));
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| QdError::Config(format!("config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}
