//! Experiment configuration: a TOML document with one table per pipeline
//! stage. Every field has a default, unknown keys are rejected, and
//! `--set a.b.c=value` overrides are applied to the raw document before
//! validation.

use std::path::{Path, PathBuf};

use explainer_core::losses::{LossWeights, TemplateConstants};
use explainer_core::metrics::{InstabilityConfig, LandmarkAggregation};
use explainer_core::performer::{PerformerArch, PerformerTrainConfig, CONV_LAYERS};
use explainer_core::rng::derive_seed;
use explainer_core::synth::{default_categories, CategoryDescriptor, SceneGeometry};
use explainer_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

/// Seed streams derived from the master seed, one per stage.
const STAGE_DATA: u64 = 101;
const STAGE_PERFORMER: u64 = 102;
const STAGE_EXPLAINER: u64 = 103;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub performer: PerformerConfig,
    pub explainer: ExplainerConfig,
    pub losses: LossesConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_scenes: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub geometry: SceneGeometry,
    /// With a single category, every other scene is a background-only
    /// negative and the performer is trained object-vs-background.
    pub categories: Vec<CategoryDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerformerConfig {
    pub conv_channels: [usize; CONV_LAYERS],
    pub fc1: usize,
    pub fc2: usize,
    pub tap_layer: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub min_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerConfig {
    /// Number of interpretable filters `F`.
    pub filters: usize,
    /// Start fc-dec-2 from the performer's second FC layer.
    pub decoder_from_performer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesConfig {
    pub recon_fc1: f64,
    pub recon_fc2: f64,
    pub normalize_recon: bool,
    pub eta: f64,
    /// Per-filter weight of the filter loss.
    pub filter: Option<f64>,
    pub templates: TemplateConstants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub assignment_refresh: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub min_images: usize,
    pub aggregation: LandmarkAggregation,
    /// Crops per filter in the visualisation grids.
    pub top_k: usize,
    /// Eval images rendered as grad-CAM comparisons.
    pub gradcam_images: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root for experiment directories; falls back to `$EXPLAINER_HOME`,
    /// then `./experiments`.
    pub root: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            performer: PerformerConfig::default(),
            explainer: ExplainerConfig::default(),
            losses: LossesConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_scenes: 600,
            train_fraction: 0.8,
            val_fraction: 0.1,
            geometry: SceneGeometry::default(),
            categories: default_categories(),
        }
    }
}

impl Default for PerformerConfig {
    fn default() -> Self {
        let arch = PerformerArch::default();
        let train = PerformerTrainConfig::default();
        Self {
            conv_channels: arch.conv_channels,
            fc1: arch.fc1,
            fc2: arch.fc2,
            tap_layer: arch.tap_layer,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            lr_decay: train.lr_decay,
            momentum: train.momentum,
            min_val_accuracy: train.min_val_accuracy,
        }
    }
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            filters: 16,
            decoder_from_performer: TrainConfig::default().decoder_from_performer,
        }
    }
}

impl Default for LossesConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            recon_fc1: w.recon_fc1,
            recon_fc2: w.recon_fc2,
            normalize_recon: w.normalize_recon,
            eta: w.eta,
            filter: w.filter,
            templates: TemplateConstants::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            assignment_refresh: t.assignment_refresh,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        let i = InstabilityConfig::default();
        Self {
            min_images: i.min_images,
            aggregation: i.aggregation,
            top_k: 9,
            gradcam_images: 4,
        }
    }
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> AppError {
    AppError::Config(format!("{key}: {msg}"))
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(config_err(key, msg))
    }
}

fn finite_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

impl ExperimentConfig {
    /// Parses a TOML document, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| AppError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Canonical TOML rendering; parsing it back yields an equal config.
    pub fn normalized(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Short content hash of the normalised form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.normalized().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.num_scenes >= 1, "data.num_scenes", "must be at least 1")?;
        check(
            finite_nonneg(d.train_fraction) && finite_nonneg(d.val_fraction) && d.train_fraction + d.val_fraction <= 1.0,
            "data.train_fraction",
            "train and val fractions must be nonnegative and sum to at most 1",
        )?;
        check(!d.categories.is_empty(), "data.categories", "at least one category is required")?;
        explainer_core::synth::SceneGenerator::new(d.geometry.clone(), d.categories.clone())
            .map_err(|e| config_err("data", e))?;

        let p = &self.performer;
        check(p.conv_channels.iter().all(|&c| c > 0), "performer.conv_channels", "must be positive")?;
        check(p.fc1 > 0 && p.fc2 > 0, "performer.fc1", "FC widths must be positive")?;
        check((3..=CONV_LAYERS).contains(&p.tap_layer), "performer.tap_layer", "must be 3 or 4")?;
        check(p.batch_size >= 1, "performer.batch_size", "must be at least 1")?;
        check(finite_nonneg(p.learning_rate), "performer.learning_rate", "must be finite and nonnegative")?;
        check(p.lr_decay.is_finite() && p.lr_decay > 0.0, "performer.lr_decay", "must be positive")?;
        check((0.0..1.0).contains(&p.momentum), "performer.momentum", "must lie in [0, 1)")?;
        check((0.0..=1.0).contains(&p.min_val_accuracy), "performer.min_val_accuracy", "must lie in [0, 1]")?;
        self.performer_arch().validate().map_err(|e| config_err("performer", e))?;

        check(self.explainer.filters >= 1, "explainer.filters", "must be at least 1")?;

        let l = &self.losses;
        check(finite_nonneg(l.eta), "losses.eta", "must be finite and >= 0")?;
        check(finite_nonneg(l.recon_fc1), "losses.recon_fc1", "must be finite and >= 0")?;
        check(finite_nonneg(l.recon_fc2), "losses.recon_fc2", "must be finite and >= 0")?;
        check(l.filter.map_or(true, finite_nonneg), "losses.filter", "must be finite and >= 0")?;
        l.templates.validate().map_err(|e| config_err("losses.templates", e))?;

        let t = &self.train;
        check(t.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        check(finite_nonneg(t.learning_rate), "train.learning_rate", "must be finite and nonnegative")?;
        check(t.lr_decay.is_finite() && t.lr_decay > 0.0, "train.lr_decay", "must be positive")?;
        check((0.0..1.0).contains(&t.momentum), "train.momentum", "must lie in [0, 1)")?;
        check(t.assignment_refresh >= 1, "train.assignment_refresh", "must be at least 1")?;

        check(self.eval.top_k >= 1, "eval.top_k", "must be at least 1")?;
        Ok(())
    }

    /// Number of classes the performer separates; a single category is
    /// paired with a background class.
    pub fn classes(&self) -> usize {
        self.data.categories.len().max(2)
    }

    pub fn performer_arch(&self) -> PerformerArch {
        let p = &self.performer;
        PerformerArch {
            input_size: self.data.geometry.size,
            input_channels: 1,
            conv_channels: p.conv_channels,
            fc1: p.fc1,
            fc2: p.fc2,
            classes: self.classes(),
            tap_layer: p.tap_layer,
        }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, STAGE_DATA, 0)
    }

    pub fn performer_train(&self) -> PerformerTrainConfig {
        let p = &self.performer;
        PerformerTrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            lr_decay: p.lr_decay,
            momentum: p.momentum,
            seed: derive_seed(self.seed, STAGE_PERFORMER, 0),
            min_val_accuracy: p.min_val_accuracy,
        }
    }

    pub fn explainer_train(&self) -> TrainConfig {
        let t = &self.train;
        let l = &self.losses;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            seed: derive_seed(self.seed, STAGE_EXPLAINER, 0),
            weights: LossWeights {
                recon_fc1: l.recon_fc1,
                recon_fc2: l.recon_fc2,
                eta: l.eta,
                filter: l.filter,
                normalize_recon: l.normalize_recon,
            },
            templates: l.templates.clone(),
            assignment_refresh: t.assignment_refresh,
            decoder_from_performer: self.explainer.decoder_from_performer,
        }
    }

    pub fn instability(&self) -> InstabilityConfig {
        InstabilityConfig {
            min_images: self.eval.min_images,
            aggregation: self.eval.aggregation,
        }
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// value and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("override '{spec}' is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AppError::Config(format!("override key '{key}' is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("override key '{key}': '{part}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_fully_defaulted() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn normalized_form_round_trips() {
        let cfg = ExperimentConfig::from_toml_str("seed = 5\n[losses]\neta = 0.5\n", &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.normalized(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.normalized(), again.normalized());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::from_toml_str(
            "",
            &["losses.eta=2".into(), "train.epochs=3".into(), "data.geometry.noise=0.01".into()],
        )
        .unwrap();
        assert_eq!(cfg.losses.eta, 2.0);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.data.geometry.noise, 0.01);
    }

    #[test]
    fn negative_eta_names_the_key() {
        let err = ExperimentConfig::from_toml_str("[losses]\neta = -1.0\n", &[]).unwrap_err();
        assert!(err.to_string().contains("losses.eta"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nepochz = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn type_mismatch_is_rejected() {
        assert!(ExperimentConfig::from_toml_str("seed = \"zero\"\n", &[]).is_err());
    }
}
