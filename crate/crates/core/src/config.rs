//! Experiment configuration: strict TOML schema, validation before any
//! compute, and dot-path axis overrides for sweeps.

use crate::attack::{AttackConfig, AttackVariant};
use crate::defend::DefenseConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Honest,
    Urvfl,
    UrvflSync,
    PlainDiscriminator,
}

impl Mode {
    pub fn variant(&self) -> Option<AttackVariant> {
        match self {
            Mode::Honest => None,
            Mode::Urvfl => Some(AttackVariant::Urvfl),
            Mode::UrvflSync => Some(AttackVariant::UrvflSync),
            Mode::PlainDiscriminator => Some(AttackVariant::PlainDiscriminator),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dims: usize,
        per_class: usize,
        separation: f64,
        /// fixed generator seed; None derives one from the run seed
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: String,
        label_column: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub aux_ratio: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> SplitConfig {
        SplitConfig {
            aux_ratio: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// embedding width per bottom model
    pub embedding_dim: usize,
    pub bottom_hidden: Vec<usize>,
    pub top_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub dac_hidden: Vec<usize>,
    pub activation: crate::nn::Activation,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            embedding_dim: 4,
            bottom_hidden: vec![16],
            top_hidden: vec![16],
            decoder_hidden: vec![32, 16],
            dac_hidden: vec![16, 16],
            activation: crate::nn::Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub honest_epochs: usize,
    pub attack_rounds: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> TrainingConfig {
        TrainingConfig {
            honest_epochs: 30,
            attack_rounds: 300,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub sg_enabled: bool,
    pub sg_threshold: f64,
    pub sg_window: usize,
    pub sg_fake_probability: f64,
    pub sg_warmup_rounds: usize,
    pub gs_enabled: bool,
    pub gs_threshold: f64,
    pub norm_profile_enabled: bool,
    pub ks_alpha: f64,
    /// cap on norms used per profile so the critical value stays meaningful
    pub ks_max_samples: usize,
    /// when true, passive clients stop updating once any detector fires
    pub halt_on_detection: bool,
}

impl Default for DetectionConfig {
    fn default() -> DetectionConfig {
        DetectionConfig {
            sg_enabled: true,
            sg_threshold: 0.9,
            sg_window: 10,
            sg_fake_probability: 0.1,
            sg_warmup_rounds: 20,
            gs_enabled: true,
            gs_threshold: 0.8,
            norm_profile_enabled: true,
            ks_alpha: 0.01,
            ks_max_samples: 500,
            halt_on_detection: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    /// column fractions: slot 0 the adversary (may be 0), then one per
    /// passive client
    pub partition_fractions: Vec<f64>,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    /// reconstruct only these columns; all passive columns when unset
    #[serde(default)]
    pub target_columns: Option<Vec<usize>>,
    /// control pipeline: permute the labels the attack sees
    #[serde(default)]
    pub label_shuffle_control: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn dims(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic { dims, .. } => Some(*dims),
            DatasetConfig::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} not supported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed required"));
        }
        if self.partition_fractions.len() < 2 {
            return Err(Error::config(
                "need adversary slot plus at least one passive client",
            ));
        }
        let sum: f64 = self.partition_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("partition fractions sum to {}", sum)));
        }
        if let DatasetConfig::Synthetic {
            classes,
            dims,
            per_class,
            separation,
            ..
        } = &self.dataset
        {
            if *classes < 2 || *dims < 2 || *per_class < 2 || *separation <= 0.0 {
                return Err(Error::config("invalid synthetic dataset parameters"));
            }
            // the attack needs passive columns to reconstruct
            if let Some(cols) = &self.target_columns {
                if cols.iter().any(|&c| c >= *dims) {
                    return Err(Error::config("target column out of range"));
                }
            }
        }
        if !(self.splits.aux_ratio >= 0.0
            && self.splits.test_fraction > 0.0
            && self.splits.test_fraction < 1.0)
        {
            return Err(Error::config("invalid split fractions"));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be positive"));
        }
        if self.training.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.mode != Mode::Honest {
            if self.splits.aux_ratio <= 0.0 {
                return Err(Error::config(
                    "attack modes need a non-empty auxiliary split",
                ));
            }
            let mut attack = self.attack.clone();
            attack.variant = self.mode.variant().expect("non-honest mode");
            attack.validate()?;
        }
        if !(0.0..1.0).contains(&self.detection.sg_fake_probability) {
            return Err(Error::config("sg_fake_probability must be in [0,1)"));
        }
        if self.detection.ks_alpha <= 0.0 || self.detection.ks_alpha >= 1.0 {
            return Err(Error::config("ks_alpha must be in (0,1)"));
        }
        self.defense.validate()?;
        Ok(())
    }

    /// Effective attack settings: the variant always follows `mode`.
    pub fn attack_for_mode(&self) -> AttackConfig {
        let mut a = self.attack.clone();
        if let Some(v) = self.mode.variant() {
            a.variant = v;
        }
        a
    }

    /// New config with one dot-path field replaced, e.g.
    /// `defense.noise_sigma = 0.3`. The result is re-validated.
    pub fn with_axis(&self, path: &str, value: &toml::Value) -> Result<ExperimentConfig> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        let mut cur = &mut root;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let toml::Value::Table(map) = cur else {
                return Err(Error::config(format!(
                    "axis path `{}` does not traverse a table",
                    path
                )));
            };
            let entry = map.get_mut(*seg).ok_or_else(|| {
                Error::config(format!("unknown axis segment `{}` in `{}`", seg, path))
            })?;
            if i + 1 == segments.len() {
                *entry = value.clone();
                break;
            }
            cur = entry;
        }
        let cfg: ExperimentConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a single axis value from its literal TOML form ("0.5", "inf",
    /// "\"urvfl\"", "[1, 2]").
    pub fn parse_axis_value(raw: &str) -> Result<toml::Value> {
        let doc: toml::Value = toml::from_str(&format!("v = {}", raw))
            .map_err(|e| Error::config(format!("bad axis value `{}`: {}", raw, e)))?;
        Ok(doc.get("v").cloned().expect("just inserted"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        schema_version = 1
        mode = "urvfl"
        seeds = [1, 2]
        partition_fractions = [0.5, 0.25, 0.25]

        [dataset]
        kind = "synthetic"
        classes = 2
        dims = 8
        per_class = 200
        separation = 4.0
    "#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.mode, Mode::Urvfl);
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.detection.sg_threshold, 0.9);
        assert!(cfg.defense.dp_epsilon.is_infinite());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{}\nbogus_knob = 3\n", BASE);
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{}", err);
    }

    #[test]
    fn bad_schema_version_rejected() {
        let text = BASE.replace("schema_version = 1", "schema_version = 2");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn axis_override_works_and_validates() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let v = ExperimentConfig::parse_axis_value("0.3").unwrap();
        let out = cfg.with_axis("defense.noise_sigma", &v).unwrap();
        assert_eq!(out.defense.noise_sigma, 0.3);
        assert_eq!(out.mode, cfg.mode);
        assert!(cfg.with_axis("defense.nonexistent", &v).is_err());
        let bad = ExperimentConfig::parse_axis_value("-1.0").unwrap();
        assert!(cfg.with_axis("defense.noise_sigma", &bad).is_err());
        let inf = ExperimentConfig::parse_axis_value("inf").unwrap();
        let out = cfg.with_axis("defense.dp_epsilon", &inf).unwrap();
        assert!(out.defense.dp_epsilon.is_infinite());
    }

    #[test]
    fn attack_mode_requires_aux_split() {
        let text = format!("{}\n[splits]\naux_ratio = 0.0\ntest_fraction = 0.2\n", BASE);
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn dp_epsilon_inf_round_trips() {
        let text = format!("{}\n[defense]\ndp_epsilon = inf\n", BASE);
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!(cfg.defense.dp_epsilon.is_infinite());
    }
}
