//! Experiment configuration: a TOML document with stable key paths.
//!
//! Top level: `output_dir`, `seeds`, then the tables `[dataset]`,
//! `[dataset.synthetic]`, `[split]`, `[target]`, `[intervention]`,
//! `[attacks]`, `[attacks.shadow_train]`, `[defense]`, `[defense.dp]`
//! and `[defense.restriction]`. See `default.cfg` for a complete,
//! commented instance.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attacks::AttackKind;
use crate::dataset::{CsvSchema, SplitSpec, SyntheticSpec};
use crate::defenses::RestrictionPolicy;
use crate::fairness::{InterventionConfig, InterventionMethod};
use crate::nn::TrainConfig;
use crate::{Error, Result};

/// Training hyperparameters as they appear in config files; seeds and
/// per-example weights are assigned by the orchestrator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainParams {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed,
            sample_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub dim: usize,
    pub n: usize,
    pub noise_std: f64,
    /// Classes sit at -/+ this value along feature 0.
    #[serde(default)]
    pub class_shift: f64,
    /// Group 1 is offset by this value along `group_shift_axis`.
    #[serde(default)]
    pub group_shift: f64,
    /// Feature index the group offset applies to; keeping it off the
    /// class axis makes group membership orthogonal to the label.
    #[serde(default)]
    pub group_shift_axis: usize,
    /// Explicit per-class mean vectors; override `class_shift`.
    #[serde(default)]
    pub class_mean_shift: Option<[Vec<f64>; 2]>,
    /// Explicit per-group mean vectors; override `group_shift`.
    #[serde(default)]
    pub group_mean_shift: Option<[Vec<f64>; 2]>,
}

impl SyntheticParams {
    pub fn to_spec(&self, skew_ratio: f64, seed: u64) -> Result<SyntheticSpec> {
        if self.group_shift_axis >= self.dim {
            return Err(Error::Config(format!(
                "group_shift_axis {} outside feature range 0..{}",
                self.group_shift_axis, self.dim
            )));
        }
        let axis = |j: usize, v: f64| {
            let mut x = vec![0.0; self.dim];
            x[j] = v;
            x
        };
        let class_mean_shift = self
            .class_mean_shift
            .clone()
            .unwrap_or_else(|| [axis(0, -self.class_shift), axis(0, self.class_shift)]);
        let group_mean_shift = self.group_mean_shift.clone().unwrap_or_else(|| {
            [
                axis(self.group_shift_axis, 0.0),
                axis(self.group_shift_axis, self.group_shift),
            ]
        });
        let spec = SyntheticSpec {
            dim: self.dim,
            n: self.n,
            group_mean_shift,
            class_mean_shift,
            noise_std: self.noise_std,
            skew_ratio,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub skew_ratio: f64,
    #[serde(default)]
    pub majority_group: u8,
    #[serde(default)]
    pub synthetic: Option<SyntheticParams>,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default)]
    pub csv_label_column: Option<String>,
    #[serde(default)]
    pub csv_group_column: Option<String>,
}

impl DatasetConfig {
    pub fn csv_schema(&self) -> CsvSchema {
        let mut schema = CsvSchema::default();
        if let Some(c) = &self.csv_label_column {
            schema.label = c.clone();
        }
        if let Some(c) = &self.csv_group_column {
            schema.group = c.clone();
        }
        schema
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub member_fraction: f64,
    pub nonmember_fraction: f64,
    pub shadow_fraction: f64,
}

impl SplitConfig {
    pub fn to_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            member_fraction: self.member_fraction,
            nonmember_fraction: self.nonmember_fraction,
            shadow_fraction: self.shadow_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub layer_sizes: Vec<usize>,
    #[serde(flatten)]
    pub train: TrainParams,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSection {
    pub method: InterventionMethod,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_mixup_grid")]
    pub mixup_grid: Vec<f64>,
    #[serde(default = "default_adversary_layers")]
    pub adversary_layers: Vec<usize>,
}

fn default_mixup_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_adversary_layers() -> Vec<usize> {
    vec![8]
}

impl InterventionSection {
    /// Intervention training reuses the target hyperparameters.
    pub fn to_config(&self, train: TrainConfig) -> InterventionConfig {
        InterventionConfig {
            method: self.method,
            lambda: self.lambda,
            mixup_grid: self.mixup_grid.clone(),
            adversary_layers: self.adversary_layers.clone(),
            train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttacksConfig {
    pub kinds: Vec<AttackKind>,
    /// Also run the fairness-discrepancy variant of each kind against
    /// the biased/fair pair.
    #[serde(default)]
    pub fd: bool,
    pub k_shadows: usize,
    /// Shadow count under `--quick`.
    pub k_shadows_quick: usize,
    pub shadow_train: TrainParams,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    #[serde(flatten)]
    pub train: TrainParams,
    /// Shadow count for the defense-phase attack re-run.
    pub k_shadows: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictionSection {
    pub mode: String,
    #[serde(default)]
    pub digits: Option<u32>,
}

impl RestrictionSection {
    pub fn to_policy(&self) -> Result<RestrictionPolicy> {
        let policy = match self.mode.as_str() {
            "none" => RestrictionPolicy::None,
            "label_only" => RestrictionPolicy::LabelOnly,
            "truncate" => RestrictionPolicy::Truncate(self.digits.ok_or_else(|| {
                Error::Config("restriction mode 'truncate' needs 'digits'".into())
            })?),
            "fair_isolation" => RestrictionPolicy::FairIsolation,
            other => {
                return Err(Error::Config(format!(
                    "unknown restriction mode '{other}' (expected none, label_only, truncate or fair_isolation)"
                )))
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub dp: Option<DpSection>,
    #[serde(default)]
    pub restriction: Option<RestrictionSection>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub target: TargetConfig,
    pub intervention: InterventionSection,
    pub attacks: AttacksConfig,
    #[serde(default)]
    pub defense: Option<DefenseConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let mut kinds = self.attacks.kinds.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.attacks.kinds.len() {
            return Err(Error::Config("attack kinds must be unique".into()));
        }
        match self.dataset.source {
            DataSource::Synthetic => {
                if self.dataset.synthetic.is_none() {
                    return Err(Error::Config(
                        "dataset.source = synthetic needs a [dataset.synthetic] table".into(),
                    ));
                }
            }
            DataSource::Csv => {
                if self.dataset.csv_path.is_none() {
                    return Err(Error::Config("dataset.source = csv needs dataset.csv_path".into()));
                }
            }
        }
        if !(0.5..1.0).contains(&self.dataset.skew_ratio) {
            return Err(Error::Config("dataset.skew_ratio must lie in [0.5, 1.0)".into()));
        }
        if self.dataset.majority_group > 1 {
            return Err(Error::Config("dataset.majority_group must be 0 or 1".into()));
        }
        if self.attacks.k_shadows < 2 || self.attacks.k_shadows_quick < 2 {
            return Err(Error::Config("shadow counts must be at least 2".into()));
        }
        if self.target.layer_sizes.last() != Some(&2) {
            return Err(Error::Config("target.layer_sizes must end in 2".into()));
        }
        if let Some(def) = &self.defense {
            if def.enabled && def.dp.is_none() && def.restriction.is_none() {
                return Err(Error::Config(
                    "defense.enabled requires [defense.dp] and/or [defense.restriction]".into(),
                ));
            }
            if let Some(r) = &def.restriction {
                let policy = r.to_policy()?;
                if def.enabled && policy == RestrictionPolicy::FairIsolation && self.attacks.fd {
                    return Err(Error::RestrictionViolation(
                        "fd attacks cannot run under fair_isolation; disable attacks.fd or change the restriction".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }

    pub fn restriction_policy(&self) -> Result<RestrictionPolicy> {
        match self.defense.as_ref().and_then(|d| d.restriction.as_ref()) {
            Some(r) => r.to_policy(),
            None => Ok(RestrictionPolicy::None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
seeds = [1, 2]

[dataset]
source = "synthetic"
skew_ratio = 0.9

[dataset.synthetic]
dim = 4
n = 600
noise_std = 1.0
class_shift = 1.0
group_shift = 0.2

[split]
member_fraction = 0.3333333333333333
nonmember_fraction = 0.3333333333333333
shadow_fraction = 0.3333333333333334

[target]
layer_sizes = [4, 8, 2]
epochs = 5
batch_size = 32
learning_rate = 0.1

[intervention]
method = "reweight"
lambda = 1.0

[attacks]
kinds = ["mia_score", "aia_black"]
fd = true
k_shadows = 4
k_shadows_quick = 2

[attacks.shadow_train]
epochs = 5
batch_size = 32
learning_rate = 0.1
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.attacks.kinds.len(), 2);
        let spec = cfg.dataset.synthetic.as_ref().unwrap().to_spec(0.9, 7).unwrap();
        assert_eq!(spec.class_mean_shift[0][0], -1.0);
        assert_eq!(spec.group_mean_shift[1][0], 0.2);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml_str(&MINIMAL.replace("seeds = [1, 2]", "seeds = [1, 3]"))
            .unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_duplicate_kinds_and_empty_seeds() {
        let dup = MINIMAL.replace(
            "kinds = [\"mia_score\", \"aia_black\"]",
            "kinds = [\"mia_score\", \"mia_score\"]",
        );
        assert!(matches!(
            ExperimentConfig::from_toml_str(&dup),
            Err(Error::Config(_))
        ));
        let empty = MINIMAL.replace("seeds = [1, 2]", "seeds = []");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_fd_with_fair_isolation() {
        let text = format!(
            "{MINIMAL}\n[defense]\nenabled = true\n\n[defense.restriction]\nmode = \"fair_isolation\"\n"
        );
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::RestrictionViolation(_))
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("[target]", "[target]\nbogus_key = 1");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::Config(_))
        ));
    }
}
