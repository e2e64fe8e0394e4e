use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autonet::{DenoiserArch, OptimizerConfig};
use crate::datasets::DatasetSpec;
use crate::diffusion::{linear_beta_schedule, NoiseSchedule, TeacherConfig};
use crate::distill::{DistillConfig, FinetuneConfig, LossKind};
use crate::error::ensure;
use crate::policy::JointConfig;
use crate::{Error, Result};

/// How stage one picks the teacher time index for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeSelection {
    Reinforced,
    Fixed(usize),
    Random,
    /// Stage one is skipped.
    None,
}

impl fmt::Display for TimeSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeSelection::Reinforced => write!(f, "reinforced"),
            TimeSelection::Fixed(t) => write!(f, "fixed:{t}"),
            TimeSelection::Random => write!(f, "random"),
            TimeSelection::None => write!(f, "none"),
        }
    }
}

impl FromStr for TimeSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforced" => Ok(TimeSelection::Reinforced),
            "random" => Ok(TimeSelection::Random),
            "none" => Ok(TimeSelection::None),
            _ => match s.strip_prefix("fixed:").map(str::parse) {
                Some(Ok(t)) => Ok(TimeSelection::Fixed(t)),
                _ => Err(Error::Config(format!(
                    "unknown time selection {s:?}; expected reinforced, random, none or fixed:<t>"
                ))),
            },
        }
    }
}

impl Serialize for TimeSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Teacher architecture, noise schedule and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub arch: DenoiserArch,
    pub beta_start: f64,
    pub beta_end: f64,
    pub training: TeacherConfig,
    pub seed: u64,
}

impl TeacherSpec {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.arch.time_steps, self.beta_start, self.beta_end)
    }
}

/// A full experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    pub train_fraction: f64,
    /// Labelled training samples per class available to finetuning and to
    /// the time-selection decoder; all when absent.
    #[serde(default)]
    pub labels_per_class: Option<usize>,
    pub teacher: TeacherSpec,
    pub student_hidden: Vec<usize>,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub selection: TimeSelection,
    #[serde(default)]
    pub joint: JointConfig,
    pub policy_hidden: usize,
    pub seeds: Vec<u64>,
    /// Fixed-index modes compared by the ablation.
    pub fixed_grid: Vec<usize>,
    /// Time indices probed by the representation analysis.
    pub probe_grid: Vec<usize>,
    /// Not part of the config hash.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = 100;
        Self {
            dataset: DatasetSpec::Mixture {
                k: 4,
                d: 4,
                n: 2048,
                spread: 0.05,
                modes_per_class: 4,
            },
            data_seed: 0,
            train_fraction: 0.5,
            labels_per_class: None,
            teacher: TeacherSpec {
                arch: DenoiserArch::bottleneck(4, 64, 8, t).with_skip(),
                beta_start: 1e-3,
                beta_end: 0.2,
                training: TeacherConfig {
                    epochs: 200,
                    batch_size: 128,
                    optimizer: OptimizerConfig::Adam {
                        lr: 2e-3,
                        weight_decay: 0.0,
                    },
                    ..TeacherConfig::default()
                },
                seed: 0,
            },
            student_hidden: vec![32, 8],
            distill: DistillConfig {
                optimizer: OptimizerConfig::Adam {
                    lr: 2e-3,
                    weight_decay: 0.0,
                },
                ..DistillConfig::new(LossKind::Hint, 40, 32)
            },
            finetune: FinetuneConfig {
                epochs: 10,
                batch_size: 128,
                optimizer: OptimizerConfig::Adam {
                    lr: 2e-3,
                    weight_decay: 0.0,
                },
            },
            selection: TimeSelection::Reinforced,
            joint: JointConfig::default(),
            policy_hidden: 32,
            seeds: vec![1, 2, 3, 4, 5],
            fixed_grid: vec![0, 1, 5, 10, 20, 30, 50, 99],
            probe_grid: vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99],
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps(&self) -> usize {
        self.teacher.arch.time_steps
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.steps();
        ensure!(!self.seeds.is_empty(), Config, "at least one seed is required");
        ensure!(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            Config,
            "train_fraction must lie in (0, 1)"
        );
        if let TimeSelection::Fixed(ft) = self.selection {
            ensure!(ft < t, Config, "fixed time index {ft} outside [0, {t})");
        }
        for &g in self.fixed_grid.iter().chain(&self.probe_grid) {
            ensure!(g < t, Config, "grid time index {g} outside [0, {t})");
        }
        ensure!(
            self.dataset.dim() == self.teacher.arch.input_dim,
            Config,
            "dataset and teacher dims differ"
        );
        ensure!(!self.student_hidden.is_empty(), Config, "student needs a hidden layer");
        ensure!(self.policy_hidden >= 1, Config, "policy_hidden must be >= 1");
        if let Some(l) = self.labels_per_class {
            ensure!(l >= 1, Config, "labels_per_class must be >= 1");
        }
        self.teacher.arch.validate().map_err(to_config)?;
        self.teacher.training.validate()?;
        self.teacher.schedule().map_err(to_config)?;
        self.distill.validate()?;
        ensure!(
            self.finetune.batch_size >= 1,
            Config,
            "finetune batch size must be >= 1"
        );
        self.joint.validate()?;
        for opt in [
            &self.distill.optimizer,
            &self.finetune.optimizer,
            &self.teacher.training.optimizer,
            &self.joint.policy_optimizer,
            &self.joint.decoder_optimizer,
        ] {
            opt.build().map_err(to_config)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Hash of the fields that determine the teacher.
    pub fn teacher_key(&self) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "data_seed": self.data_seed,
            "train_fraction": self.train_fraction,
            "teacher": self.teacher,
        });
        sha256_hex(&serde_json::to_vec(&key).expect("json serializes"))
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::Shape(m) => Error::Config(m),
        other => other,
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fixed index grid `{0, 10, 50, 100, 200, 300, 500, 999}/1000` rescaled to `steps`.
pub fn scaled_fixed_grid(steps: usize) -> Vec<usize> {
    let mut g: Vec<usize> = [0usize, 10, 50, 100, 200, 300, 500, 999]
        .iter()
        .map(|&v| if v == 999 { steps - 1 } else { v * steps / 1000 })
        .collect();
    g.dedup();
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_parses_and_prints() {
        for s in ["reinforced", "random", "none", "fixed:0", "fixed:99"] {
            assert_eq!(s.parse::<TimeSelection>().unwrap().to_string(), s);
        }
        for bad in ["fixed", "fixed:-1", "fixed:x", "Reinforced", ""] {
            assert!(matches!(bad.parse::<TimeSelection>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn default_config_roundtrips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.fixed_grid, scaled_fixed_grid(100));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(
            ExperimentConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));

        let mut c = ExperimentConfig::default();
        c.selection = TimeSelection::Fixed(100);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.data_seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.teacher_key(), b.teacher_key());
        let mut c = a.clone();
        c.selection = TimeSelection::Random;
        assert_eq!(a.teacher_key(), c.teacher_key());
    }
}
