//! TOML schema for `bibit train --config`.
//!
//! Every key is optional; `bibit train --print-config` prints the defaults.
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use bibit::attention::{AttentionVariant, StePlacement, WeightFn};
use bibit::distill::{DistillSpec, Scheme, Term};
use bibit::model::{BinarizationPolicy, TransformerConfig};
use bibit::train::{FileFormat, SynthRule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `majority` or `pattern`; ignored when `path` is set.
    pub synthetic: String,
    pub examples: usize,
    /// CSV or TSV file of `text,label` rows.
    pub path: Option<PathBuf>,
    pub eval_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            synthetic: "pattern".into(),
            examples: 1000,
            path: None,
            eval_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    pub binarize_embedding: bool,
    pub binarize_attention: bool,
    pub binarize_ffn: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = TransformerConfig::default();
        let p = BinarizationPolicy::BINARIZED;
        Self {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            max_seq: m.max_seq,
            binarize_embedding: p.embedding,
            binarize_attention: p.mha,
            binarize_ffn: p.ffn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub role: Role,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub ste_clip: f64,
    /// `dmd` or `baseline`.
    pub scheme: String,
    /// Distillation terms to drop, e.g. `["pred"]`.
    pub exclude: Vec<String>,
    /// Attention weight function, e.g. `bool`, `softmax-sign`, `quantile:0.5`.
    pub attention: String,
    /// `post-scale` or `pre-scale`.
    pub ste_placement: String,
    /// Required for students.
    pub teacher_checkpoint: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
}

impl Default for TrainFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            role: Role::Teacher,
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
            ste_clip: t.ste_clip,
            scheme: t.distill.scheme.to_string(),
            exclude: Vec::new(),
            attention: t.variant.weight_fn.to_string(),
            ste_placement: "post-scale".into(),
            teacher_checkpoint: None,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut file = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.resolve_paths(base);
        Ok(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.teacher_checkpoint.as_mut() {
            fix(p);
        }
        if let Some(p) = self.dataset.path.as_mut() {
            fix(p);
        }
    }

    pub fn synth_rule(&self) -> Result<SynthRule, CliError> {
        self.dataset.synthetic.parse().map_err(config_err)
    }

    pub fn file_format(&self) -> Option<FileFormat> {
        self.dataset.path.as_deref().map(FileFormat::from_path)
    }

    pub fn policy(&self) -> BinarizationPolicy {
        BinarizationPolicy {
            embedding: self.model.binarize_embedding,
            mha: self.model.binarize_attention,
            ffn: self.model.binarize_ffn,
        }
    }

    /// Training hyperparameters; vocabulary and class count come from the
    /// dataset later.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let scheme: Scheme = self.scheme.parse().map_err(config_err)?;
        let mut distill = DistillSpec::new(scheme);
        for t in &self.exclude {
            distill = distill.without(t.parse::<Term>().map_err(config_err)?);
        }
        let weight_fn: WeightFn = self.attention.parse().map_err(config_err)?;
        let placement = match self.ste_placement.as_str() {
            "post-scale" => StePlacement::PostScale,
            "pre-scale" => StePlacement::PreScale,
            other => return Err(CliError::Usage(format!("unknown ste_placement {other:?}"))),
        };
        let m = &self.model;
        let model = TransformerConfig {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            max_seq: m.max_seq,
            policy: self.policy(),
            ..TransformerConfig::default()
        };
        let cfg = TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            grad_clip: self.grad_clip,
            ste_clip: self.ste_clip,
            distill,
            variant: AttentionVariant {
                weight_fn,
                placement,
            },
            model,
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = TrainFile::default();
        assert_eq!(TrainFile::parse(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let f = TrainFile::parse(
            "role = \"student\"\nattention = \"softmax-sign\"\n[dataset]\nexamples = 10\n",
        )
        .unwrap();
        assert_eq!(f.role, Role::Student);
        assert_eq!(f.dataset.examples, 10);
        assert_eq!(f.epochs, TrainFile::default().epochs);
        assert_eq!(
            f.train_config().unwrap().variant.weight_fn,
            WeightFn::SoftmaxSign
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainFile::parse("learning_rat = 0.1").is_err());
        assert!(TrainFile::parse("scheme = \"nope\"")
            .unwrap()
            .train_config()
            .is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut f = TrainFile::parse("teacher_checkpoint = \"t.ckpt\"").unwrap();
        f.resolve_paths(Path::new("/runs"));
        assert_eq!(f.teacher_checkpoint.unwrap(), PathBuf::from("/runs/t.ckpt"));
    }
}
