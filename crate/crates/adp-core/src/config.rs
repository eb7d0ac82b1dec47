//! Run configuration: key-value text files, typed access, content hashing.
//!
//! A config file is `key = value` lines with `#` comments. The effective
//! config (after command-line overrides such as `--seed`) is canonicalized to
//! sorted `key = value` lines and hashed; every output file embeds that hash.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::container::read_kv;
use crate::data::{Style, WorldKind};
use crate::lfb::ScoreDirection;
use crate::nn::Activation;
use crate::{AdpError, Result};

/// Raw key-value configuration with typed getters.
#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Config {
            map: read_kv(path)?,
        })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Config {
            map: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| AdpError::Config {
                field: key.to_string(),
                detail: format!("cannot parse `{raw}`"),
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, default)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.parse(key, default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parse(key, default)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.map
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| AdpError::Config {
                        field: key.to_string(),
                        detail: format!("cannot parse list entry `{s}`"),
                    })
                })
                .collect(),
        }
    }

    /// Hash of the canonicalized key-value map (sorted lines, SHA-256,
    /// first 16 hex chars).
    pub fn hash(&self) -> String {
        let mut canonical = String::new();
        for (k, v) in &self.map {
            canonical.push_str(k);
            canonical.push_str(" = ");
            canonical.push_str(v);
            canonical.push('\n');
        }
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in digest.iter().take(8) {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn pairs(&self) -> &BTreeMap<String, String> {
        &self.map
    }
}

/// Dataset description parsed from a config.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub kind: WorldKind,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

/// All training knobs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Discriminator (and Φ-discriminator) steps per generator step.
    pub disc_steps: usize,
    pub batch: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub latent_dim: usize,
    pub trunk: Vec<usize>,
    pub image_head: Vec<usize>,
    pub param_head: Vec<usize>,
    pub disc_image: Vec<usize>,
    pub disc_label: Vec<usize>,
    pub disc_common: Vec<usize>,
    pub dlfb: Vec<usize>,
    /// Minimize log(1−D) exactly as written when true; default maximizes
    /// log D (non-saturating) for stable desk-scale runs.
    pub saturating_generator: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub sample_grid_every: usize,
    /// Hidden-layer activation for every network block.
    pub hidden_activation: Activation,
    /// Initial σ of the annealed Gaussian noise added to discriminator image
    /// inputs (real and fake alike); decays linearly to 0 over the run.
    pub instance_noise: f64,
    /// Weight of the batch-diversity (mode-seeking) bonus on the generator;
    /// 0 keeps the literal two-term generator update.
    pub lambda_diversity: f64,
    pub lambda_self: f64,
    pub lambda_cycle: f64,
    /// Average the self-supervision loss over all four rotations instead of
    /// sampling one per sample per step.
    pub ss_full_average: bool,
    /// Feed the fake-side label branch a uniform placeholder (the literal
    /// objective form) instead of the LFB label.
    pub ss_literal_fake: bool,
    pub zs_direction: ScoreDirection,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let direction = match cfg.str_or("zs_score_direction", "argmax").as_str() {
            "argmax" => ScoreDirection::Argmax,
            "argmin" => ScoreDirection::Argmin,
            other => {
                return Err(AdpError::Config {
                    field: "zs_score_direction".to_string(),
                    detail: format!("expected argmax|argmin, got {other}"),
                })
            }
        };
        let hidden_activation = match cfg.str_or("hidden_activation", "tanh").as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => {
                return Err(AdpError::Config {
                    field: "hidden_activation".to_string(),
                    detail: format!("expected tanh|relu, got {other}"),
                })
            }
        };
        let tc = TrainConfig {
            iterations: cfg.usize_or("iterations", 5000)?,
            disc_steps: cfg.usize_or("disc_steps", 5)?,
            batch: cfg.usize_or("batch", 32)?,
            lr_gen: cfg.f64_or("lr_gen", 5e-5)?,
            lr_disc: cfg.f64_or("lr_disc", 2e-4)?,
            beta1: cfg.f64_or("beta1", 0.5)?,
            beta2: cfg.f64_or("beta2", 0.999)?,
            seed: cfg.u64_or("seed", 7)?,
            latent_dim: cfg.usize_or("latent_dim", 16)?,
            trunk: cfg.usize_list_or("trunk", &[64, 64])?,
            image_head: cfg.usize_list_or("image_head", &[64])?,
            param_head: cfg.usize_list_or("param_head", &[64])?,
            disc_image: cfg.usize_list_or("disc_image", &[64])?,
            disc_label: cfg.usize_list_or("disc_label", &[32])?,
            disc_common: cfg.usize_list_or("disc_common", &[64])?,
            dlfb: cfg.usize_list_or("dlfb", &[32])?,
            saturating_generator: cfg.bool_or("saturating_generator", false)?,
            log_every: cfg.usize_or("log_every", 25)?,
            checkpoint_every: cfg.usize_or("checkpoint_every", 0)?,
            sample_grid_every: cfg.usize_or("sample_grid_every", 0)?,
            hidden_activation,
            instance_noise: cfg.f64_or("instance_noise", 0.0)?,
            lambda_diversity: cfg.f64_or("lambda_diversity", 0.0)?,
            lambda_self: cfg.f64_or("lambda_self", 0.3)?,
            lambda_cycle: cfg.f64_or("lambda_cycle", 0.3)?,
            ss_full_average: cfg.bool_or("ss_full_average", false)?,
            ss_literal_fake: cfg.bool_or("ss_literal_fake", false)?,
            zs_direction: direction,
        };
        if tc.disc_steps < 1 {
            return Err(AdpError::Config {
                field: "disc_steps".to_string(),
                detail: "must be ≥ 1".to_string(),
            });
        }
        if tc.lr_gen <= 0.0 || tc.lr_disc <= 0.0 {
            return Err(AdpError::Config {
                field: "lr_gen/lr_disc".to_string(),
                detail: "learning rates must be positive".to_string(),
            });
        }
        if tc.lambda_self < 0.0 || tc.lambda_cycle < 0.0 {
            return Err(AdpError::Config {
                field: "lambda_self/lambda_cycle".to_string(),
                detail: "λ weights must be ≥ 0".to_string(),
            });
        }
        Ok(tc)
    }

    pub fn dataset_config(cfg: &Config) -> Result<DatasetConfig> {
        let kind = match cfg.str_or("dataset", "shapes").as_str() {
            "shapes" => WorldKind::Shapes { style: Style::A },
            "shapes-b" => WorldKind::Shapes { style: Style::B },
            "attributes" => WorldKind::Attributes {
                attrs: cfg.usize_or("attrs", 8)?,
                seen_fraction: cfg.f64_or("seen_fraction", 0.6)?,
                noise: cfg.f64_or("noise", 0.0)?,
            },
            other => {
                return Err(AdpError::Config {
                    field: "dataset".to_string(),
                    detail: format!("unknown dataset kind {other}"),
                })
            }
        };
        Ok(DatasetConfig {
            kind,
            classes: cfg.usize_or("classes", 3)?,
            height: cfg.usize_or("height", 8)?,
            width: cfg.usize_or("width", 8)?,
            count: cfg.usize_or("count", 2000)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let cfg = Config::default();
        let tc = TrainConfig::from_config(&cfg).unwrap();
        assert_eq!(tc.disc_steps, 5);
        assert_eq!(tc.lr_gen, 5e-5);
        assert_eq!(tc.lr_disc, 2e-4);
        assert_eq!(tc.batch, 32);
        assert!(!tc.saturating_generator);
        assert_eq!(tc.lambda_cycle, 0.3);
    }

    #[test]
    fn bad_field_is_named_in_error() {
        let cfg = Config::from_pairs(&[("iterations", "many")]);
        let err = TrainConfig::from_config(&cfg).unwrap_err();
        match err {
            AdpError::Config { field, .. } => assert_eq!(field, "iterations"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn hash_is_order_insensitive_and_value_sensitive() {
        let a = Config::from_pairs(&[("x", "1"), ("y", "2")]);
        let b = Config::from_pairs(&[("y", "2"), ("x", "1")]);
        let c = Config::from_pairs(&[("x", "1"), ("y", "3")]);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
