use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::model::{AdamConfig, Mode, ModelConfig, Pooling};
use crate::ppr::PprConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Keep interactions rated at least this much; `None` keeps everything.
    pub rating_threshold: Option<f64>,
    pub min_interactions: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/ml-100k.inter"),
            rating_threshold: Some(3.0),
            min_interactions: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Per-user training fraction, transductive protocol.
    pub rho: f64,
    /// Fraction of users used for training, inductive protocol.
    pub mu: f64,
    /// Per-user fold-in fraction of evaluation users, inductive protocol.
    pub eta: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            rho: 0.8,
            mu: 0.8,
            eta: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// `None` picks 200 for inductive runs and 64 for transductive ones.
    pub dim: Option<usize>,
    pub layers: usize,
    pub pooling: Pooling,
    pub init_std: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            dim: None,
            layers: 3,
            pooling: Pooling::Mean,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub variant: LossVariant,
    /// `None` picks 1.0 for inductive runs and 1.5 for transductive ones.
    pub tau: Option<f64>,
    pub tau_star: Option<f64>,
    pub recall_levels: Vec<usize>,
    pub negatives_only: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            variant: d.variant,
            tau: None,
            tau_star: d.tau_star,
            recall_levels: d.recall_levels,
            negatives_only: d.negatives_only,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingKind {
    Uniform,
    Ppr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub kind: SamplingKind,
    pub n_pos: usize,
    pub n_neg: usize,
    pub ppr: PprConfig,
    /// Precomputed PPR cache. When absent the vectors are computed in
    /// process with the same truncation and rounding as the cache.
    pub cache: Option<PathBuf>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            kind: SamplingKind::Uniform,
            n_pos: 5,
            n_neg: 200,
            ppr: PprConfig::default(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient on the layer-0 rows touched by a batch.
    pub l2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            l2: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub protocol: Mode,
    pub split: SplitConfig,
    pub model: ModelParams,
    pub loss: LossParams,
    pub sampling: SamplingConfig,
    pub optimizer: OptimizerConfig,
    pub batch_users: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Cut-offs reported at evaluation.
    pub ks: Vec<usize>,
    /// Cut-off whose validation NDCG drives early stopping.
    pub select_k: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            protocol: Mode::Inductive,
            split: SplitConfig::default(),
            model: ModelParams::default(),
            loss: LossParams::default(),
            sampling: SamplingConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_users: 512,
            max_epochs: 500,
            eval_every: 5,
            patience: 10,
            ks: vec![10, 20],
            select_k: 20,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.model.dim.unwrap_or(match self.protocol {
                Mode::Inductive => 200,
                Mode::Transductive => 64,
            }),
            layers: self.model.layers,
            pooling: self.model.pooling,
            mode: self.protocol,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            variant: self.loss.variant,
            tau: self.loss.tau.unwrap_or(match self.protocol {
                Mode::Inductive => 1.0,
                Mode::Transductive => 1.5,
            }),
            tau_star: self.loss.tau_star,
            recall_levels: self.loss.recall_levels.clone(),
            negatives_only: self.loss.negatives_only,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("sampling.n_pos", self.sampling.n_pos)?;
        positive("sampling.n_neg", self.sampling.n_neg)?;
        positive("batch_users", self.batch_users)?;
        positive("eval_every", self.eval_every)?;
        positive("patience", self.patience)?;
        positive("select_k", self.select_k)?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty positive cut-offs".into()));
        }
        if !self.ks.contains(&self.select_k) {
            return Err(Error::Config(format!("select_k {} is not among ks", self.select_k)));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.l2 >= 0.0) {
            return Err(Error::Config("lr and l2 must be non-negative".into()));
        }
        if !(self.model.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.model_config().validate()?;
        self.loss_config().validate()?;
        if self.sampling.kind == SamplingKind::Ppr {
            self.sampling.ppr.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
