//! The run configuration document, its validation and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::DatasetConfig;
use crate::error::{AptError, Result};
use crate::inversion::InversionConfig;
use crate::losses::{LossWeights, TermMask};
use crate::models::{ClassifierArch, ModelConfig};
use crate::pretrain::{GanTrainConfig, TrainConfig};
use crate::robustify::FinetuneConfig;

pub const DEFAULT_CONFIG: &str = include_str!("default_config.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub id: String,
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub ema_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub classifiers: Vec<ClassifierSpec>,
    pub perceptual: PerceptualSpec,
    pub gan: GanSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSpec {
    pub iterations: usize,
    pub lr_max: f64,
    pub warmup_iters: usize,
    pub cosine_tail_iters: usize,
    pub init_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub d: f64,
    /// Locality radius as a multiple of the mean distance of mapped codes from their mean.
    pub alpha_rel: f64,
    pub lr: f64,
    pub latent_lr: f64,
    pub max_iters: usize,
    pub target: String,
    /// Judge of class preservation; never attacked.
    pub oracle: String,
    /// Test images per class in a campaign.
    pub per_class: usize,
    pub resample_c_any: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mix: f64,
    /// Training images per class attacked to build the finetune set.
    pub per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub d_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Validation images summarized as the FID reference.
    pub fid_reference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSpec,
    pub weights: LossWeights,
    pub inversion: InversionSpec,
    pub attack: AttackSpec,
    pub finetune: FinetuneSpec,
    pub sweep: SweepSpec,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let inv = InversionConfig::default();
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSpec {
                classifiers: vec![
                    ClassifierSpec {
                        id: "conv".into(),
                        arch: ClassifierArch::Conv,
                        epochs: 4,
                        batch_size: 64,
                        lr: 2e-3,
                    },
                    ClassifierSpec {
                        id: "mlp".into(),
                        arch: ClassifierArch::Mlp,
                        epochs: 6,
                        batch_size: 64,
                        lr: 1e-3,
                    },
                    ClassifierSpec {
                        id: "oracle".into(),
                        arch: ClassifierArch::Deepconv,
                        epochs: 4,
                        batch_size: 64,
                        lr: 2e-3,
                    },
                ],
                perceptual: PerceptualSpec {
                    epochs: 3,
                    batch_size: 64,
                    lr: 2e-3,
                },
                gan: GanSpec {
                    epochs: 3,
                    batch_size: 32,
                    lr_g: 2e-3,
                    lr_d: 2e-3,
                    ema_decay: 0.995,
                },
            },
            weights: LossWeights::default(),
            inversion: InversionSpec {
                iterations: inv.iterations,
                lr_max: inv.lr_max,
                warmup_iters: inv.warmup_iters,
                cosine_tail_iters: inv.cosine_tail_iters,
                init_samples: inv.init_samples,
            },
            attack: AttackSpec {
                d: 0.2,
                alpha_rel: 0.5,
                lr: 3e-4,
                latent_lr: 0.05,
                max_iters: 1000,
                target: "conv".into(),
                oracle: "oracle".into(),
                per_class: 10,
                resample_c_any: false,
            },
            finetune: FinetuneSpec {
                lr: 0.001,
                epochs: 3,
                batch_size: 32,
                mix: 0.5,
                per_class: 10,
            },
            sweep: SweepSpec {
                d_values: vec![0.2, 0.3, 0.4],
            },
            eval: EvalSpec { fid_reference: 500 },
        }
    }
}

/// Independent stream seed for one named consumer of the global seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(AptError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AptError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AptError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AptError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate(self.dataset.image_size)?;
        self.weights.validate()?;
        let p = &self.pretrain;
        if p.classifiers.is_empty() {
            return Err(AptError::Config("pretrain.classifiers must not be empty".into()));
        }
        let mut ids: Vec<&str> = p.classifiers.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(AptError::Config("classifier ids must be unique".into()));
        }
        for c in &p.classifiers {
            if c.id.is_empty() || !c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
                return Err(AptError::Config(format!("classifier id `{}` must be alphanumeric", c.id)));
            }
            self.classifier_train(&c.id)?.validate()?;
        }
        self.perceptual_train().validate()?;
        self.gan_train().validate()?;
        self.inversion_config().validate()?;
        let a = &self.attack;
        if !ids.contains(&a.target.as_str()) {
            return Err(AptError::Config(format!("attack.target `{}` is not a configured classifier", a.target)));
        }
        if !ids.contains(&a.oracle.as_str()) {
            return Err(AptError::Config(format!("attack.oracle `{}` is not a configured classifier", a.oracle)));
        }
        if a.oracle == a.target {
            return Err(AptError::Config("the oracle classifier cannot be the attack target".into()));
        }
        if a.per_class == 0 {
            return Err(AptError::Config("attack.per_class must be at least 1".into()));
        }
        positive("attack.alpha_rel", a.alpha_rel)?;
        self.attack_config(&a.target, TermMask::ALL, 0)?.validate()?;
        self.finetune_config(0).validate()?;
        if self.sweep.d_values.is_empty() {
            return Err(AptError::Config("sweep.d_values must not be empty".into()));
        }
        for &d in &self.sweep.d_values {
            positive("sweep.d_values entries", d)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn classifier_spec(&self, id: &str) -> Result<&ClassifierSpec> {
        self.pretrain
            .classifiers
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| AptError::Config(format!("unknown classifier `{id}`")))
    }

    /// Ids of the classifiers that may be attacked, i.e. all but the oracle.
    pub fn zoo_ids(&self) -> Vec<String> {
        self.pretrain
            .classifiers
            .iter()
            .filter(|c| c.id != self.attack.oracle)
            .map(|c| c.id.clone())
            .collect()
    }

    pub fn classifier_train(&self, id: &str) -> Result<TrainConfig> {
        let c = self.classifier_spec(id)?;
        Ok(TrainConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            seed: derive_seed(self.seed, &format!("classifier/{id}")),
        })
    }

    pub fn perceptual_train(&self) -> TrainConfig {
        let p = &self.pretrain.perceptual;
        TrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: derive_seed(self.seed, "perceptual"),
        }
    }

    pub fn gan_train(&self) -> GanTrainConfig {
        let g = &self.pretrain.gan;
        GanTrainConfig {
            epochs: g.epochs,
            batch_size: g.batch_size,
            lr_g: g.lr_g,
            lr_d: g.lr_d,
            ema_decay: g.ema_decay,
            seed: derive_seed(self.seed, "gan"),
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        let i = &self.inversion;
        InversionConfig {
            iterations: i.iterations,
            lr_max: i.lr_max,
            warmup_iters: i.warmup_iters,
            cosine_tail_iters: i.cosine_tail_iters,
            lambda_n: self.weights.lambda_n,
            init_samples: i.init_samples,
            seed: derive_seed(self.seed, "inversion"),
        }
    }

    /// Attack settings against `target`; `alpha` is the resolved absolute radius.
    pub fn attack_config(&self, target: &str, mask: TermMask, campaign_seed: u64) -> Result<AttackConfig> {
        self.classifier_spec(target)?;
        let a = &self.attack;
        Ok(AttackConfig {
            weights: self.weights,
            mask,
            d: a.d,
            alpha: 0.0,
            lr: a.lr,
            latent_lr: a.latent_lr,
            max_iters: a.max_iters,
            target: target.to_string(),
            seed: campaign_seed,
            resample_c_any: a.resample_c_any,
        })
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            lr: f.lr,
            epochs: f.epochs,
            batch_size: f.batch_size,
            mix: f.mix,
            seed,
        }
    }
}
