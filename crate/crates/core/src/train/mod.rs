//! Attribute-predictor pretraining, the coupled training loop and checkpoints.

mod checkpoint;
mod pretrain;
mod step;

pub use checkpoint::{load_checkpoint, load_predictor, save_checkpoint, save_predictor, CHECKPOINT_VERSION};
pub use pretrain::{
    attribute_accuracy, fit_predictor, predict_indices, pretrain_attribute_predictor, pretrain_dataset, PretrainConfig,
    PretrainReport, PretrainSource,
};
pub use step::{
    checkpoint_name, loss_csv, pretrain_for, resolve_config, train, train_step, StepRecord, TrainOutcome, TrainState,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Reduction};
use crate::nets::{DiscriminatorConfig, FeatureConfig, GeneratorConfig, PredictorConfig};
use crate::tensor::AdamConfig;

/// Which of the six generator-side terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMask {
    pub cpl: bool,
    pub e: bool,
    pub gan: bool,
    pub a: bool,
    pub ppol: bool,
    pub pa: bool,
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        cpl: true,
        e: true,
        gan: true,
        a: true,
        ppol: true,
        pa: true,
    };

    pub const NAMES: [&'static str; 6] = ["cpl", "e", "gan", "a", "ppol", "pa"];

    pub fn flags(&self) -> [bool; 6] {
        [self.cpl, self.e, self.gan, self.a, self.ppol, self.pa]
    }

    pub fn active_names(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn any(&self) -> bool {
        self.flags().iter().any(|&f| f)
    }
}

/// Named loss configurations used for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// All six terms.
    #[default]
    Full,
    /// Everything except the attribute-head loss.
    NoAttr,
    /// Coupling and reconstruction only.
    CplE,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoAttr, Ablation::CplE];

    pub fn mask(self) -> LossMask {
        match self {
            Ablation::Full => LossMask::ALL,
            Ablation::NoAttr => LossMask {
                a: false,
                ..LossMask::ALL
            },
            Ablation::CplE => LossMask {
                cpl: true,
                e: true,
                gan: false,
                a: false,
                ppol: false,
                pa: false,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAttr => "no-attr",
            Ablation::CplE => "cpl-e",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?} (expected full, no-attr or cpl-e)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Generator optimizer.
    pub adam: AdamConfig,
    /// Discriminator optimizer.
    pub disc_adam: AdamConfig,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Overrides the preset mask when set.
    pub mask: Option<LossMask>,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub reduction: Reduction,
    /// Global gradient-norm clip per network; off when `None`.
    pub grad_clip: Option<f64>,
    /// Generator template; input channels are set per modality.
    pub generator: GeneratorConfig,
    /// Discriminator template; condition channels are set per modality.
    pub discriminator: DiscriminatorConfig,
    pub feature: FeatureConfig,
    /// Build the perceptual network from the pretrained predictor trunk.
    pub feature_from_predictor: bool,
    pub predictor: PredictorConfig,
    pub pretrain: PretrainConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            disc_adam: AdamConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::Full,
            mask: None,
            checkpoint_every: 0,
            reduction: Reduction::Mean,
            grad_clip: None,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            feature: FeatureConfig::default(),
            feature_from_predictor: true,
            predictor: PredictorConfig::default(),
            pretrain: PretrainConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced-width networks sized for the CPU benchmark.
    pub fn benchmark() -> Self {
        let mut c = Self {
            steps: 400,
            ..Self::default()
        };
        c.generator.base_width = 8;
        c.generator.embed_dim = 32;
        c.generator.head_width = 8;
        c.discriminator.base_width = 8;
        c.predictor.base_width = 8;
        c.feature.base_width = 8;
        // Held-out accuracy plateaus well before the default budget.
        c.pretrain.steps = 300;
        c
    }

    pub fn mask(&self) -> LossMask {
        self.mask.unwrap_or_else(|| self.ablation.mask())
    }

    pub fn generator_for(&self, in_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels,
            out_channels: 1,
            attributes: NUM_ATTRIBUTES,
            ..self.generator.clone()
        }
    }

    pub fn discriminator_for(&self, cond_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            cond_channels,
            candidate_channels: 1,
            ..self.discriminator.clone()
        }
    }

    /// Perceptual network configuration actually used.
    pub fn feature_config(&self) -> FeatureConfig {
        if self.feature_from_predictor {
            FeatureConfig {
                in_channels: 1,
                base_width: self.predictor.base_width,
                blocks: self.feature.blocks.min(self.predictor.blocks),
            }
        } else {
            self.feature.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            )));
        }
        if !self.mask().any() {
            return Err(Error::InvalidArgument("at least one loss term must be active".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidArgument(format!("grad_clip must be positive, got {c}")));
            }
        }
        for (name, a) in [("adam", &self.adam), ("disc_adam", &self.disc_adam)] {
            let ok = a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0;
            if !ok {
                return Err(Error::InvalidArgument(format!("{name}: invalid optimizer settings {a:?}")));
            }
        }
        self.weights.validate()?;
        self.preprocess.validate()?;
        self.generator_for(3).validate()?;
        self.pretrain.validate()?;
        Ok(())
    }
}
