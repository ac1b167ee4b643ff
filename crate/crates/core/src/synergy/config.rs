use serde::{Deserialize, Serialize};

use crate::encoders::Aggregation;
use crate::error::{Error, Result};
use crate::hypernet::{ResidualMode, EBI_GATE_BIAS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Uniform neighbor weights in the drug encoder.
    NoTransformer,
    /// Drug-disease relation weight forced to zero.
    NoDisease,
    NoResidual,
    PlainResidual,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoTransformer,
        Ablation::NoDisease,
        Ablation::NoResidual,
        Ablation::PlainResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoTransformer => "no_transformer",
            Ablation::NoDisease => "no_disease",
            Ablation::NoResidual => "no_residual",
            Ablation::PlainResidual => "plain_residual",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

fn default_learning_rate() -> f64 {
    2e-4
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_dropout_rate() -> f64 {
    0.2
}
fn default_max_epochs() -> usize {
    500
}
fn default_patience() -> usize {
    20
}
fn default_batch_size() -> usize {
    128
}
fn default_interaction_weight() -> f64 {
    0.02
}
fn default_heads() -> usize {
    4
}
fn default_refinement_layers() -> usize {
    3
}
fn default_common_dim() -> usize {
    128
}
fn default_gtn_layers() -> usize {
    2
}
fn default_head_hidden() -> Vec<usize> {
    vec![256, 64]
}
fn default_gate_bias() -> f64 {
    EBI_GATE_BIAS
}
fn default_residual_mode() -> ResidualMode {
    ResidualMode::GatedResidual
}

/// Training hyperparameters and ablation switches. Everything but `seed`
/// has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_interaction_weight")]
    pub interaction_weight: f64,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_refinement_layers")]
    pub refinement_layers: usize,
    #[serde(default = "default_common_dim")]
    pub common_dim: usize,
    #[serde(default = "default_gtn_layers")]
    pub gtn_layers: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_gate_bias")]
    pub gate_bias: f64,
    #[serde(default)]
    pub no_transformer: bool,
    #[serde(default)]
    pub no_disease: bool,
    #[serde(default = "default_residual_mode")]
    pub residual_mode: ResidualMode,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            dropout_rate: default_dropout_rate(),
            max_epochs: default_max_epochs(),
            early_stop_patience: default_patience(),
            batch_size: default_batch_size(),
            seed,
            interaction_weight: default_interaction_weight(),
            heads: default_heads(),
            refinement_layers: default_refinement_layers(),
            common_dim: default_common_dim(),
            gtn_layers: default_gtn_layers(),
            head_hidden: default_head_hidden(),
            gate_bias: default_gate_bias(),
            no_transformer: false,
            no_disease: false,
            residual_mode: default_residual_mode(),
        }
    }

    /// Smaller widths and a shorter schedule for CPU-scale runs on the
    /// synthetic fixture.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 30,
            early_stop_patience: 5,
            batch_size: 512,
            common_dim: 32,
            head_hidden: vec![64, 32],
            ..TrainConfig::new(seed)
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::NoTransformer => self.no_transformer = true,
            Ablation::NoDisease => {
                self.no_disease = true;
                self.interaction_weight = 0.0;
            }
            Ablation::NoResidual => self.residual_mode = ResidualMode::NoResidual,
            Ablation::PlainResidual => self.residual_mode = ResidualMode::PlainResidual,
        }
        self
    }

    /// Relation weight actually used for drug-disease hyperedges.
    pub fn effective_interaction_weight(&self) -> f64 {
        if self.no_disease {
            0.0
        } else {
            self.interaction_weight
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        if self.no_transformer {
            Aggregation::Mean
        } else {
            Aggregation::Attention
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.interaction_weight >= 0.0 && self.interaction_weight.is_finite()) {
            return fail(format!(
                "interaction_weight must be nonnegative, got {}",
                self.interaction_weight
            ));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return fail("max_epochs and batch_size must be positive".into());
        }
        if self.refinement_layers == 0 {
            return fail("refinement_layers must be at least 1".into());
        }
        if self.gtn_layers == 0 {
            return fail("gtn_layers must be at least 1".into());
        }
        if self.heads == 0 || !self.common_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "common_dim {} must be divisible by heads {}",
                self.common_dim, self.heads
            ));
        }
        if self.head_hidden.contains(&0) {
            return fail("head_hidden widths must be positive".into());
        }
        if !self.gate_bias.is_finite() {
            return fail("gate_bias must be finite".into());
        }
        Ok(())
    }
}
