use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::fusenet::{BuildOptions, Topology};
use crate::tensor::Precision;

/// Training objective and wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Member 0 alone through the shared head.
    Plain,
    Deep,
    Shallow,
    Unidirectional,
    /// Mean of the member losses, members each with a private head.
    DecisionJoint,
    /// Sum of the member losses: each member only sees its own loss.
    DecisionSeparate,
    /// Deep fusion plus weighted per-stage auxiliary losses.
    DsnAux,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Plain,
        TrainMode::Deep,
        TrainMode::Shallow,
        TrainMode::Unidirectional,
        TrainMode::DecisionJoint,
        TrainMode::DecisionSeparate,
        TrainMode::DsnAux,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::Deep => "deep",
            TrainMode::Shallow => "shallow",
            TrainMode::Unidirectional => "unidirectional",
            TrainMode::DecisionJoint => "decision_joint",
            TrainMode::DecisionSeparate => "decision_separate",
            TrainMode::DsnAux => "dsn_aux",
        }
    }

    pub fn topology(self) -> Topology {
        match self {
            TrainMode::Plain => Topology::Member(0),
            TrainMode::Deep => Topology::Deep,
            TrainMode::Shallow => Topology::Shallow,
            TrainMode::Unidirectional => Topology::Unidirectional,
            TrainMode::DecisionJoint | TrainMode::DecisionSeparate => Topology::Decision,
            TrainMode::DsnAux => Topology::DeeplySupervised,
        }
    }

    /// Heads the mode needs beyond the shared one.
    pub fn build_options(self) -> BuildOptions {
        BuildOptions {
            aux_heads: self == TrainMode::DsnAux,
            member_heads: self.is_decision(),
        }
    }

    pub fn is_decision(self) -> bool {
        matches!(self, TrainMode::DecisionJoint | TrainMode::DecisionSeparate)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = TrainMode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown mode {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` after which the learning rate drops tenfold.
    pub lr_drop_points: Vec<f64>,
    /// Weight of each auxiliary loss in `dsn_aux` mode.
    pub aux_weight: f64,
    /// Random crops and flips on training batches.
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    pub precision: Precision,
    /// Batch size used for evaluation passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Deep,
            epochs: 10,
            batch: 100,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_drop_points: vec![0.5, 0.75, 0.875],
            aux_weight: 1.0,
            augment: true,
            augmentation: AugmentConfig::default(),
            seed: 0,
            precision: Precision::Single,
            eval_batch: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.aux_weight < 0.0 || !self.aux_weight.is_finite() {
            return bad(format!("aux_weight must be non-negative, got {}", self.aux_weight));
        }
        let mut prev = 0.0;
        for &p in &self.lr_drop_points {
            if !(p > prev && p < 1.0) {
                return bad(format!(
                    "lr drop points must be strictly increasing in (0, 1), got {:?}",
                    self.lr_drop_points
                ));
            }
            prev = p;
        }
        Ok(())
    }

    /// Learning rate of 0-based `epoch`: lr0 divided by 10 for every drop
    /// point already passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_drop_points
            .iter()
            .filter(|&&p| epoch as f64 >= p * self.epochs as f64)
            .count();
        self.lr0 * 10f64.powi(-(passed as i32))
    }
}

/// Free-function form of [`TrainConfig::lr_at`].
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr_at(epoch)
}
