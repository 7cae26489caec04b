//! Losses, pair sampling, optimization and the epoch loop.

mod losses;
mod optim;
mod sampler;
mod train;

pub use losses::{bce, loss_cls, loss_loc, sample_loss_cls, sample_loss_loc, sample_loss_node, total_loss};
pub use optim::{adam_step, AdamConfig, OptimizerState, PlateauSchedule};
pub use sampler::{sample_pair, Sampler, SamplerConfig};
pub use train::{
    load_optimizer_state, metrics_csv, save_optimizer_state, split_clips, train, EpochLog, TrainOptions, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::phonetics::Query;

/// One supervised example: a (possibly cropped) clip, a query and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub clip: String,
    /// Frame range of the source clip covered by `features`.
    pub crop: (usize, usize),
    pub features: FeatureSequence,
    pub query: Query,
    pub y_cls: u8,
    pub y_loc: Vec<u8>,
}

impl TrainingPair {
    /// `[start, end)` of the first run of positive frames.
    pub fn span(&self) -> Option<(usize, usize)> {
        let s = self.y_loc.iter().position(|&y| y == 1)?;
        let len = self.y_loc[s..].iter().take_while(|&&y| y == 1).count();
        Some((s, s + len))
    }

    /// Negatives have no positive frame; positives have at least one.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Error::Validation {
            clip: self.clip.clone(),
            msg: msg.into(),
        };
        if self.y_loc.len() != self.features.frames() {
            return Err(bad("frame labels do not match the crop length"));
        }
        if self.y_loc.iter().any(|&y| y > 1) || self.y_cls > 1 {
            return Err(bad("labels must be 0 or 1"));
        }
        match (self.y_cls, self.span()) {
            (0, None) | (1, Some(_)) => Ok(()),
            (0, Some(_)) => Err(bad("negative pair with positive frames")),
            _ => Err(bad("positive pair without positive frames")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the presence loss against the localization loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Pairs drawn per epoch; 0 means one per training clip.
    pub samples_per_epoch: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// The learning rate is divided by this on a plateau.
    pub lr_decay: f64,
    /// Epochs without validation improvement that count as a plateau.
    pub patience: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub val_fraction: f64,
    /// Fixed validation pairs; 0 means four per validation clip.
    pub val_pairs: usize,
    pub min_phonemes: usize,
    pub crop_prob: f64,
    pub phrase_prob: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            lambda: 0.5,
            batch_size: 16,
            epochs: 280,
            samples_per_epoch: 0,
            lr: 5e-5,
            min_lr: 1e-6,
            lr_decay: 5.0,
            patience: 15,
            clip_norm: 1.0,
            val_fraction: 0.1,
            val_pairs: 0,
            min_phonemes: s.min_phonemes,
            crop_prob: s.crop_prob,
            phrase_prob: s.phrase_prob,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return fail(format!("need 0 < min_lr <= lr, got {} and {}", self.min_lr, self.lr));
        }
        if self.lr_decay <= 1.0 {
            return fail("lr_decay must exceed 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)".into());
        }
        if self.clip_norm < 0.0 || !self.clip_norm.is_finite() {
            return fail("clip_norm must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            min_phonemes: self.min_phonemes,
            crop_prob: self.crop_prob,
            phrase_prob: self.phrase_prob,
            ..SamplerConfig::default()
        }
    }

    pub fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule {
            min_lr: self.min_lr,
            factor: self.lr_decay,
            patience: self.patience,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(y_cls: u8, y_loc: Vec<u8>) -> TrainingPair {
        TrainingPair {
            clip: "c".into(),
            crop: (0, y_loc.len()),
            features: FeatureSequence::new(y_loc.len(), 1, vec![0.0; y_loc.len()]).unwrap(),
            query: Query { ids: vec![1, 2, 3], text: "X".into() },
            y_cls,
            y_loc,
        }
    }

    #[test]
    fn label_checks() {
        assert!(pair(0, vec![0; 4]).check().is_ok());
        assert!(pair(1, vec![0, 1, 1, 0]).check().is_ok());
        // A repeated keyword gives two runs; the span is the first.
        let twice = pair(1, vec![1, 0, 1, 1]);
        assert!(twice.check().is_ok());
        assert_eq!(twice.span(), Some((0, 1)));
        assert!(pair(0, vec![0, 1, 0]).check().is_err());
        assert!(pair(1, vec![0; 3]).check().is_err());
        assert!(pair(1, vec![2, 0]).check().is_err());
    }

    #[test]
    fn config_json_and_validation() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"lr": 0.001}"#).unwrap();
        assert_eq!(partial.epochs, cfg.epochs);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
        for bad in [
            TrainConfig { lambda: 1.5, ..cfg.clone() },
            TrainConfig { min_lr: 1.0, ..cfg.clone() },
            TrainConfig { lr_decay: 1.0, ..cfg.clone() },
            TrainConfig { batch_size: 0, ..cfg.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
