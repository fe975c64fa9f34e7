use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DEFAULT_BBOX_CONF};
use crate::error::{Error, Result};
use crate::protobank::{DEFAULT_CAPACITY, DEFAULT_PER_IMAGE_LIMIT};
use crate::ranksim::{Similarity, DEFAULT_K};
use crate::reliability::DEFAULT_TAU;
use crate::segmodel::DEFAULT_HIDDEN;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the unsupervised loss.
    pub alpha: f64,
    /// Teacher confidence threshold.
    pub tau: f64,
    /// Top-k size for rank similarity.
    pub k: usize,
    /// Detector confidence threshold for reliable-pixel boxes.
    pub bbox_conf: f64,
    pub ema_momentum: f64,
    pub lr: f64,
    /// First-moment decay (beta1) of the student's Adam optimizer.
    pub momentum: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub seed: u64,
    pub bank_capacity: usize,
    pub per_image_limit: usize,
    pub hidden: usize,
    pub similarity: Similarity,
    /// Weight pseudo-labels by prototype similarity; otherwise every weight is 1.
    pub use_ppw: bool,
    /// Feed detector-confirmed unlabeled pixels into the bank; otherwise
    /// only labeled pixels are stored.
    pub use_rppi: bool,
    /// Weight cut-off of the weighted selection used in pseudo-label metrics.
    pub weight_selection: f64,
    /// Class that never gets boxes.
    pub background_class: usize,
    /// Keep per-step loss components in the state.
    pub log_steps: bool,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            bbox_conf: DEFAULT_BBOX_CONF,
            ema_momentum: 0.99,
            lr: 0.02,
            momentum: 0.9,
            epochs: 30,
            steps_per_epoch: 20,
            labeled_batch: 4,
            unlabeled_batch: 4,
            seed: 0,
            bank_capacity: DEFAULT_CAPACITY,
            per_image_limit: DEFAULT_PER_IMAGE_LIMIT,
            hidden: DEFAULT_HIDDEN,
            similarity: Similarity::Rank,
            use_ppw: true,
            use_rppi: true,
            weight_selection: 0.8,
            background_class: 0,
            log_steps: false,
            detector: DetectorConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}

impl TrainConfig {
    /// The plain confidence-threshold arm: no weighting, no detector in the bank.
    pub fn baseline(self) -> Self {
        Self {
            use_ppw: false,
            use_rppi: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.alpha.is_finite() && self.alpha >= 0.0, || {
            format!("alpha must be ≥ 0, got {}", self.alpha)
        })?;
        check(self.tau > 0.0 && self.tau <= 1.0, || {
            format!("tau must be in (0, 1], got {}", self.tau)
        })?;
        check(self.bbox_conf > 0.0 && self.bbox_conf <= 1.0, || {
            format!("bbox_conf must be in (0, 1], got {}", self.bbox_conf)
        })?;
        check((0.0..1.0).contains(&self.ema_momentum), || {
            format!("ema_momentum must be in [0, 1), got {}", self.ema_momentum)
        })?;
        check(self.lr.is_finite() && self.lr > 0.0, || {
            format!("lr must be positive, got {}", self.lr)
        })?;
        check((0.0..1.0).contains(&self.momentum), || {
            format!("momentum must be in [0, 1), got {}", self.momentum)
        })?;
        check(self.hidden >= 1, || "hidden must be at least 1".into())?;
        check(self.k >= 1 && self.k <= self.hidden, || {
            format!("k must be in 1..={} (feature dimension), got {}", self.hidden, self.k)
        })?;
        check(self.steps_per_epoch >= 1, || {
            "steps_per_epoch must be at least 1".into()
        })?;
        check(self.labeled_batch >= 1, || "labeled_batch must be at least 1".into())?;
        check(self.unlabeled_batch >= 1, || {
            "unlabeled_batch must be at least 1".into()
        })?;
        check(self.bank_capacity >= 1, || "bank_capacity must be at least 1".into())?;
        check(self.per_image_limit >= 1, || {
            "per_image_limit must be at least 1".into()
        })?;
        check((0.0..=1.0).contains(&self.weight_selection), || {
            format!("weight_selection must be in [0, 1], got {}", self.weight_selection)
        })?;
        let d = &self.detector;
        check(
            d.crop_size >= 1 && !d.scales.is_empty() && d.scales.iter().all(|&s| s >= 1),
            || "detector crop_size and scales must be positive".into(),
        )?;
        check(d.lr.is_finite() && d.lr > 0.0 && d.batch_size >= 1, || {
            "detector lr and batch_size must be positive".into()
        })?;
        Ok(())
    }
}
