use std::path::PathBuf;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::NetConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Fixed,
    /// `base_lr · γ^epoch`.
    Exponential { gamma: f64 },
    /// `(first epoch, lr)` breakpoints in increasing epoch order; epochs
    /// before the first breakpoint use `base_lr`.
    Piecewise(Vec<(usize, f64)>),
}

/// Starting point of the prediction layer `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Start {
    /// Glorot weights and zero bias, like every other layer.
    Glorot,
    /// Zero weights and a bias emitting the identity transform in every
    /// grid cell, so the untrained model returns its input.
    IdentityGrid,
}

pub const DEFAULT_GAMMA: f64 = 0.7;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
    /// How the prediction layer starts out.
    pub start: Start,
    pub net: NetConfig,
    /// Written at the end of every epoch, with optimizer state.
    pub checkpoint: Option<PathBuf>,
    /// CSV metrics log.
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint's last finished epoch.
    pub resume: Option<PathBuf>,
    /// Pairs for the per-epoch evaluation row; the training set when absent.
    pub validation: Option<Dataset>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            schedule: Schedule::Exponential { gamma: DEFAULT_GAMMA },
            epochs: 10,
            batch_size: 4,
            seed: 0,
            start: Start::IdentityGrid,
            net: NetConfig::default(),
            checkpoint: None,
            metrics: None,
            resume: None,
            validation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        match &self.schedule {
            Schedule::Fixed => {}
            Schedule::Exponential { gamma } => {
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(Error::Config(format!("decay γ = {gamma} outside (0, 1]")));
                }
            }
            Schedule::Piecewise(points) => {
                if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::Config("piecewise breakpoints must have increasing epochs".into()));
                }
                if let Some((e, lr)) = points.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
                    return Err(Error::Config(format!("piecewise rate {lr} at epoch {e} must be positive")));
                }
            }
        }
        self.net.validate()
    }
}

/// Learning rate used for every step of `epoch` (0-based).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    Ok(match &cfg.schedule {
        Schedule::Fixed => cfg.base_lr,
        Schedule::Exponential { gamma } => cfg.base_lr * gamma.powi(epoch as i32),
        Schedule::Piecewise(points) => points
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map_or(cfg.base_lr, |&(_, lr)| lr),
    })
}
