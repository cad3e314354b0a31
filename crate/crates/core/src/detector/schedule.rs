//! Plateau-driven learning-rate decay.

/// Cuts the learning rate by `factor` once the epoch loss has failed to
/// improve on its best value by a relative `threshold` for `patience`
/// consecutive epochs; never goes below `min_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    best: f64,
    bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub threshold: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64, min_lr: f64, threshold: f64) -> Self {
        Self {
            lr: lr.max(min_lr),
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
            min_lr,
            threshold,
        }
    }

    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.patience, cfg.factor, cfg.min_lr, cfg.threshold)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Records one epoch's mean loss and returns the learning rate for the
    /// next epoch.
    pub fn step(&mut self, epoch_loss: f64) -> f64 {
        if epoch_loss < self.best * (1.0 - self.threshold) || self.best.is_infinite() {
            self.best = epoch_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
