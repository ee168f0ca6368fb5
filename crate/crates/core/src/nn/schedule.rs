//! Learning-rate reduction on plateau and early stopping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Min,
    Max,
}

/// Multiplies the learning rate by `factor` once the monitored value has failed to
/// improve for more than `patience` consecutive epochs. Improvement is relative:
/// `v < best·(1 − 1e-4)` in `Min` mode, `v > best·(1 + 1e-4)` in `Max` mode.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    mode: Mode,
    factor: f64,
    patience: usize,
    min_lr: f64,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

const REL_THRESHOLD: f64 = 1e-4;

impl PlateauScheduler {
    pub fn new(lr: f64, mode: Mode, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            mode,
            factor,
            patience,
            min_lr: 0.0,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    fn improves(&self, value: f64) -> bool {
        match (self.best, self.mode) {
            (None, _) => true,
            (Some(b), Mode::Min) => value < b - b.abs() * REL_THRESHOLD,
            (Some(b), Mode::Max) => value > b + b.abs() * REL_THRESHOLD,
        }
    }

    /// Record one epoch's metric and return the learning rate for the next epoch.
    pub fn step(&mut self, value: f64) -> f64 {
        if self.improves(value) {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// Tracks the best value of a maximized metric and signals when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns true when `value` is a new best (strictly greater).
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if self.best.map_or(true, |b| value > b) {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_stagnant_epochs_cut_lr_tenfold() {
        let mut s = PlateauScheduler::new(1e-5, Mode::Min, 0.1, 5);
        assert_eq!(s.step(1.0), 1e-5);
        for _ in 0..5 {
            assert_eq!(s.step(1.0), 1e-5);
        }
        let lr = s.step(1.0);
        assert!((lr - 1e-6).abs() < 1e-18);
        // counter restarts after a reduction
        for _ in 0..5 {
            assert!((s.step(1.0) - 1e-6).abs() < 1e-18);
        }
        assert!((s.step(1.0) - 1e-7).abs() < 1e-19);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = PlateauScheduler::new(1.0, Mode::Max, 0.1, 2);
        s.step(0.5);
        s.step(0.5);
        s.step(0.5);
        s.step(0.6);
        s.step(0.6);
        s.step(0.6);
        assert_eq!(s.lr(), 1.0);
        s.step(0.6);
        assert_eq!(s.lr(), 0.1);
    }

    #[test]
    fn early_stopping_counts_epochs_since_best() {
        let mut e = EarlyStopping::new(2);
        assert!(e.update(0, 0.5));
        assert!(!e.update(1, 0.5));
        assert!(!e.should_stop());
        assert!(!e.update(2, 0.4));
        assert!(e.should_stop());
        assert_eq!(e.best_epoch(), 0);
    }
}
