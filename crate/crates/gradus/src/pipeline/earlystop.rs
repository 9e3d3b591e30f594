//! Early stopping on validation Acc0 with MSE as the tie-breaker.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Improvement means Acc0 strictly increased, or Acc0 tied and MSE
/// strictly decreased. Training stops after `patience` epochs without one.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best_acc0: f64,
    pub best_mse: f64,
    pub best_epoch: usize,
    pub epochs_without_improvement: usize,
    pub patience: usize,
    seen_any: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_acc0: f64::NEG_INFINITY,
            best_mse: f64::INFINITY,
            best_epoch: 0,
            epochs_without_improvement: 0,
            patience,
            seen_any: false,
        }
    }

    /// Records one validation result; returns whether the caller should
    /// keep training. The first observation always counts as the best.
    pub fn update(&mut self, val_acc0: f64, val_mse: f64, epoch: usize) -> StopDecision {
        assert!(
            val_acc0.is_finite() && val_mse.is_finite(),
            "early stopping needs finite metrics"
        );
        let improved = !self.seen_any
            || val_acc0 > self.best_acc0
            || (val_acc0 == self.best_acc0 && val_mse < self.best_mse);
        if improved {
            self.seen_any = true;
            self.best_acc0 = val_acc0;
            self.best_mse = val_mse;
            self.best_epoch = epoch;
            self.epochs_without_improvement = 0;
        } else {
            self.epochs_without_improvement += 1;
        }
        if self.epochs_without_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(10)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_improvement_never_stops() {
        let mut state = EarlyStopState::new(10);
        for epoch in 0..100 {
            let acc = epoch as f64 / 100.0;
            assert_eq!(state.update(acc, 1.0, epoch), StopDecision::Continue);
        }
        assert_eq!(state.best_epoch, 99);
    }

    #[test]
    fn constant_metrics_stop_at_patience() {
        let mut state = EarlyStopState::new(10);
        let mut stopped_at = None;
        for epoch in 0..50 {
            if state.update(0.5, 1.0, epoch) == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(10));
        assert_eq!(state.best_epoch, 0);
    }

    #[test]
    fn acc_tie_with_mse_drop_counts_as_improvement() {
        let mut state = EarlyStopState::new(2);
        state.update(0.5, 1.0, 0);
        state.update(0.5, 0.9, 1);
        assert_eq!(state.best_epoch, 1);
        assert_eq!(state.epochs_without_improvement, 0);
        // MSE increase at equal acc is not an improvement.
        state.update(0.5, 0.95, 2);
        assert_eq!(state.best_epoch, 1);
        assert_eq!(state.epochs_without_improvement, 1);
    }
}
