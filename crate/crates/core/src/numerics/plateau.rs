/// Reduce-on-plateau learning-rate schedule (lower metric is better).
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
    reductions: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one epoch's metric and returns the learning rate to use next.
    /// Non-finite metrics count as non-improving epochs.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric.is_finite() && metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            let next = (self.lr * self.factor).max(self.min_lr);
            if next < self.lr {
                self.reductions += 1;
            }
            self.lr = next;
            self.bad_epochs = 0;
        }
        self.lr
    }
}
