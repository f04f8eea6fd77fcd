//! Learning-rate plateau schedule driven by an exponential moving average of
//! the per-step loss.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub lr_init: f64,
    pub lr_floor: f64,
    pub decay_factor: f64,
    /// Steps without a new EMA minimum before the rate is cut.
    pub patience: u64,
    pub ema_decay: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            lr_init: 5e-4,
            lr_floor: 1e-4,
            decay_factor: 0.9,
            patience: 500,
            ema_decay: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub ema: Option<f64>,
    pub best: f64,
    pub since_best: u64,
}

impl Plateau {
    pub fn new(cfg: &PlateauConfig) -> Self {
        Self {
            lr: cfg.lr_init,
            ema: None,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Folds one step's loss into the EMA and returns the rate for the next step.
    pub fn observe(&mut self, loss: f64, cfg: &PlateauConfig) -> f64 {
        let ema = match self.ema {
            None => loss,
            Some(e) => e + (1.0 - cfg.ema_decay) * (loss - e),
        };
        self.ema = Some(ema);
        // the first observation only seeds the minimum
        if ema < self.best && self.best.is_finite() {
            self.best = ema;
            self.since_best = 0;
        } else {
            self.best = self.best.min(ema);
            self.since_best += 1;
        }
        if self.since_best >= cfg.patience {
            self.lr = (self.lr * cfg.decay_factor).max(cfg.lr_floor);
            self.since_best = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patience: u64) -> PlateauConfig {
        PlateauConfig {
            patience,
            ..Default::default()
        }
    }

    #[test]
    fn decreasing_loss_keeps_rate() {
        let c = cfg(5);
        let mut p = Plateau::new(&c);
        for i in 0..200 {
            assert_eq!(p.observe(1.0 - i as f64 * 1e-3, &c), 5e-4);
        }
    }

    #[test]
    fn constant_loss_two_windows_two_decays() {
        let c = cfg(500);
        let mut p = Plateau::new(&c);
        for _ in 0..1000 {
            p.observe(0.3, &c);
        }
        assert!((p.lr - 4.05e-4).abs() < 1e-15, "{}", p.lr);
    }

    #[test]
    fn floor_holds() {
        let c = cfg(1);
        let mut p = Plateau::new(&c);
        let mut prev = p.lr;
        for _ in 0..100 {
            let lr = p.observe(1.0, &c);
            assert!(lr <= prev && lr >= 1e-4);
            prev = lr;
        }
        assert_eq!(p.lr, 1e-4);
    }
}
