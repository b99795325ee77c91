use crate::error::{Error, Result};

/// Reduce-on-plateau controller over validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub patience: u32,
    pub factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
    best: f64,
    wait: u32,
}

impl Default for Plateau {
    fn default() -> Self {
        Plateau::new(5, 0.1, 1e-4, 1e-7).expect("defaults are valid")
    }
}

impl Plateau {
    pub fn new(patience: u32, factor: f64, min_delta: f64, min_lr: f64) -> Result<Self> {
        if patience == 0 || !(factor > 0.0 && factor < 1.0) || min_delta < 0.0 || min_lr < 0.0 {
            return Err(Error::invalid(format!(
                "plateau needs patience >= 1, 0 < factor < 1, min_delta >= 0, min_lr >= 0; got {patience}, {factor}, {min_delta}, {min_lr}"
            )));
        }
        Ok(Plateau { patience, factor, min_delta, min_lr, best: f64::INFINITY, wait: 0 })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn wait(&self) -> u32 {
        self.wait
    }

    pub fn restore(&mut self, best: f64, wait: u32) {
        self.best = best;
        self.wait = wait;
    }

    /// Feeds one epoch's validation loss and returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_loss_keeps_lr() {
        let mut p = Plateau::default();
        let mut lr = 1e-3;
        for k in 0..20 {
            lr = p.step(1.0 - k as f64 * 0.01, lr);
        }
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn constant_loss_reduces_every_five_epochs() {
        let mut p = Plateau::default();
        let mut lr = p.step(1.0, 1e-3);
        let mut seen = Vec::new();
        for _ in 0..10 {
            lr = p.step(1.0, lr);
            seen.push(lr);
        }
        assert_eq!(seen[3], 1e-3);
        assert!((seen[4] - 1e-4).abs() < 1e-18);
        assert!((seen[8] - 1e-4).abs() < 1e-18);
        assert!((seen[9] - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn never_raises_and_respects_floor() {
        let mut p = Plateau::new(1, 0.5, 0.0, 1e-3).unwrap();
        let mut lr = 4e-3;
        for _ in 0..10 {
            let next = p.step(2.0, lr);
            assert!(next <= lr && next >= 1e-3);
            lr = next;
        }
        assert_eq!(lr, 1e-3);
        assert_eq!(p.step(5.0, 1e-4), 1e-4);
        assert!(Plateau::new(0, 0.1, 0.0, 0.0).is_err());
    }
}
