use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One cyclical-learning-rate phase over epochs `start..end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClrPhase {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half a cycle, in epochs.
    pub step_size: u32,
    pub start_epoch: u32,
    pub end_epoch: u32,
}

impl ClrPhase {
    pub fn new(base_lr: f64, max_lr: f64, step_size: u32, start_epoch: u32, end_epoch: u32) -> Result<Self> {
        let p = ClrPhase { base_lr, max_lr, step_size, start_epoch, end_epoch };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr < self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::Schedule(format!(
                "phase needs 0 < base_lr < max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.step_size == 0 || self.start_epoch >= self.end_epoch {
            return Err(Error::Schedule(format!(
                "phase needs step_size >= 1 and start < end, got step {} over {}..{}",
                self.step_size, self.start_epoch, self.end_epoch
            )));
        }
        Ok(())
    }

    pub fn contains(&self, epoch: f64) -> bool {
        (self.start_epoch as f64..self.end_epoch as f64).contains(&epoch)
    }

    pub fn epochs(&self) -> u32 {
        self.end_epoch - self.start_epoch
    }
}

/// Triangular wave with amplitude halving every cycle (`triangular2`):
/// `lr = base + (max - base)·max(0, 1 - x)·2^(1-i)` with `i = floor(1 + p/(2s))`,
/// `x = |p/s - 2i + 1|` and `p` the epochs elapsed in the phase.
pub fn clr_lr(epoch: f64, phase: &ClrPhase) -> f64 {
    let s = phase.step_size as f64;
    let p = (epoch - phase.start_epoch as f64).max(0.0);
    let cycle = (1.0 + p / (2.0 * s)).floor();
    let x = (p / s - 2.0 * cycle + 1.0).abs();
    phase.base_lr + (phase.max_lr - phase.base_lr) * (1.0 - x).max(0.0) * 2f64.powf(1.0 - cycle)
}

/// Contiguous phases starting at epoch 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSchedule {
    phases: Vec<ClrPhase>,
}

impl PhaseSchedule {
    pub fn new(phases: Vec<ClrPhase>) -> Result<Self> {
        let mut expected = phases.first().map_or(0, |p| p.start_epoch);
        for p in &phases {
            p.validate()?;
            if p.start_epoch != expected {
                return Err(Error::Schedule(format!(
                    "phase starting at epoch {} leaves a gap or overlap (expected {expected})",
                    p.start_epoch
                )));
            }
            expected = p.end_epoch;
        }
        if phases.is_empty() {
            return Err(Error::Schedule("schedule has no phases".into()));
        }
        Ok(PhaseSchedule { phases })
    }

    /// The six recorded phases spanning 108 epochs.
    pub fn replay() -> Self {
        let rows = [
            (1e-4, 6e-4, 6, 0, 24),
            (1e-5, 6e-5, 6, 24, 48),
            (1e-5, 6e-5, 4, 48, 72),
            (1e-6, 6e-6, 2, 72, 84),
            (1e-5, 6e-5, 2, 84, 96),
            (1e-7, 6e-7, 2, 96, 108),
        ];
        let phases = rows
            .into_iter()
            .map(|(b, m, s, a, e)| ClrPhase { base_lr: b, max_lr: m, step_size: s, start_epoch: a, end_epoch: e })
            .collect();
        PhaseSchedule::new(phases).expect("replay table is contiguous")
    }

    pub fn phases(&self) -> &[ClrPhase] {
        &self.phases
    }

    pub fn start_epoch(&self) -> u32 {
        self.phases[0].start_epoch
    }

    pub fn end_epoch(&self) -> u32 {
        self.phases[self.phases.len() - 1].end_epoch
    }

    pub fn phase_at(&self, epoch: f64) -> Result<&ClrPhase> {
        self.phases.iter().find(|p| p.contains(epoch)).ok_or_else(|| {
            Error::Schedule(format!(
                "epoch {epoch} outside the schedule span {}..{}",
                self.start_epoch(),
                self.end_epoch()
            ))
        })
    }

    /// Learning rate at a fractional epoch (`epoch + batch / batches_per_epoch`).
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        self.phase_at(epoch).map(|p| clr_lr(epoch, p))
    }

    /// CSV `epoch_frac,lr` sampled `points_per_epoch` times per epoch.
    pub fn trace_csv(&self, points_per_epoch: u32) -> String {
        let mut out = String::from("epoch_frac,lr\n");
        let n = points_per_epoch.max(1);
        for k in self.start_epoch() * n..self.end_epoch() * n {
            let e = k as f64 / n as f64;
            if let Ok(lr) = self.lr_at(e) {
                let _ = writeln!(out, "{e},{lr:e}");
            }
        }
        out
    }
}

/// [`PhaseSchedule::replay`] at a fractional epoch; errors from epoch 108 on.
pub fn replay_schedule(epoch: f64) -> Result<f64> {
    PhaseSchedule::replay().lr_at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn wave_landmarks() {
        let p = ClrPhase::new(1e-4, 6e-4, 6, 0, 24).unwrap();
        assert!(close(clr_lr(0.0, &p), 1e-4));
        assert!(close(clr_lr(6.0, &p), 6e-4));
        assert!(close(clr_lr(12.0, &p), 1e-4));
        assert!(close(clr_lr(18.0, &p), 3.5e-4));
        assert!(close(clr_lr(3.0, &p), 3.5e-4));
    }

    #[test]
    fn peaks_halve_and_cycle_boundaries_hit_base() {
        let p = ClrPhase::new(2e-5, 1e-4, 3, 10, 70).unwrap();
        for i in 1..=10u32 {
            let peak = clr_lr(10.0 + (2 * i - 1) as f64 * 3.0, &p);
            let expected = 2e-5 + 8e-5 / 2f64.powi(i as i32 - 1);
            assert!(close(peak, expected), "cycle {i}");
            assert!(close(clr_lr(10.0 + (2 * i) as f64 * 3.0, &p), 2e-5));
        }
        // Continuity across a cycle boundary.
        let b = 10.0 + 6.0;
        assert!((clr_lr(b - 1e-9, &p) - clr_lr(b + 1e-9, &p)).abs() < 1e-12);
    }

    #[test]
    fn replay_spot_values() {
        assert!(close(replay_schedule(0.0).unwrap(), 1e-4));
        assert!(close(replay_schedule(24.0).unwrap(), 1e-5));
        // Phase 5, local epoch 6: cycle 2 peak.
        assert!(close(replay_schedule(90.0).unwrap(), 1e-5 + 5e-5 / 2.0));
        assert!(replay_schedule(108.0).is_err());
        assert!(replay_schedule(-0.5).is_err());
        for e in 0..108 {
            let n = PhaseSchedule::replay().phases().iter().filter(|p| p.contains(e as f64)).count();
            assert_eq!(n, 1);
        }
    }

    #[test]
    fn schedule_validation() {
        let a = ClrPhase::new(1e-4, 6e-4, 2, 0, 10).unwrap();
        let b = ClrPhase::new(1e-4, 6e-4, 2, 12, 20).unwrap();
        assert!(PhaseSchedule::new(vec![a, b]).is_err());
        assert!(ClrPhase::new(6e-4, 1e-4, 2, 0, 10).is_err());
        assert!(ClrPhase::new(1e-4, 6e-4, 0, 0, 10).is_err());
    }
}
