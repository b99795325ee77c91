use std::collections::VecDeque;
use std::fmt;

use super::clr::ClrPhase;
use crate::error::{Error, Result};

/// Why a phase was scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseTag {
    Nominal,
    Escalated,
    DeEscalated,
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseTag::Nominal => "nominal",
            PhaseTag::Escalated => "escalated",
            PhaseTag::DeEscalated => "de-escalated",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseOutcome {
    pub phase: ClrPhase,
    pub tag: PhaseTag,
    pub best_val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EscalationConfig {
    /// Multiplier applied to a stagnant range.
    pub factor: f64,
    /// Divisor from one improving range to the next.
    pub decay: f64,
    /// Cycles in an escalated phase.
    pub escalation_cycles: u32,
    /// Cycles in a nominal or de-escalated phase.
    pub phase_cycles: u32,
}

impl Default for EscalationConfig {
    fn default() -> Self {
        EscalationConfig { factor: 100.0, decay: 10.0, escalation_cycles: 3, phase_cycles: 3 }
    }
}

fn shifted(from: &ClrPhase, scale: f64, start: u32, cycles: u32) -> ClrPhase {
    ClrPhase {
        base_lr: from.base_lr * scale,
        max_lr: from.max_lr * scale,
        step_size: from.step_size,
        start_epoch: start,
        end_epoch: start + 2 * from.step_size * cycles.max(1),
    }
}

/// Phases to run after the last entry of `history`.
///
/// Escalated phases are never judged. Any other phase whose best validation accuracy
/// does not exceed that of the last judged phase before it triggers an escalated phase
/// (its range times `factor`) followed by a de-escalated one back at the stagnant
/// range. An improving phase is followed by one nominal phase at `range / decay`.
pub fn adaptive_escalation(history: &[PhaseOutcome], cfg: &EscalationConfig) -> Result<Vec<(ClrPhase, PhaseTag)>> {
    let last = history.last().ok_or_else(|| Error::Schedule("escalation needs a completed phase".into()))?;
    let start = last.phase.end_epoch;
    if last.tag == PhaseTag::Escalated {
        return Err(Error::Schedule("an escalated phase is always followed by its de-escalated phase".into()));
    }
    let previous = history[..history.len() - 1]
        .iter()
        .rev()
        .find(|o| o.tag != PhaseTag::Escalated)
        .map(|o| o.best_val_acc);
    let stagnant = previous.is_some_and(|p| last.best_val_acc <= p);
    if stagnant {
        let up = shifted(&last.phase, cfg.factor, start, cfg.escalation_cycles);
        let down = shifted(&up, 1.0 / cfg.factor, up.end_epoch, cfg.phase_cycles);
        Ok(vec![(up, PhaseTag::Escalated), (down, PhaseTag::DeEscalated)])
    } else {
        Ok(vec![(shifted(&last.phase, 1.0 / cfg.decay, start, cfg.phase_cycles), PhaseTag::Nominal)])
    }
}

/// Drives [`adaptive_escalation`] during training: tracks the running phase, the best
/// validation accuracy seen in it and the queue of planned phases.
#[derive(Clone, Debug, PartialEq)]
pub struct EscalationController {
    cfg: EscalationConfig,
    current: ClrPhase,
    tag: PhaseTag,
    best: f64,
    queue: VecDeque<(ClrPhase, PhaseTag)>,
    history: Vec<PhaseOutcome>,
}

impl EscalationController {
    pub fn new(first: ClrPhase, cfg: EscalationConfig) -> Result<Self> {
        first.validate()?;
        Ok(EscalationController {
            cfg,
            current: first,
            tag: PhaseTag::Nominal,
            best: f64::NEG_INFINITY,
            queue: VecDeque::new(),
            history: Vec::new(),
        })
    }

    pub fn current(&self) -> (&ClrPhase, PhaseTag) {
        (&self.current, self.tag)
    }

    pub fn history(&self) -> &[PhaseOutcome] {
        &self.history
    }

    /// Learning rate at a fractional epoch inside the current phase.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        super::clr::clr_lr(epoch, &self.current)
    }

    /// Records the validation accuracy of a finished epoch; when that epoch closes the
    /// current phase, the next phase is chosen and returned.
    pub fn end_epoch(&mut self, epoch: u32, val_acc: f64) -> Result<Option<(ClrPhase, PhaseTag)>> {
        self.best = self.best.max(val_acc);
        if epoch + 1 < self.current.end_epoch {
            return Ok(None);
        }
        self.history.push(PhaseOutcome { phase: self.current, tag: self.tag, best_val_acc: self.best });
        if self.queue.is_empty() {
            self.queue.extend(adaptive_escalation(&self.history, &self.cfg)?);
        }
        let (next, tag) = self.queue.pop_front().expect("decision yields at least one phase");
        self.current = next;
        self.tag = tag;
        self.best = f64::NEG_INFINITY;
        Ok(Some((next, tag)))
    }

    /// Key=value lines for checkpoints; see [`EscalationController::from_state`].
    pub fn state_lines(&self) -> Vec<String> {
        let phase = |p: &ClrPhase| format!("{:e},{:e},{},{},{}", p.base_lr, p.max_lr, p.step_size, p.start_epoch, p.end_epoch);
        let mut lines = vec![
            format!("esc.current = {}", phase(&self.current)),
            format!("esc.tag = {}", self.tag),
            format!("esc.best = {:e}", self.best),
        ];
        for (p, t) in &self.queue {
            lines.push(format!("esc.queued = {};{t}", phase(p)));
        }
        for o in &self.history {
            lines.push(format!("esc.history = {};{};{:e}", phase(&o.phase), o.tag, o.best_val_acc));
        }
        lines
    }

    pub fn from_state(cfg: EscalationConfig, pairs: &[(String, String)]) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("escalation state: bad {what}"));
        let phase = |s: &str| -> Result<ClrPhase> {
            let f: Vec<&str> = s.split(',').collect();
            if f.len() != 5 {
                return Err(bad("phase"));
            }
            let lr = |v: &str| v.parse::<f64>().map_err(|_| bad("learning rate"));
            let ep = |v: &str| v.parse::<u32>().map_err(|_| bad("epoch"));
            ClrPhase::new(lr(f[0])?, lr(f[1])?, ep(f[2])?, ep(f[3])?, ep(f[4])?)
        };
        let tag = |s: &str| match s {
            "nominal" => Ok(PhaseTag::Nominal),
            "escalated" => Ok(PhaseTag::Escalated),
            "de-escalated" => Ok(PhaseTag::DeEscalated),
            _ => Err(bad("tag")),
        };
        let mut ctl: Option<EscalationController> = None;
        let mut queue = VecDeque::new();
        let mut history = Vec::new();
        let (mut cur_tag, mut best) = (PhaseTag::Nominal, f64::NEG_INFINITY);
        for (k, v) in pairs {
            match k.as_str() {
                "esc.current" => ctl = Some(EscalationController::new(phase(v)?, cfg)?),
                "esc.tag" => cur_tag = tag(v)?,
                "esc.best" => best = v.parse().map_err(|_| bad("best"))?,
                "esc.queued" => {
                    let (p, t) = v.split_once(';').ok_or_else(|| bad("queue entry"))?;
                    queue.push_back((phase(p)?, tag(t)?));
                }
                "esc.history" => {
                    let f: Vec<&str> = v.split(';').collect();
                    if f.len() != 3 {
                        return Err(bad("history entry"));
                    }
                    history.push(PhaseOutcome {
                        phase: phase(f[0])?,
                        tag: tag(f[1])?,
                        best_val_acc: f[2].parse().map_err(|_| bad("history accuracy"))?,
                    });
                }
                _ => {}
            }
        }
        let mut ctl = ctl.ok_or_else(|| bad("current phase (missing)"))?;
        ctl.tag = cur_tag;
        ctl.best = best;
        ctl.queue = queue;
        ctl.history = history;
        Ok(ctl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ph(base: f64, start: u32, end: u32) -> ClrPhase {
        ClrPhase::new(base, 6.0 * base, 2, start, end).unwrap()
    }

    fn outcome(base: f64, start: u32, end: u32, acc: f64) -> PhaseOutcome {
        PhaseOutcome { phase: ph(base, start, end), tag: PhaseTag::Nominal, best_val_acc: acc }
    }

    fn ranges(next: &[(ClrPhase, PhaseTag)]) -> Vec<(f64, f64)> {
        next.iter().map(|(p, _)| (p.base_lr, p.max_lr)).collect()
    }

    fn approx(a: &[(f64, f64)], b: &[(f64, f64)]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x.0 - y.0).abs() < 1e-18 && (x.1 - y.1).abs() < 1e-18)
    }

    #[test]
    fn stagnation_after_the_smallest_range_escalates() {
        let history = [
            outcome(1e-5, 24, 48, 0.6086),
            outcome(1e-5, 48, 72, 0.6174),
            outcome(1e-6, 72, 84, 0.6243),
            outcome(1e-7, 84, 96, 0.6240),
        ];
        let next = adaptive_escalation(&history, &EscalationConfig::default()).unwrap();
        assert!(approx(&ranges(&next), &[(1e-5, 6e-5), (1e-7, 6e-7)]));
        assert_eq!(next[0].1, PhaseTag::Escalated);
        assert_eq!(next[1].1, PhaseTag::DeEscalated);
        assert_eq!(next[0].0.start_epoch, 96);
        assert_eq!(next[1].0.start_epoch, next[0].0.end_epoch);
    }

    #[test]
    fn improvement_continues_nominally() {
        let history = [outcome(1e-4, 0, 12, 0.5), outcome(1e-5, 12, 24, 0.55)];
        let next = adaptive_escalation(&history, &EscalationConfig::default()).unwrap();
        assert!(approx(&ranges(&next), &[(1e-6, 6e-6)]));
        assert_eq!(next[0].1, PhaseTag::Nominal);
        assert!(next[0].0.base_lr < history[1].phase.base_lr);
    }

    #[test]
    fn controller_escalates_twice_on_repeated_stagnation() {
        let mut ctl = EscalationController::new(ph(1e-6, 0, 12), EscalationConfig::default()).unwrap();
        let mut emitted = Vec::new();
        // Accuracy rises during the first phase, then never improves.
        let mut epoch = 0;
        while emitted.len() < 5 {
            let acc = if epoch < 12 { 0.5 + epoch as f64 * 0.01 } else { 0.55 };
            if let Some(next) = ctl.end_epoch(epoch, acc).unwrap() {
                emitted.push(next);
            }
            epoch += 1;
        }
        let tags: Vec<PhaseTag> = emitted.iter().map(|e| e.1).collect();
        assert_eq!(
            tags,
            [PhaseTag::Nominal, PhaseTag::Escalated, PhaseTag::DeEscalated, PhaseTag::Escalated, PhaseTag::DeEscalated]
        );
        assert!(approx(
            &ranges(&emitted),
            &[(1e-7, 6e-7), (1e-5, 6e-5), (1e-7, 6e-7), (1e-5, 6e-5), (1e-7, 6e-7)]
        ));
        // Round-trips through checkpoint text.
        let pairs: Vec<(String, String)> = ctl
            .state_lines()
            .iter()
            .map(|l| {
                let (k, v) = l.split_once(" = ").unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(EscalationController::from_state(EscalationConfig::default(), &pairs).unwrap(), ctl);
    }
}
