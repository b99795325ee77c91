//! Adam with L2 decay, cyclical learning rates (fixed replay and adaptive escalation)
//! and reduce-on-plateau.

mod adam;
mod clr;
mod escalation;
mod plateau;

pub use adam::Adam;
pub use clr::{clr_lr, replay_schedule, ClrPhase, PhaseSchedule};
pub use escalation::{adaptive_escalation, EscalationConfig, EscalationController, PhaseOutcome, PhaseTag};
pub use plateau::Plateau;
