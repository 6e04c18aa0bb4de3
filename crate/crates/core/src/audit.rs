//! Data-access audit. Every dataset read made while training, selecting or
//! evaluating a run goes through an [`AccessLog`], which rejects reads the
//! run's selection protocol does not allow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocols::Protocol;
use crate::synthworld::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Selection,
    FinalEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub modality: usize,
    pub split: Split,
    pub phase: Phase,
}

/// Reads made by one run, checked against the rules of its protocol:
///
/// * the held-out modality's test split is read once, in `FinalEval`;
/// * its validation split is read only under `Oracle`, only for selection;
/// * its training split is never read;
/// * no other modality's test split is read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub protocol: Protocol,
    pub held_out: usize,
    pub events: Vec<AccessEvent>,
}

impl AccessLog {
    pub fn new(protocol: Protocol, held_out: usize) -> Self {
        Self {
            protocol,
            held_out,
            events: Vec::new(),
        }
    }

    pub fn record(&mut self, modality: usize, split: Split, phase: Phase) -> Result<()> {
        let event = AccessEvent {
            modality,
            split,
            phase,
        };
        if let Some(reason) = self.violation(&event) {
            return Err(Error::Audit(format!(
                "{reason} (modality {modality}, {split:?} split, {phase:?} phase, protocol {:?}, held-out {})",
                self.protocol, self.held_out
            )));
        }
        self.events.push(event);
        Ok(())
    }

    fn violation(&self, ev: &AccessEvent) -> Option<&'static str> {
        if ev.modality != self.held_out {
            return match (ev.split, ev.phase) {
                (Split::Test, _) => Some("test split of a training modality read"),
                (_, Phase::FinalEval) => Some("final evaluation must read the held-out modality"),
                _ => None,
            };
        }
        match (ev.split, ev.phase) {
            (Split::Test, Phase::FinalEval) if self.final_evaluations() == 0 => None,
            (Split::Test, Phase::FinalEval) => Some("held-out test split read twice"),
            (Split::Test, _) => Some("held-out test split read before final evaluation"),
            (Split::Val, Phase::Selection) if self.protocol == Protocol::Oracle => None,
            (Split::Val, _) => Some("held-out validation split read outside oracle selection"),
            (Split::Train, _) => Some("held-out training split read"),
        }
    }

    pub fn final_evaluations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.phase == Phase::FinalEval && e.modality == self.held_out)
            .count()
    }

    /// Reads of the held-out modality's test split that happened before the
    /// final evaluation (zero for any log accepted by [`AccessLog::record`]).
    pub fn premature_test_reads(&self) -> usize {
        self.events
            .iter()
            .take_while(|e| e.phase != Phase::FinalEval)
            .filter(|e| e.modality == self.held_out && e.split == Split::Test)
            .count()
    }

    /// Reads of any held-out data outside final evaluation.
    pub fn held_out_reads_outside_eval(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.modality == self.held_out && e.phase != Phase::FinalEval)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tm_rejects_any_held_out_read_before_eval() {
        let mut log = AccessLog::new(Protocol::Tm, 2);
        log.record(0, Split::Train, Phase::Training).unwrap();
        log.record(1, Split::Val, Phase::Selection).unwrap();
        assert!(matches!(log.record(2, Split::Val, Phase::Selection), Err(Error::Audit(_))));
        assert!(log.record(2, Split::Test, Phase::Selection).is_err());
        assert!(log.record(2, Split::Train, Phase::Training).is_err());
        log.record(2, Split::Test, Phase::FinalEval).unwrap();
        assert!(log.record(2, Split::Test, Phase::FinalEval).is_err());
        assert_eq!(log.held_out_reads_outside_eval(), 0);
        assert_eq!(log.premature_test_reads(), 0);
    }

    #[test]
    fn oracle_may_read_held_out_validation_only() {
        let mut log = AccessLog::new(Protocol::Oracle, 0);
        log.record(0, Split::Val, Phase::Selection).unwrap();
        assert!(log.record(0, Split::Val, Phase::Training).is_err());
        assert!(log.record(0, Split::Test, Phase::Selection).is_err());
        assert!(log.record(1, Split::Test, Phase::Selection).is_err());
        assert_eq!(log.held_out_reads_outside_eval(), 1);
    }
}
