//! Aggregation trigger evaluation and round-close policy.
//!
//! A trigger decides, from the broker state and the clock alone, whether to
//! spawn aggregation work now, keep waiting, or close the round. Keeping the
//! decision a pure function of `(spec, view, clock)` is what makes replays
//! bit-identical: the runtime may re-evaluate as often as it likes without
//! changing the outcome.

use serde::{Deserialize, Serialize};

use crate::kernel::VirtualTime;

/// What causes aggregation functions to be invoked.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerSpec {
    /// Fire a leaf aggregation for every `k` raw updates available.
    EveryKUpdates { k: usize },
    /// Fire on a fixed cadence, sweeping up whatever has arrived.
    EveryTSeconds { t: f64 },
    /// Close the round once `fraction` of expected parties responded, or at
    /// `max_wait_seconds`; partial batches are aggregated along the way.
    Quorum {
        fraction: f64,
        max_wait_seconds: f64,
    },
    /// Arbitrary user predicate (library use only; not config-expressible).
    #[serde(skip)]
    Custom(CustomTrigger),
}

/// Shared user predicate over the broker view and clock.
pub type CustomTrigger = std::rc::Rc<dyn Fn(&BrokerView, VirtualTime) -> TriggerDecision>;

impl std::fmt::Debug for TriggerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TriggerSpec::EveryKUpdates { k } => write!(f, "EveryKUpdates({k})"),
            TriggerSpec::EveryTSeconds { t } => write!(f, "EveryTSeconds({t})"),
            TriggerSpec::Quorum {
                fraction,
                max_wait_seconds,
            } => write!(f, "Quorum({fraction}, {max_wait_seconds}s)"),
            TriggerSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            TriggerSpec::EveryKUpdates { k } if *k < 1 => Err("trigger k must be >= 1".to_string()),
            TriggerSpec::EveryTSeconds { t } if *t <= 0.0 || !t.is_finite() => {
                Err("trigger period must be positive".to_string())
            }
            TriggerSpec::Quorum {
                fraction,
                max_wait_seconds,
            } if !(*fraction > 0.0 && *fraction <= 1.0)
                || *max_wait_seconds <= 0.0
                || !max_wait_seconds.is_finite() =>
            {
                Err("quorum requires 0 < fraction <= 1 and max_wait > 0".to_string())
            }
            _ => Ok(()),
        }
    }
}

/// When an open round is considered finished.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundPolicy {
    /// Fraction of expected parties that must respond.
    pub quorum_fraction: f64,
    /// Hard deadline after round open; the round closes with whatever arrived.
    pub response_timeout_seconds: f64,
    /// Optional minimum wait before a quorum may close the round.
    pub min_wait_seconds: Option<f64>,
    /// Treat a quorum miss at the deadline as a run failure instead of
    /// aggregating the partial turnout.
    pub fail_on_no_quorum: bool,
}

impl Default for RoundPolicy {
    fn default() -> Self {
        RoundPolicy {
            quorum_fraction: 1.0,
            response_timeout_seconds: 600.0,
            min_wait_seconds: None,
            fail_on_no_quorum: false,
        }
    }
}

impl RoundPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.quorum_fraction > 0.0 && self.quorum_fraction <= 1.0) {
            return Err("quorum_fraction must lie in (0, 1]".to_string());
        }
        if self.response_timeout_seconds <= 0.0 || !self.response_timeout_seconds.is_finite() {
            return Err("response_timeout_seconds must be positive".to_string());
        }
        if let Some(w) = self.min_wait_seconds {
            if w < 0.0 || !w.is_finite() {
                return Err("min_wait_seconds must be non-negative".to_string());
            }
        }
        Ok(())
    }

    pub fn quorum_count(&self, expected: usize) -> usize {
        (self.quorum_fraction * expected as f64).ceil() as usize
    }

    /// Pure close predicate given the number of responders and elapsed time.
    pub fn should_close(&self, responded: usize, expected: usize, since_open: f64) -> bool {
        if since_open >= self.response_timeout_seconds {
            return true;
        }
        let min_wait_ok = self.min_wait_seconds.is_none_or(|w| since_open >= w);
        min_wait_ok && expected > 0 && responded >= self.quorum_count(expected)
    }
}

/// Snapshot of the broker/run state a trigger is allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct BrokerView {
    pub round: u32,
    pub round_open_at: VirtualTime,
    pub round_closed: bool,
    pub unclaimed_updates: usize,
    pub unclaimed_partials: usize,
    pub responded_parties: usize,
    pub expected_parties: usize,
}

/// What kind of work a `Fire` decision asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    /// Claim up to this many raw updates per leaf invocation.
    pub leaf_batch: usize,
    /// Also sweep up a trailing batch smaller than `leaf_batch`.
    pub flush_remainder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerDecision {
    Fire(BatchPlan),
    Hold,
    CloseRound,
}

/// Evaluates the trigger against the current state. `CloseRound` wins over
/// `Fire`, which wins over `Hold`. For an already-closed round the decision
/// only ever concerns remaining work, so it degrades to Fire-or-Hold with
/// remainder flushing enabled.
pub fn evaluate_trigger(
    spec: &TriggerSpec,
    policy: &RoundPolicy,
    view: &BrokerView,
    clock: VirtualTime,
    fanout: usize,
) -> TriggerDecision {
    if let TriggerSpec::Custom(f) = spec {
        return f(view, clock);
    }
    let since_open = clock.seconds() - view.round_open_at.seconds();
    if !view.round_closed {
        let close = match spec {
            TriggerSpec::Quorum {
                fraction,
                max_wait_seconds,
            } => {
                // The quorum trigger carries its own close parameters.
                since_open >= *max_wait_seconds
                    || view.expected_parties > 0
                        && view.responded_parties
                            >= (fraction * view.expected_parties as f64).ceil() as usize
            }
            _ => policy.should_close(view.responded_parties, view.expected_parties, since_open),
        };
        if close {
            return TriggerDecision::CloseRound;
        }
    }

    let leaf_batch = match spec {
        TriggerSpec::EveryKUpdates { k } => *k,
        _ => fanout,
    };
    let fire_leaves = match spec {
        TriggerSpec::EveryKUpdates { k } => view.unclaimed_updates >= *k,
        // A cadence trigger sweeps whatever has arrived at each boundary.
        TriggerSpec::EveryTSeconds { .. } => view.unclaimed_updates >= 1,
        TriggerSpec::Quorum { .. } => view.unclaimed_updates >= leaf_batch,
        TriggerSpec::Custom(_) => unreachable!("handled above"),
    };
    // Closed rounds and cadence boundaries sweep trailing partial batches.
    let flush_remainder = view.round_closed || matches!(spec, TriggerSpec::EveryTSeconds { .. });
    if fire_leaves
        || (view.round_closed && view.unclaimed_updates > 0)
        || view.unclaimed_partials >= 2
    {
        return TriggerDecision::Fire(BatchPlan {
            leaf_batch,
            flush_remainder,
        });
    }
    TriggerDecision::Hold
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(unclaimed: usize, responded: usize, expected: usize, closed: bool) -> BrokerView {
        BrokerView {
            round: 1,
            round_open_at: VirtualTime::ZERO,
            round_closed: closed,
            unclaimed_updates: unclaimed,
            unclaimed_partials: 0,
            responded_parties: responded,
            expected_parties: expected,
        }
    }

    fn t(sec: f64) -> VirtualTime {
        VirtualTime::new(sec).unwrap()
    }

    #[test]
    fn every_k_holds_below_threshold_and_fires_at_it() {
        let spec = TriggerSpec::EveryKUpdates { k: 10 };
        let policy = RoundPolicy {
            response_timeout_seconds: 1e6,
            ..RoundPolicy::default()
        };
        let d = evaluate_trigger(&spec, &policy, &view(9, 9, 100, false), t(1.0), 10);
        assert_eq!(d, TriggerDecision::Hold);
        let d = evaluate_trigger(&spec, &policy, &view(10, 10, 100, false), t(1.0), 10);
        assert_eq!(
            d,
            TriggerDecision::Fire(BatchPlan {
                leaf_batch: 10,
                flush_remainder: false
            })
        );
    }

    #[test]
    fn quorum_reaching_half_closes_early() {
        let spec = TriggerSpec::Quorum {
            fraction: 0.5,
            max_wait_seconds: 600.0,
        };
        let policy = RoundPolicy::default();
        let d = evaluate_trigger(&spec, &policy, &view(0, 50, 100, false), t(300.0), 10);
        assert_eq!(d, TriggerDecision::CloseRound);
    }

    #[test]
    fn quorum_deadline_closes_with_partial_turnout() {
        let spec = TriggerSpec::Quorum {
            fraction: 0.5,
            max_wait_seconds: 600.0,
        };
        let policy = RoundPolicy::default();
        let d = evaluate_trigger(&spec, &policy, &view(0, 30, 100, false), t(600.0), 10);
        assert_eq!(d, TriggerDecision::CloseRound);
        // Just before the deadline, below quorum: keep waiting.
        let d = evaluate_trigger(&spec, &policy, &view(0, 30, 100, false), t(599.0), 10);
        assert_eq!(d, TriggerDecision::Hold);
    }

    #[test]
    fn closed_round_flushes_stragglers() {
        let spec = TriggerSpec::EveryKUpdates { k: 10 };
        let policy = RoundPolicy::default();
        let d = evaluate_trigger(&spec, &policy, &view(3, 100, 100, true), t(700.0), 10);
        assert_eq!(
            d,
            TriggerDecision::Fire(BatchPlan {
                leaf_batch: 10,
                flush_remainder: true
            })
        );
    }

    #[test]
    fn min_wait_defers_quorum_close() {
        let policy = RoundPolicy {
            quorum_fraction: 0.5,
            response_timeout_seconds: 600.0,
            min_wait_seconds: Some(120.0),
            fail_on_no_quorum: false,
        };
        assert!(!policy.should_close(80, 100, 60.0));
        assert!(policy.should_close(80, 100, 120.0));
    }

    #[test]
    fn decision_is_pure() {
        let spec = TriggerSpec::EveryKUpdates { k: 5 };
        let policy = RoundPolicy::default();
        let v = view(7, 7, 20, false);
        let first = evaluate_trigger(&spec, &policy, &v, t(9.0), 10);
        for _ in 0..10 {
            assert_eq!(first, evaluate_trigger(&spec, &policy, &v, t(9.0), 10));
        }
    }

    #[test]
    fn custom_predicate_is_consulted() {
        let spec = TriggerSpec::Custom(std::rc::Rc::new(|view: &BrokerView, _clock| {
            if view.unclaimed_updates > 3 {
                TriggerDecision::Fire(BatchPlan {
                    leaf_batch: 2,
                    flush_remainder: false,
                })
            } else {
                TriggerDecision::Hold
            }
        }));
        let policy = RoundPolicy::default();
        assert_eq!(
            evaluate_trigger(&spec, &policy, &view(2, 2, 10, false), t(0.0), 10),
            TriggerDecision::Hold
        );
        assert!(matches!(
            evaluate_trigger(&spec, &policy, &view(4, 4, 10, false), t(0.0), 10),
            TriggerDecision::Fire(_)
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(TriggerSpec::EveryKUpdates { k: 0 }.validate().is_err());
        assert!(TriggerSpec::EveryTSeconds { t: 0.0 }.validate().is_err());
        assert!(TriggerSpec::Quorum {
            fraction: 1.5,
            max_wait_seconds: 10.0
        }
        .validate()
        .is_err());
        assert!(TriggerSpec::Quorum {
            fraction: 0.5,
            max_wait_seconds: 10.0
        }
        .validate()
        .is_ok());
    }
}
