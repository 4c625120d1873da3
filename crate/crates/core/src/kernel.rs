//! Deterministic discrete-event simulation core: virtual clock, event queue
//! and horizon guard.
//!
//! The kernel is single-threaded by design. Concurrency in the modeled system
//! is expressed as interleaved events, never as real threads, so every run is
//! exactly replayable. Events firing at the same instant are processed in
//! ascending sequence order (the order they were scheduled).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use thiserror::Error;

/// Default simulation horizon in seconds. A run that is still producing
/// events past this point is considered runaway.
pub const DEFAULT_HORIZON: f64 = 1e7;

/// Simulated time in seconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualTime(f64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0.0);

    /// Wraps a finite, non-negative number of seconds.
    pub fn new(seconds: f64) -> Result<Self, SimError> {
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(SimError::InvalidTime(seconds));
        }
        Ok(VirtualTime(seconds))
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn offset(self, seconds: f64) -> Result<Self, SimError> {
        VirtualTime::new(self.0 + seconds)
    }
}

impl Eq for VirtualTime {}

impl PartialOrd for VirtualTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VirtualTime {
    fn cmp(&self, other: &Self) -> Ordering {
        // Times are finite by construction, so total order is safe.
        self.0.partial_cmp(&other.0).expect("finite virtual time")
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("virtual time must be finite and non-negative, got {0}")]
    InvalidTime(f64),
    #[error("cannot schedule event at t={requested} before current clock t={clock}")]
    ScheduleInPast { requested: f64, clock: f64 },
    #[error("simulation exceeded horizon of {horizon} seconds (runaway scenario)")]
    HorizonExceeded { horizon: f64 },
    #[error("event handler failed at t={at}: {message}")]
    Handler { at: f64, message: String },
}

/// Handle returned by [`Kernel::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// A scheduled event: firing time, a monotonically increasing sequence number
/// used as deterministic tie-breaker, and an opaque payload.
#[derive(Debug)]
pub struct Event<E> {
    pub fire_at: VirtualTime,
    pub sequence: u64,
    pub payload: E,
}

struct QueueEntry<E> {
    fire_at: VirtualTime,
    sequence: u64,
    handle: EventHandle,
    payload: E,
}

impl<E> PartialEq for QueueEntry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.sequence == other.sequence
    }
}
impl<E> Eq for QueueEntry<E> {}

impl<E> PartialOrd for QueueEntry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for QueueEntry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert so earliest (time, sequence) pops first.
        (other.fire_at, other.sequence).cmp(&(self.fire_at, self.sequence))
    }
}

/// Single-threaded event loop with a deterministic (fire_at, sequence) total order.
pub struct Kernel<E> {
    clock: VirtualTime,
    queue: BinaryHeap<QueueEntry<E>>,
    next_sequence: u64,
    next_handle: u64,
    cancelled: HashSet<EventHandle>,
    horizon: f64,
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Self::with_horizon(DEFAULT_HORIZON)
    }

    pub fn with_horizon(horizon: f64) -> Self {
        Kernel {
            clock: VirtualTime::ZERO,
            queue: BinaryHeap::new(),
            next_sequence: 0,
            next_handle: 0,
            cancelled: HashSet::new(),
            horizon,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.clock
    }

    /// Enqueues an event. Rejects firing times in the past, which would
    /// indicate a bug in the simulation logic.
    pub fn schedule(&mut self, fire_at: VirtualTime, payload: E) -> Result<EventHandle, SimError> {
        if fire_at < self.clock {
            return Err(SimError::ScheduleInPast {
                requested: fire_at.seconds(),
                clock: self.clock.seconds(),
            });
        }
        let handle = EventHandle(self.next_handle);
        self.next_handle += 1;
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(QueueEntry {
            fire_at,
            sequence,
            handle,
            payload,
        });
        Ok(handle)
    }

    /// Convenience: schedule relative to the current clock.
    pub fn schedule_in(&mut self, delay: f64, payload: E) -> Result<EventHandle, SimError> {
        let at = self.clock.offset(delay)?;
        self.schedule(at, payload)
    }

    /// Marks a pending event as cancelled. Cancelled events are dropped when
    /// they reach the head of the queue.
    pub fn cancel(&mut self, handle: EventHandle) {
        self.cancelled.insert(handle);
    }

    fn pop(&mut self) -> Result<Option<Event<E>>, SimError> {
        while let Some(entry) = self.queue.pop() {
            if self.cancelled.remove(&entry.handle) {
                continue;
            }
            if entry.fire_at.seconds() > self.horizon {
                return Err(SimError::HorizonExceeded {
                    horizon: self.horizon,
                });
            }
            debug_assert!(entry.fire_at >= self.clock, "clock must be monotonic");
            self.clock = entry.fire_at;
            return Ok(Some(Event {
                fire_at: entry.fire_at,
                sequence: entry.sequence,
                payload: entry.payload,
            }));
        }
        Ok(None)
    }

    /// Processes events in (fire_at, sequence) order until the queue is empty
    /// or the horizon is exceeded. Returns the final clock value.
    pub fn run_until_quiescent<F>(&mut self, mut handler: F) -> Result<VirtualTime, SimError>
    where
        F: FnMut(&mut Kernel<E>, Event<E>) -> Result<(), SimError>,
    {
        while let Some(event) = self.pop()? {
            handler(self, event)?;
        }
        Ok(self.clock)
    }
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Self::new()
    }
}
