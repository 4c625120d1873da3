//! Elastic pod-pool model: warm/cold acquisition, aggressive release of idle
//! pods, and container-second accounting.
//!
//! A pod accrues container-seconds from the moment it is provisioned until it
//! is removed (or the run ends). Removal happens when a pod has sat idle for
//! the configured timeout. The pool itself is passive: the simulation driver
//! schedules an expiry check event after each release and calls
//! [`PodPool::expire_due`] when it fires.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::VirtualTime;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalerConfig {
    pub cold_start_seconds: f64,
    pub warm_start_seconds: f64,
    pub idle_timeout_seconds: f64,
    /// `None` means the cluster can grow without bound.
    pub max_pods: Option<usize>,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            cold_start_seconds: 1.5,
            warm_start_seconds: 0.05,
            idle_timeout_seconds: 30.0,
            max_pods: None,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<(), ScalerError> {
        if self.cold_start_seconds <= 0.0 || !self.cold_start_seconds.is_finite() {
            return Err(ScalerError::InvalidConfig("cold_start_seconds"));
        }
        if self.warm_start_seconds < 0.0 || !self.warm_start_seconds.is_finite() {
            return Err(ScalerError::InvalidConfig("warm_start_seconds"));
        }
        if self.idle_timeout_seconds <= 0.0 || !self.idle_timeout_seconds.is_finite() {
            return Err(ScalerError::InvalidConfig("idle_timeout_seconds"));
        }
        if self.max_pods == Some(0) {
            return Err(ScalerError::InvalidConfig("max_pods"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScalerError {
    #[error("invalid scaler config field {0}")]
    InvalidConfig(&'static str),
    #[error("pod {0:?} is not busy")]
    NotBusy(PodId),
    #[error("unknown pod {0:?}")]
    UnknownPod(PodId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PodId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PodState {
    Busy,
    Idle,
}

#[derive(Debug, Clone)]
struct Pod {
    provisioned_at: VirtualTime,
    state: PodState,
    busy_since: VirtualTime,
    last_released_at: VirtualTime,
    busy_seconds: f64,
}

/// Outcome of a successful acquisition.
#[derive(Debug, Clone, Copy)]
pub struct Acquired {
    pub pod: PodId,
    /// When the pod can start computing: warm-start delay for a reused pod,
    /// cold-start delay for a freshly provisioned one.
    pub ready_at: VirtualTime,
    pub warm: bool,
}

#[derive(Debug, Default)]
pub struct PodPool {
    config: ScalerConfig,
    pods: BTreeMap<PodId, Pod>,
    next_id: u64,
    /// Accounting carried by pods that were already removed.
    retired_alive_seconds: f64,
    retired_busy_seconds: f64,
    pub cold_starts: u64,
    pub warm_starts: u64,
}

impl PodPool {
    pub fn new(config: ScalerConfig) -> Self {
        PodPool {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &ScalerConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.pods.len()
    }

    pub fn idle_count(&self) -> usize {
        self.pods
            .values()
            .filter(|p| p.state == PodState::Idle)
            .count()
    }

    /// Acquires a pod for one invocation, reusing the oldest idle pod when
    /// possible. Returns `None` when `max_pods` is exhausted; the caller is
    /// expected to queue the invocation and retry after a release.
    pub fn acquire(&mut self, now: VirtualTime) -> Option<Acquired> {
        let idle = self
            .pods
            .iter()
            .find(|(_, p)| p.state == PodState::Idle)
            .map(|(id, _)| *id);
        if let Some(id) = idle {
            let pod = self.pods.get_mut(&id).expect("idle pod exists");
            pod.state = PodState::Busy;
            pod.busy_since = now;
            self.warm_starts += 1;
            return Some(Acquired {
                pod: id,
                ready_at: now
                    .offset(self.config.warm_start_seconds)
                    .expect("finite warm start"),
                warm: true,
            });
        }
        if let Some(max) = self.config.max_pods {
            if self.pods.len() >= max {
                return None;
            }
        }
        let id = PodId(self.next_id);
        self.next_id += 1;
        self.pods.insert(
            id,
            Pod {
                provisioned_at: now,
                state: PodState::Busy,
                busy_since: now,
                last_released_at: now,
                busy_seconds: 0.0,
            },
        );
        self.cold_starts += 1;
        Some(Acquired {
            pod: id,
            ready_at: now
                .offset(self.config.cold_start_seconds)
                .expect("finite cold start"),
            warm: false,
        })
    }

    /// Returns a busy pod to the idle set.
    pub fn release(&mut self, pod: PodId, now: VirtualTime) -> Result<(), ScalerError> {
        let p = self
            .pods
            .get_mut(&pod)
            .ok_or(ScalerError::UnknownPod(pod))?;
        if p.state != PodState::Busy {
            return Err(ScalerError::NotBusy(pod));
        }
        p.state = PodState::Idle;
        p.busy_seconds += now.seconds() - p.busy_since.seconds();
        p.last_released_at = now;
        Ok(())
    }

    /// Removes every pod whose idle time has reached the timeout. Intended to
    /// be called from an expiry event; re-acquired pods are skipped.
    pub fn expire_due(&mut self, now: VirtualTime) -> Vec<PodId> {
        let due: Vec<PodId> = self
            .pods
            .iter()
            .filter(|(_, p)| {
                p.state == PodState::Idle
                    && now.seconds() - p.last_released_at.seconds()
                        >= self.config.idle_timeout_seconds - 1e-9
            })
            .map(|(id, _)| *id)
            .collect();
        for id in &due {
            let pod = self.pods.remove(id).expect("due pod exists");
            self.retired_alive_seconds += now.seconds() - pod.provisioned_at.seconds();
            self.retired_busy_seconds += pod.busy_seconds;
        }
        due
    }

    /// Total container-seconds consumed so far: retired pods over their whole
    /// life, live pods from provisioning to `now`.
    pub fn container_seconds(&self, now: VirtualTime) -> f64 {
        let live: f64 = self
            .pods
            .values()
            .map(|p| now.seconds() - p.provisioned_at.seconds())
            .sum();
        self.retired_alive_seconds + live
    }

    /// Fraction of pod lifetime spent serving invocations.
    pub fn utilization(&self, now: VirtualTime) -> f64 {
        let alive = self.container_seconds(now);
        if alive <= 0.0 {
            return 0.0;
        }
        let live_busy: f64 = self
            .pods
            .values()
            .map(|p| {
                p.busy_seconds
                    + if p.state == PodState::Busy {
                        now.seconds() - p.busy_since.seconds()
                    } else {
                        0.0
                    }
            })
            .sum();
        (self.retired_busy_seconds + live_busy) / alive
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(sec: f64) -> VirtualTime {
        VirtualTime::new(sec).unwrap()
    }

    #[test]
    fn cold_start_when_pool_is_empty() {
        let mut pool = PodPool::new(ScalerConfig::default());
        let got = pool.acquire(t(10.0)).unwrap();
        assert!(!got.warm);
        assert_eq!(got.ready_at.seconds(), 11.5);
    }

    #[test]
    fn warm_start_is_fast() {
        let cfg = ScalerConfig::default();
        // Reused pods must come up in under 100 ms.
        assert!(cfg.warm_start_seconds < 0.1);
        let mut pool = PodPool::new(cfg);
        let a = pool.acquire(t(0.0)).unwrap();
        pool.release(a.pod, t(5.0)).unwrap();
        let b = pool.acquire(t(6.0)).unwrap();
        assert!(b.warm);
        assert_eq!(b.pod, a.pod);
        assert!(b.ready_at.seconds() - 6.0 < 0.1);
    }

    #[test]
    fn burst_provisions_in_parallel() {
        let mut pool = PodPool::new(ScalerConfig::default());
        let ready: Vec<f64> = (0..100)
            .map(|_| pool.acquire(t(50.0)).unwrap().ready_at.seconds())
            .collect();
        assert_eq!(pool.size(), 100);
        assert!(ready.iter().all(|&r| (r - 51.5).abs() < 1e-12));
    }

    #[test]
    fn idle_pods_expire_after_timeout() {
        let mut pool = PodPool::new(ScalerConfig::default());
        let a = pool.acquire(t(0.0)).unwrap();
        pool.release(a.pod, t(10.0)).unwrap();
        assert!(pool.expire_due(t(20.0)).is_empty());
        let removed = pool.expire_due(t(40.0));
        assert_eq!(removed, vec![a.pod]);
        assert_eq!(pool.size(), 0);
        // 40 seconds alive in total.
        assert!((pool.container_seconds(t(100.0)) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn reacquire_within_timeout_keeps_pod_warm() {
        let mut pool = PodPool::new(ScalerConfig::default());
        let a = pool.acquire(t(0.0)).unwrap();
        pool.release(a.pod, t(10.0)).unwrap();
        let b = pool.acquire(t(20.0)).unwrap();
        assert!(b.warm);
        // The stale expiry check fires later and must not remove a busy pod.
        assert!(pool.expire_due(t(40.0)).is_empty());
        assert_eq!(pool.size(), 1);
    }

    #[test]
    fn max_pods_exhaustion_returns_none() {
        let mut pool = PodPool::new(ScalerConfig {
            max_pods: Some(2),
            ..ScalerConfig::default()
        });
        let a = pool.acquire(t(0.0)).unwrap();
        let _b = pool.acquire(t(0.0)).unwrap();
        assert!(pool.acquire(t(0.0)).is_none());
        pool.release(a.pod, t(1.0)).unwrap();
        assert!(pool.acquire(t(2.0)).unwrap().warm);
    }

    #[test]
    fn releasing_a_non_busy_pod_is_an_error() {
        let mut pool = PodPool::new(ScalerConfig::default());
        let a = pool.acquire(t(0.0)).unwrap();
        pool.release(a.pod, t(1.0)).unwrap();
        assert_eq!(
            pool.release(a.pod, t(2.0)),
            Err(ScalerError::NotBusy(a.pod))
        );
        assert_eq!(
            pool.release(PodId(99), t(2.0)),
            Err(ScalerError::UnknownPod(PodId(99)))
        );
    }

    #[test]
    fn one_pod_alive_228_seconds_costs_228() {
        let mut pool = PodPool::new(ScalerConfig {
            idle_timeout_seconds: 1.0,
            ..ScalerConfig::default()
        });
        let a = pool.acquire(t(0.0)).unwrap();
        pool.release(a.pod, t(227.0)).unwrap();
        pool.expire_due(t(228.0));
        assert!((pool.container_seconds(t(500.0)) - 228.0).abs() < 1e-9);
    }

    #[test]
    fn container_seconds_equal_pool_size_integral() {
        // Drive a random acquire/release/expire schedule and compare the
        // pool's accounting against an explicit step-function integral.
        let mut rng = crate::rng::RngStream::new(8, "pool-integral");
        let mut pool = PodPool::new(ScalerConfig {
            idle_timeout_seconds: 3.0,
            ..ScalerConfig::default()
        });
        let mut busy: Vec<PodId> = Vec::new();
        let mut integral = 0.0;
        let mut last = 0.0;
        let mut clock = 0.0;
        for _ in 0..400 {
            clock += rng.next_f64() * 2.0;
            integral += pool.size() as f64 * (clock - last);
            last = clock;
            match rng.next_range_u32(0, 2) {
                0 => {
                    if let Some(got) = pool.acquire(t(clock)) {
                        busy.push(got.pod);
                    }
                }
                1 => {
                    if let Some(pod) = busy.pop() {
                        pool.release(pod, t(clock)).unwrap();
                    }
                }
                _ => {
                    pool.expire_due(t(clock));
                }
            }
        }
        integral += 0.0;
        let accounted = pool.container_seconds(t(clock));
        assert!(
            (accounted - integral).abs() < 1e-6,
            "accounted {accounted} vs integral {integral}"
        );
    }

    #[test]
    fn utilization_tracks_busy_fraction() {
        let mut pool = PodPool::new(ScalerConfig::default());
        let a = pool.acquire(t(0.0)).unwrap();
        pool.release(a.pod, t(25.0)).unwrap();
        // Busy 25 s of 50 s alive.
        let u = pool.utilization(t(50.0));
        assert!((u - 0.5).abs() < 1e-9, "utilization {u}");
    }
}
