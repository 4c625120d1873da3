//! Emulated participants: local training on a synthetic quadratic task,
//! response-delay and dropout behavior.
//!
//! Each party `i` owns a least-squares objective `(n_i / 2) * ||x - c_i||^2`
//! whose per-sample gradient is `x - c_i`. The global fixed point of weighted
//! averaging over these tasks is the sample-weighted mean of the optima
//! `c_i`, which makes every end-to-end run checkable in closed form: with one
//! local pass and unit learning rates the global model lands on that mean
//! after a single round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{
    FusionAlgorithm, FusionKind, GlobalModel, ModelUpdate, UpdateId, WeightVector,
};
use crate::kernel::VirtualTime;
use crate::rng::{Distribution, RngStream};

/// One party's private objective.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub optimum: WeightVector,
    pub sample_count: u32,
}

impl SyntheticTask {
    /// Per-sample gradient of the quadratic loss at `x`.
    pub fn gradient(&self, x: &WeightVector) -> WeightVector {
        let mut g = x.clone();
        g.add_scaled(&self.optimum, -1.0);
        g
    }

    /// Loss value, used by the finite-difference oracle in tests.
    pub fn loss(&self, x: &WeightVector) -> f64 {
        let d = x.l2_distance(&self.optimum);
        0.5 * self.sample_count as f64 * d * d
    }
}

/// Stochastic response behavior of a party within a round.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartyBehavior {
    /// Delay from model receipt to update submission (local training time
    /// plus whatever else the device is busy with).
    pub think_time: Distribution,
    /// Probability of contributing nothing in a given round.
    pub dropout_prob: f64,
}

impl Default for PartyBehavior {
    fn default() -> Self {
        PartyBehavior {
            think_time: Distribution::Uniform { a: 1.0, b: 10.0 },
            dropout_prob: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PartyError {
    #[error("local iterate became non-finite (local learning rate too large?)")]
    DivergedIterate,
    #[error("dimension mismatch between model ({model}) and task ({task})")]
    DimensionMismatch { model: usize, task: usize },
}

/// Runs `tau` local optimizer passes from the received global model and
/// returns the resulting weight delta.
///
/// FedProx adds the proximal pull `mu * (x - m)` to each step's gradient;
/// FedSGD is the single-pass special case.
pub fn local_train(
    party_id: u32,
    model: &GlobalModel,
    task: &SyntheticTask,
    algorithm: &FusionAlgorithm,
    eta_local: f64,
    gradient_noise_std: f64,
    noise_rng: Option<&mut RngStream>,
) -> Result<ModelUpdate, PartyError> {
    if model.weights.dimension() != task.optimum.dimension() {
        return Err(PartyError::DimensionMismatch {
            model: model.weights.dimension(),
            task: task.optimum.dimension(),
        });
    }
    let mut x = model.weights.clone();
    let mut noise_rng = noise_rng;
    for _ in 0..algorithm.local_epochs_tau {
        let mut g = task.gradient(&x);
        if algorithm.kind == FusionKind::FedProx {
            let mut prox = x.clone();
            prox.add_scaled(&model.weights, -1.0);
            g.add_scaled(&prox, algorithm.prox_mu);
        }
        if gradient_noise_std > 0.0 {
            if let Some(rng) = noise_rng.as_deref_mut() {
                for v in g.0.iter_mut() {
                    // Box-Muller from two uniform draws.
                    let u1 = rng.next_f64().max(f64::MIN_POSITIVE);
                    let u2 = rng.next_f64();
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *v += gradient_noise_std * z;
                }
            }
        }
        x.add_scaled(&g, -eta_local);
        if !x.is_finite() {
            return Err(PartyError::DivergedIterate);
        }
    }
    let mut delta = x;
    delta.add_scaled(&model.weights, -1.0);
    Ok(ModelUpdate {
        party_id,
        round: model.round,
        delta,
        sample_count: task.sample_count,
        update_id: UpdateId::new(party_id, model.round),
        submitted_at: VirtualTime::ZERO,
    })
}

/// A party's decision for one round: submit at an offset from round open, or
/// sit the round out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Submission {
    At(f64),
    Dropout,
}

/// Draws the submission offset (or dropout) for one round.
pub fn submit_schedule(behavior: &PartyBehavior, rng: &mut RngStream) -> Submission {
    // Think time is drawn before the dropout coin so both decisions come from
    // the same stream in a fixed order (replay stability).
    let offset = rng
        .draw(&behavior.think_time)
        .expect("think time distribution validated at config parse")
        .max(0.0);
    let dropped = behavior.dropout_prob > 0.0
        && rng
            .chance(behavior.dropout_prob)
            .expect("dropout probability validated at config parse");
    if dropped {
        Submission::Dropout
    } else {
        Submission::At(offset)
    }
}

/// Distance of the current global model from the analytic fixed point (the
/// sample-weighted mean of party optima).
pub fn convergence_distance(model: &GlobalModel, tasks: &[SyntheticTask]) -> f64 {
    let target = weighted_mean_optimum(tasks);
    model.weights.l2_distance(&target)
}

pub fn weighted_mean_optimum(tasks: &[SyntheticTask]) -> WeightVector {
    let d = tasks.first().map_or(0, |t| t.optimum.dimension());
    let mut mean = WeightVector::zeros(d);
    let total: f64 = tasks.iter().map(|t| t.sample_count as f64).sum();
    for task in tasks {
        mean.add_scaled(&task.optimum, task.sample_count as f64 / total);
    }
    mean
}
