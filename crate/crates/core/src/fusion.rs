//! Aggregation mathematics: the weighted-sum partial aggregate, its merge
//! operation, and the server-side optimizer step.
//!
//! The core object is [`PartialAggregate`]: the weighted sum `S = sum(n_i * d_i)`
//! of model updates together with the total sample count `N = sum(n_i)` and the
//! set of contributing update ids. Because vector addition is associative,
//! partial aggregates can be merged in any grouping — this is what lets a
//! single logical aggregation be split across leaf and intermediate workers.
//! Merging is only permitted for contributor-disjoint aggregates, so a
//! double-counted update is a hard error rather than a silent corruption.
//!
//! Floating-point addition is not exactly associative, so the canonical
//! result is defined as the fold in ascending update-id order; tree-shaped
//! groupings agree with it to tight relative tolerance, which callers assert.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::VirtualTime;

/// Flat vector of 64-bit model weights (or a weight delta).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(dimension: usize) -> Self {
        WeightVector(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &WeightVector, scale: f64) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.0.iter_mut() {
            *a *= factor;
        }
    }

    pub fn l2_distance(&self, other: &WeightVector) -> f64 {
        debug_assert_eq!(self.0.len(), other.0.len());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest elementwise relative difference, with an absolute floor of 1
    /// so that near-zero coordinates do not blow the ratio up.
    pub fn max_rel_diff(&self, other: &WeightVector) -> f64 {
        debug_assert_eq!(self.0.len(), other.0.len());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
            .fold(0.0, f64::max)
    }
}

/// Identifier of one party's update in one round: `(round << 32) | party`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UpdateId(pub u64);

impl UpdateId {
    pub fn new(party: u32, round: u32) -> Self {
        UpdateId(((round as u64) << 32) | party as u64)
    }

    pub fn party(self) -> u32 {
        (self.0 & 0xFFFF_FFFF) as u32
    }
}

impl fmt::Display for UpdateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}p{}", self.0 >> 32, self.0 & 0xFFFF_FFFF)
    }
}

/// One party's contribution to a round: weight delta plus sample count.
#[derive(Debug, Clone)]
pub struct ModelUpdate {
    pub party_id: u32,
    pub round: u32,
    pub delta: WeightVector,
    pub sample_count: u32,
    pub update_id: UpdateId,
    pub submitted_at: VirtualTime,
}

/// Associative aggregation state: weighted sum, total samples, contributors.
///
/// The empty aggregate (no contributors, zero samples, zero vector) is the
/// identity element of [`merge`].
#[derive(Debug, Clone)]
pub struct PartialAggregate {
    pub weighted_sum: WeightVector,
    pub total_samples: u64,
    /// Sorted, duplicate-free.
    pub contributors: Vec<UpdateId>,
    pub round: u32,
}

impl PartialAggregate {
    pub fn empty(round: u32, dimension: usize) -> Self {
        PartialAggregate {
            weighted_sum: WeightVector::zeros(dimension),
            total_samples: 0,
            contributors: Vec::new(),
            round,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.contributors.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.weighted_sum.dimension()
    }
}

/// Global model state carried across rounds.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub round: u32,
    pub weights: WeightVector,
    pub learning_rate: f64,
}

/// Which client-side training variant produced the updates. Server-side
/// fusion is identical weighted averaging for all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    FedAvg,
    FedSgd,
    FedProx,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionAlgorithm {
    pub kind: FusionKind,
    /// Proximal coefficient; only meaningful for FedProx.
    pub prox_mu: f64,
    /// Local passes between synchronizations; forced to 1 for FedSGD.
    pub local_epochs_tau: u32,
}

impl Default for FusionAlgorithm {
    fn default() -> Self {
        FusionAlgorithm {
            kind: FusionKind::FedAvg,
            prox_mu: 0.0,
            local_epochs_tau: 1,
        }
    }
}

impl FusionAlgorithm {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.local_epochs_tau == 0 {
            return Err(FusionError::InvalidAlgorithm(
                "local_epochs_tau must be >= 1".into(),
            ));
        }
        match self.kind {
            FusionKind::FedSgd if self.local_epochs_tau != 1 => Err(FusionError::InvalidAlgorithm(
                "FedSGD requires local_epochs_tau = 1".into(),
            )),
            FusionKind::FedProx if self.prox_mu <= 0.0 => Err(FusionError::InvalidAlgorithm(
                "FedProx requires prox_mu > 0".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("updates span multiple rounds: {0} and {1}")]
    MixedRounds(u32, u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate update id {0}")]
    DuplicateUpdate(UpdateId),
    #[error("overlapping contributors in merge (update {0} counted twice)")]
    OverlappingContributors(UpdateId),
    #[error("cannot finalize an empty round (zero total samples)")]
    EmptyRound,
    #[error("round mismatch: partial is for round {partial}, model expects {model}")]
    RoundMismatch { partial: u32, model: u32 },
    #[error("sample count must be >= 1 for update {0}")]
    ZeroSamples(UpdateId),
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("invalid fusion algorithm: {0}")]
    InvalidAlgorithm(String),
}

/// Fuses raw updates from a group of parties into one partial aggregate.
///
/// Summation runs in ascending update-id order regardless of input order, so
/// the result of a given update set is reproducible.
pub fn leaf_aggregate(updates: &[ModelUpdate]) -> Result<PartialAggregate, FusionError> {
    let first = updates.first().ok_or(FusionError::EmptyRound)?;
    let round = first.round;
    let dimension = first.delta.dimension();

    let mut ordered: Vec<&ModelUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.update_id);

    let mut sum = WeightVector::zeros(dimension);
    let mut total: u64 = 0;
    let mut contributors = Vec::with_capacity(ordered.len());
    for update in ordered {
        if update.round != round {
            return Err(FusionError::MixedRounds(round, update.round));
        }
        if update.delta.dimension() != dimension {
            return Err(FusionError::DimensionMismatch {
                expected: dimension,
                got: update.delta.dimension(),
            });
        }
        if update.sample_count == 0 {
            return Err(FusionError::ZeroSamples(update.update_id));
        }
        if contributors.last() == Some(&update.update_id) {
            return Err(FusionError::DuplicateUpdate(update.update_id));
        }
        sum.add_scaled(&update.delta, update.sample_count as f64);
        total += update.sample_count as u64;
        contributors.push(update.update_id);
    }
    if !sum.is_finite() {
        return Err(FusionError::NonFinite("leaf_aggregate"));
    }
    Ok(PartialAggregate {
        weighted_sum: sum,
        total_samples: total,
        contributors,
        round,
    })
}

/// Merges two contributor-disjoint partial aggregates of the same round.
pub fn merge(a: &PartialAggregate, b: &PartialAggregate) -> Result<PartialAggregate, FusionError> {
    // The empty aggregate is the identity and carries no meaningful round.
    if a.is_empty() && !b.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.round != b.round {
        return Err(FusionError::MixedRounds(a.round, b.round));
    }
    if a.dimension() != b.dimension() {
        return Err(FusionError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }

    // Two-pointer merge of the sorted contributor lists; any equal pair is a
    // double-count and therefore an exactly-once violation.
    let mut contributors = Vec::with_capacity(a.contributors.len() + b.contributors.len());
    let (mut i, mut j) = (0, 0);
    while i < a.contributors.len() && j < b.contributors.len() {
        match a.contributors[i].cmp(&b.contributors[j]) {
            std::cmp::Ordering::Less => {
                contributors.push(a.contributors[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                contributors.push(b.contributors[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                return Err(FusionError::OverlappingContributors(a.contributors[i]));
            }
        }
    }
    contributors.extend_from_slice(&a.contributors[i..]);
    contributors.extend_from_slice(&b.contributors[j..]);

    let mut sum = a.weighted_sum.clone();
    sum.add_scaled(&b.weighted_sum, 1.0);
    Ok(PartialAggregate {
        weighted_sum: sum,
        total_samples: a.total_samples + b.total_samples,
        contributors,
        round: a.round,
    })
}

/// Merges a batch of partials left to right.
pub fn merge_all(parts: &[PartialAggregate]) -> Result<PartialAggregate, FusionError> {
    let first = parts.first().ok_or(FusionError::EmptyRound)?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc = merge(&acc, p)?;
    }
    Ok(acc)
}

/// Applies the aggregated update to the global model:
/// `delta = S / N`, then one server optimizer step with learning rate `eta`.
pub fn finalize(
    partial: &PartialAggregate,
    model: &GlobalModel,
) -> Result<GlobalModel, FusionError> {
    if partial.total_samples == 0 {
        return Err(FusionError::EmptyRound);
    }
    if partial.round != model.round {
        return Err(FusionError::RoundMismatch {
            partial: partial.round,
            model: model.round,
        });
    }
    if partial.dimension() != model.weights.dimension() {
        return Err(FusionError::DimensionMismatch {
            expected: model.weights.dimension(),
            got: partial.dimension(),
        });
    }
    let mut mean_delta = partial.weighted_sum.clone();
    mean_delta.scale(1.0 / partial.total_samples as f64);
    // Pseudo-gradient is the negated mean delta, so the SGD step moves the
    // model toward the average of the parties' local changes.
    let mut pseudo_gradient = mean_delta;
    pseudo_gradient.scale(-1.0);
    let weights = server_sgd(&model.weights, &pseudo_gradient, model.learning_rate)?;
    Ok(GlobalModel {
        round: model.round + 1,
        weights,
        learning_rate: model.learning_rate,
    })
}

/// Plain SGD server optimizer: `m - eta * g`.
pub fn server_sgd(
    weights: &WeightVector,
    pseudo_gradient: &WeightVector,
    eta: f64,
) -> Result<WeightVector, FusionError> {
    if weights.dimension() != pseudo_gradient.dimension() {
        return Err(FusionError::DimensionMismatch {
            expected: weights.dimension(),
            got: pseudo_gradient.dimension(),
        });
    }
    let mut out = weights.clone();
    out.add_scaled(pseudo_gradient, -eta);
    if !out.is_finite() {
        return Err(FusionError::NonFinite("server_sgd"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(party: u32, round: u32, delta: Vec<f64>, samples: u32) -> ModelUpdate {
        ModelUpdate {
            party_id: party,
            round,
            delta: WeightVector(delta),
            sample_count: samples,
            update_id: UpdateId::new(party, round),
            submitted_at: VirtualTime::ZERO,
        }
    }

    /// Independent scalar-loop oracle for the weighted sum, kept free of any
    /// WeightVector helpers so it cannot share a bug with the implementation.
    #[allow(clippy::needless_range_loop)]
    fn oracle_weighted_sum(updates: &[ModelUpdate]) -> (Vec<f64>, u64) {
        let mut by_id: Vec<&ModelUpdate> = updates.iter().collect();
        by_id.sort_by_key(|u| u.update_id.0);
        let d = updates[0].delta.0.len();
        let mut sum = vec![0.0f64; d];
        let mut total = 0u64;
        for u in by_id {
            for k in 0..d {
                sum[k] += u.sample_count as f64 * u.delta.0[k];
            }
            total += u.sample_count as u64;
        }
        (sum, total)
    }

    #[test]
    fn single_update_leaf() {
        let agg = leaf_aggregate(&[update(0, 1, vec![2.0, 4.0], 3)]).unwrap();
        assert_eq!(agg.weighted_sum.0, vec![6.0, 12.0]);
        assert_eq!(agg.total_samples, 3);
        assert_eq!(agg.contributors.len(), 1);
    }

    #[test]
    fn orthogonal_updates_sum() {
        let agg = leaf_aggregate(&[
            update(0, 1, vec![1.0, 0.0], 1),
            update(1, 1, vec![0.0, 1.0], 1),
        ])
        .unwrap();
        assert_eq!(agg.weighted_sum.0, vec![1.0, 1.0]);
        assert_eq!(agg.total_samples, 2);
    }

    #[test]
    fn five_random_updates_match_scalar_oracle() {
        let mut rng = crate::rng::RngStream::new(99, "fusion-oracle");
        let updates: Vec<ModelUpdate> = (0..5)
            .map(|p| {
                let delta: Vec<f64> = (0..7).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
                update(p, 2, delta, rng.next_range_u32(1, 50))
            })
            .collect();
        let (expected_sum, expected_total) = oracle_weighted_sum(&updates);
        let agg = leaf_aggregate(&updates).unwrap();
        assert_eq!(agg.total_samples, expected_total);
        for (got, want) in agg.weighted_sum.0.iter().zip(expected_sum.iter()) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn leaf_rejects_mixed_rounds_and_duplicates() {
        let err =
            leaf_aggregate(&[update(0, 1, vec![1.0], 1), update(1, 2, vec![1.0], 1)]).unwrap_err();
        assert!(matches!(err, FusionError::MixedRounds(..)));

        let err =
            leaf_aggregate(&[update(0, 1, vec![1.0], 1), update(0, 1, vec![2.0], 1)]).unwrap_err();
        assert!(matches!(err, FusionError::DuplicateUpdate(..)));

        let err = leaf_aggregate(&[update(0, 1, vec![1.0], 1), update(1, 1, vec![1.0, 2.0], 1)])
            .unwrap_err();
        assert!(matches!(err, FusionError::DimensionMismatch { .. }));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let x = leaf_aggregate(&[update(0, 1, vec![1.5, -2.0], 4)]).unwrap();
        let id = PartialAggregate::empty(1, 2);
        let merged = merge(&x, &id).unwrap();
        assert_eq!(merged.weighted_sum.0, x.weighted_sum.0);
        assert_eq!(merged.total_samples, x.total_samples);
        assert_eq!(merged.contributors, x.contributors);
        let merged = merge(&id, &x).unwrap();
        assert_eq!(merged.weighted_sum.0, x.weighted_sum.0);
    }

    #[test]
    fn merge_is_commutative_within_tolerance() {
        let a = leaf_aggregate(&[update(0, 1, vec![0.3, 0.7], 3)]).unwrap();
        let b = leaf_aggregate(&[update(1, 1, vec![-0.1, 0.2], 5)]).unwrap();
        let ab = merge(&a, &b).unwrap();
        let ba = merge(&b, &a).unwrap();
        assert_eq!(ab.total_samples, ba.total_samples);
        assert!(ab.weighted_sum.max_rel_diff(&ba.weighted_sum) <= 1e-12);
        assert_eq!(ab.contributors, ba.contributors);
    }

    #[test]
    fn tree_grouping_matches_sequential_fold() {
        let mut rng = crate::rng::RngStream::new(5, "assoc");
        let updates: Vec<ModelUpdate> = (0..4)
            .map(|p| {
                let delta: Vec<f64> = (0..9).map(|_| rng.next_f64() * 10.0 - 5.0).collect();
                update(p, 1, delta, rng.next_range_u32(1, 20))
            })
            .collect();
        let parts: Vec<PartialAggregate> = updates
            .iter()
            .map(|u| leaf_aggregate(std::slice::from_ref(u)).unwrap())
            .collect();
        let left = merge(&merge(&parts[0], &parts[1]).unwrap(), &parts[2]).unwrap();
        let fold = merge(&left, &parts[3]).unwrap();
        let paired = merge(
            &merge(&parts[0], &parts[1]).unwrap(),
            &merge(&parts[2], &parts[3]).unwrap(),
        )
        .unwrap();
        assert!(paired.weighted_sum.max_rel_diff(&fold.weighted_sum) <= 1e-9);
        assert_eq!(paired.total_samples, fold.total_samples);
    }

    #[test]
    fn merge_rejects_overlapping_contributors() {
        let a = leaf_aggregate(&[update(0, 1, vec![1.0], 1)]).unwrap();
        let err = merge(&a, &a).unwrap_err();
        assert!(matches!(err, FusionError::OverlappingContributors(..)));
    }

    #[test]
    fn finalize_single_party_reproduces_local_change() {
        let partial = leaf_aggregate(&[update(0, 1, vec![1.0, 1.0], 1)]).unwrap();
        let model = GlobalModel {
            round: 1,
            weights: WeightVector(vec![0.0, 0.0]),
            learning_rate: 1.0,
        };
        let next = finalize(&partial, &model).unwrap();
        assert_eq!(next.round, 2);
        assert_eq!(next.weights.0, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_deltas_average_to_that_delta() {
        // Two equal-weight parties: x + x = 2x and (2x)/2 = x are exact in
        // binary floating point, so equality here is bitwise.
        let delta = vec![0.1, -0.7, 3.3];
        let partial = leaf_aggregate(&[
            update(0, 1, delta.clone(), 1),
            update(1, 1, delta.clone(), 1),
        ])
        .unwrap();
        let model = GlobalModel {
            round: 1,
            weights: WeightVector(vec![0.0; 3]),
            learning_rate: 1.0,
        };
        let next = finalize(&partial, &model).unwrap();
        assert_eq!(next.weights.0, delta);

        // Five parties: same property within strict tolerance.
        let partial = leaf_aggregate(
            &(0..5)
                .map(|p| update(p, 1, delta.clone(), 2))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let next = finalize(&partial, &model).unwrap();
        for (got, want) in next.weights.0.iter().zip(delta.iter()) {
            assert!((got - want).abs() <= 1e-15 * want.abs());
        }
    }

    #[test]
    fn mean_delta_stays_in_coordinatewise_hull() {
        let mut rng = crate::rng::RngStream::new(17, "hull");
        let updates: Vec<ModelUpdate> = (0..8)
            .map(|p| {
                let delta: Vec<f64> = (0..5).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
                update(p, 1, delta, rng.next_range_u32(1, 9))
            })
            .collect();
        let partial = leaf_aggregate(&updates).unwrap();
        let model = GlobalModel {
            round: 1,
            weights: WeightVector::zeros(5),
            learning_rate: 1.0,
        };
        // eta = 1 over a zero model makes the new weights equal mean delta.
        let next = finalize(&partial, &model).unwrap();
        for k in 0..5 {
            let lo = updates
                .iter()
                .map(|u| u.delta.0[k])
                .fold(f64::INFINITY, f64::min);
            let hi = updates
                .iter()
                .map(|u| u.delta.0[k])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(next.weights.0[k] >= lo - 1e-12 && next.weights.0[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn finalize_rejects_empty_round() {
        let model = GlobalModel {
            round: 1,
            weights: WeightVector::zeros(2),
            learning_rate: 1.0,
        };
        let err = finalize(&PartialAggregate::empty(1, 2), &model).unwrap_err();
        assert_eq!(err, FusionError::EmptyRound);
    }

    #[test]
    fn server_sgd_arithmetic() {
        let out = server_sgd(&WeightVector(vec![1.0]), &WeightVector(vec![0.0]), 7.0).unwrap();
        assert_eq!(out.0, vec![1.0]);
        let out = server_sgd(&WeightVector(vec![0.0]), &WeightVector(vec![-2.0]), 0.5).unwrap();
        assert_eq!(out.0, vec![1.0]);
        assert!(server_sgd(&WeightVector(vec![0.0]), &WeightVector(vec![0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn algorithm_validation_rules() {
        let ok = FusionAlgorithm {
            kind: FusionKind::FedSgd,
            prox_mu: 0.0,
            local_epochs_tau: 1,
        };
        assert!(ok.validate().is_ok());
        let sgd_multi = FusionAlgorithm {
            local_epochs_tau: 3,
            ..ok
        };
        assert!(sgd_multi.validate().is_err());
        let prox_no_mu = FusionAlgorithm {
            kind: FusionKind::FedProx,
            prox_mu: 0.0,
            local_epochs_tau: 2,
        };
        assert!(prox_no_mu.validate().is_err());
        let zero_tau = FusionAlgorithm {
            kind: FusionKind::FedAvg,
            prox_mu: 0.0,
            local_epochs_tau: 0,
        };
        assert!(zero_tau.validate().is_err());
    }

    #[test]
    fn sample_conservation_is_exact() {
        let mut rng = crate::rng::RngStream::new(3, "conserve");
        let updates: Vec<ModelUpdate> = (0..64)
            .map(|p| update(p, 1, vec![rng.next_f64()], rng.next_range_u32(1, 1000)))
            .collect();
        let expected: u64 = updates.iter().map(|u| u.sample_count as u64).sum();
        let agg = leaf_aggregate(&updates).unwrap();
        assert_eq!(agg.total_samples, expected);
        assert_eq!(agg.contributors.len(), 64);
    }
}
