//! Incentive mechanism `(R, v, c, r)`: rewards, a value function over
//! rewards, a contribution function and a monotone reward function.
//!
//! Rewards here are scalar monetary amounts. The concrete reward function is
//! proportional: negative scores clamp to zero and the budget is split in
//! proportion to what remains.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contribution::{ContributionScore, Scheme};
use crate::protocol::ParticipantId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IncentiveError {
    #[error("no participants to reward")]
    EmptyScores,
    #[error("budget {0} must be finite and non-negative")]
    InvalidBudget(f64),
    #[error("score for participant {0} is not finite")]
    NonFiniteScore(ParticipantId),
    #[error("allocation and scores cover different participants")]
    MismatchedParticipants,
}

pub type Result<T> = std::result::Result<T, IncentiveError>;

/// `v: R -> ℝ`, the value a participant places on a reward.
pub trait RewardValueFn {
    fn value(&self, reward: f64) -> f64;
}

/// Money is worth its face value.
#[derive(Debug, Clone, Copy, Default)]
pub struct MonetaryValue;

impl RewardValueFn for MonetaryValue {
    fn value(&self, reward: f64) -> f64 {
        reward
    }
}

/// What to do when no participant has a positive score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroScorePolicy {
    #[default]
    SplitEqually,
    Withhold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAllocation {
    pub scheme: Scheme,
    pub rewards: BTreeMap<ParticipantId, f64>,
    pub rounds: Option<(u32, u32)>,
    pub budget: f64,
}

impl RewardAllocation {
    pub fn total(&self) -> f64 {
        self.rewards.values().sum()
    }
}

/// Proportional allocation with the default zero-score policy.
pub fn allocate_rewards(scores: &ContributionScore, budget: f64) -> Result<RewardAllocation> {
    allocate_rewards_with(scores, budget, ZeroScorePolicy::default())
}

pub fn allocate_rewards_with(
    scores: &ContributionScore,
    budget: f64,
    policy: ZeroScorePolicy,
) -> Result<RewardAllocation> {
    if scores.scores.is_empty() {
        return Err(IncentiveError::EmptyScores);
    }
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(IncentiveError::InvalidBudget(budget));
    }
    if let Some((&id, _)) = scores.scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(IncentiveError::NonFiniteScore(id));
    }

    let clamped: BTreeMap<ParticipantId, f64> =
        scores.scores.iter().map(|(&id, &s)| (id, s.max(0.0))).collect();
    let total: f64 = clamped.values().sum();
    let rewards = if total > 0.0 {
        clamped
            .iter()
            .map(|(&id, &s)| (id, budget * (s / total)))
            .collect()
    } else {
        let share = match policy {
            ZeroScorePolicy::SplitEqually => budget / clamped.len() as f64,
            ZeroScorePolicy::Withhold => 0.0,
        };
        clamped.keys().map(|&id| (id, share)).collect()
    };
    Ok(RewardAllocation {
        scheme: scores.scheme,
        rewards,
        rounds: scores.rounds,
        budget,
    })
}

/// True iff `score_i > score_j` implies `value(reward_i) >= value(reward_j)`
/// for every pair.
pub fn verify_monotone_under(
    alloc: &RewardAllocation,
    scores: &ContributionScore,
    value_fn: &dyn RewardValueFn,
) -> Result<bool> {
    if alloc.rewards.len() != scores.scores.len()
        || alloc.rewards.keys().any(|id| !scores.scores.contains_key(id))
    {
        return Err(IncentiveError::MismatchedParticipants);
    }
    // Sort by score; a violation exists iff some strictly lower score holds
    // a strictly higher reward value.
    let mut pairs: Vec<(f64, f64)> = scores
        .scores
        .iter()
        .map(|(id, &s)| (s, value_fn.value(alloc.rewards[id])))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best_below = f64::NEG_INFINITY;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        if pairs[i..j].iter().any(|&(_, v)| v < best_below) {
            return Ok(false);
        }
        for &(_, v) in &pairs[i..j] {
            best_below = best_below.max(v);
        }
        i = j;
    }
    Ok(true)
}

/// Monotonicity check with rewards valued at face value.
pub fn verify_monotone(alloc: &RewardAllocation, scores: &ContributionScore) -> Result<bool> {
    verify_monotone_under(alloc, scores, &MonetaryValue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scores(v: &[f64]) -> ContributionScore {
        ContributionScore::new(
            Scheme::ShapleyExact,
            v.iter().enumerate().map(|(i, &s)| (i as ParticipantId, s)).collect(),
        )
    }

    fn rewards(a: &RewardAllocation) -> Vec<f64> {
        a.rewards.values().copied().collect()
    }

    #[test]
    fn proportional_split() {
        let a = allocate_rewards(&scores(&[3.0, 1.0, 2.0]), 6.0).unwrap();
        assert_eq!(rewards(&a), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn negative_scores_clamp() {
        let a = allocate_rewards(&scores(&[-0.5, 0.5]), 10.0).unwrap();
        assert_eq!(rewards(&a), vec![0.0, 10.0]);
    }

    #[test]
    fn equal_scores_split_evenly() {
        let a = allocate_rewards(&scores(&[0.2; 4]), 7.0).unwrap();
        for r in rewards(&a) {
            assert_abs_diff_eq!(r, 1.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_non_positive_scores() {
        let s = scores(&[-1.0, 0.0, -3.0]);
        let a = allocate_rewards(&s, 9.0).unwrap();
        assert_eq!(rewards(&a), vec![3.0, 3.0, 3.0]);
        let w = allocate_rewards_with(&s, 9.0, ZeroScorePolicy::Withhold).unwrap();
        assert_eq!(w.total(), 0.0);
        assert!(verify_monotone(&w, &s).unwrap());
    }

    #[test]
    fn zero_budget() {
        let a = allocate_rewards(&scores(&[1.0, 2.0]), 0.0).unwrap();
        assert_eq!(rewards(&a), vec![0.0, 0.0]);
    }

    #[test]
    fn allocation_errors() {
        assert_eq!(
            allocate_rewards(&scores(&[]), 1.0),
            Err(IncentiveError::EmptyScores)
        );
        assert!(allocate_rewards(&scores(&[1.0]), -1.0).is_err());
        assert!(allocate_rewards(&scores(&[f64::NAN]), 1.0).is_err());
    }

    #[test]
    fn monotonicity_detection() {
        let s = scores(&[0.9, 0.1, 0.5]);
        let good = allocate_rewards(&s, 3.0).unwrap();
        assert!(verify_monotone(&good, &s).unwrap());

        let mut bad = good.clone();
        bad.rewards.insert(1, 5.0);
        assert!(!verify_monotone(&bad, &s).unwrap());

        // Ties in score may be rewarded in any order.
        let tied = scores(&[0.5, 0.5]);
        let mut uneven = allocate_rewards(&tied, 2.0).unwrap();
        uneven.rewards.insert(0, 2.0);
        uneven.rewards.insert(1, 0.0);
        assert!(verify_monotone(&uneven, &tied).unwrap());

        let other = scores(&[0.9, 0.1]);
        assert_eq!(
            verify_monotone(&good, &other),
            Err(IncentiveError::MismatchedParticipants)
        );
    }

    struct Saturating;
    impl RewardValueFn for Saturating {
        fn value(&self, reward: f64) -> f64 {
            reward.min(1.0)
        }
    }

    #[test]
    fn monotone_value_function_preserves_check() {
        let s = scores(&[3.0, 2.0, 1.0]);
        let a = allocate_rewards(&s, 60.0).unwrap();
        assert!(verify_monotone_under(&a, &s, &Saturating).unwrap());
    }
}
