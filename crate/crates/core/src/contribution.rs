//! Contribution measurement.
//!
//! All marginal-loss schemes share one value function: the test accuracy of
//! the model averaged from a coalition's updates within a round. The empty
//! coalition is worth the accuracy of the round's incoming global model.
//!
//! * Influence: `v(F) - v(F \ {i})`.
//! * Reputation: mean of `H(influence)` over the last `ts` rounds, `H(0) = 0`.
//! * Shapley: exact subset enumeration, or Monte-Carlo over join orders.
//! * Self-reported: the data size a participant claims.
//!
//! Per-round scores are averaged over the rounds in which a participant was
//! selected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ml::{evaluate, Dataset, MlError};
use crate::protocol::{aggregate, ParticipantId, ProtocolError, RoundRecord, Update, Weighting};
use crate::seed::{derive_seed, rng_for};

/// Largest player count accepted by [`shapley_exact`].
pub const EXACT_SHAPLEY_MAX_PLAYERS: usize = 12;
/// Largest player count accepted by exhaustive join-order enumeration.
pub const EXHAUSTIVE_MAX_PLAYERS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContributionError {
    #[error("participant {0} is not part of this round")]
    UnknownParticipant(ParticipantId),
    #[error("duplicate participant id {0}")]
    DuplicateId(ParticipantId),
    #[error("influence needs at least two participants in the round")]
    SingleParticipant,
    #[error("{n} players exceeds the limit of {max}")]
    TooManyPlayers { n: usize, max: usize },
    #[error("num_permutations must be at least 1")]
    NoPermutations,
    #[error("reputation needs {ts} rounds of history, participant {id} has {available}")]
    InsufficientHistory {
        id: ParticipantId,
        ts: usize,
        available: usize,
    },
    #[error("ts must be at least 1")]
    ZeroSlots,
    #[error("no rounds to measure")]
    NoRounds,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Ml(#[from] MlError),
}

pub type Result<T> = std::result::Result<T, ContributionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Influence,
    Reputation,
    #[serde(alias = "shapley")]
    ShapleyExact,
    ShapleySampled,
    SelfReported,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Influence,
        Scheme::Reputation,
        Scheme::ShapleyExact,
        Scheme::ShapleySampled,
        Scheme::SelfReported,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Influence => "influence",
            Scheme::Reputation => "reputation",
            Scheme::ShapleyExact => "shapley_exact",
            Scheme::ShapleySampled => "shapley_sampled",
            Scheme::SelfReported => "self_reported",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "shapley" {
            return Ok(Scheme::ShapleyExact);
        }
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown scheme `{s}`"))
    }
}

/// Per-participant scores from one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionScore {
    pub scheme: Scheme,
    pub scores: BTreeMap<ParticipantId, f64>,
    /// First and last round covered, when derived from round records.
    pub rounds: Option<(u32, u32)>,
}

impl ContributionScore {
    pub fn new(scheme: Scheme, scores: BTreeMap<ParticipantId, f64>) -> Self {
        Self {
            scheme,
            scores,
            rounds: None,
        }
    }
}

/// Value of a coalition of participant ids.
///
/// Implementations must be deterministic. The empty coalition is a valid
/// query.
pub trait CoalitionValue: Sync {
    fn value(&self, coalition: &[ParticipantId]) -> Result<f64>;
}

impl<F> CoalitionValue for F
where
    F: Fn(&[ParticipantId]) -> f64 + Sync,
{
    fn value(&self, coalition: &[ParticipantId]) -> Result<f64> {
        Ok(self(coalition))
    }
}

/// Accuracy-of-aggregate value function over one round's updates.
#[derive(Debug, Clone, Copy)]
pub struct RoundValue<'a> {
    pub record: &'a RoundRecord,
    pub test: &'a Dataset,
    pub weighting: Weighting,
}

impl<'a> RoundValue<'a> {
    pub fn new(record: &'a RoundRecord, test: &'a Dataset, weighting: Weighting) -> Self {
        Self {
            record,
            test,
            weighting,
        }
    }

    fn update_of(&self, id: ParticipantId) -> Result<&'a Update> {
        self.record
            .updates
            .iter()
            .find(|u| u.participant_id == id)
            .ok_or(ContributionError::UnknownParticipant(id))
    }
}

impl CoalitionValue for RoundValue<'_> {
    fn value(&self, coalition: &[ParticipantId]) -> Result<f64> {
        if coalition.is_empty() {
            return Ok(evaluate(&self.record.global_before, self.test)?);
        }
        let updates = coalition
            .iter()
            .map(|&id| self.update_of(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        let model = aggregate(&updates, self.weighting)?;
        Ok(evaluate(&model, self.test)?)
    }
}

/// `v(S)` for one round.
pub fn coalition_value(
    record: &RoundRecord,
    subset: &[ParticipantId],
    test: &Dataset,
    weighting: Weighting,
) -> Result<f64> {
    RoundValue::new(record, test, weighting).value(subset)
}

/// Leave-one-out influence of participant `id` in one round.
pub fn influence(
    record: &RoundRecord,
    id: ParticipantId,
    test: &Dataset,
    weighting: Weighting,
) -> Result<f64> {
    let ids = &record.selected_ids;
    if !ids.contains(&id) {
        return Err(ContributionError::UnknownParticipant(id));
    }
    if ids.len() < 2 {
        return Err(ContributionError::SingleParticipant);
    }
    let value = RoundValue::new(record, test, weighting);
    let without: Vec<ParticipantId> = ids.iter().copied().filter(|&x| x != id).collect();
    Ok(value.value(ids)? - value.value(&without)?)
}

/// Unit step with `H(0) = 0`.
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Fraction of the last `ts` influence values that are strictly positive.
pub fn reputation(influences: &[f64], ts: usize) -> Result<f64> {
    if ts == 0 {
        return Err(ContributionError::ZeroSlots);
    }
    if influences.len() < ts {
        return Err(ContributionError::InsufficientHistory {
            id: 0,
            ts,
            available: influences.len(),
        });
    }
    let window = &influences[influences.len() - ts..];
    Ok(window.iter().map(|&x| heaviside(x)).sum::<f64>() / ts as f64)
}

fn check_unique(ids: &[ParticipantId]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &id in ids {
        if !seen.insert(id) {
            return Err(ContributionError::DuplicateId(id));
        }
    }
    Ok(())
}

fn members(ids: &[ParticipantId], mask: u64) -> Vec<ParticipantId> {
    ids.iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, &id)| id)
        .collect()
}

/// Exact Shapley values by subset enumeration.
///
/// Every coalition is evaluated once (in parallel) into a table indexed by
/// bitmask over positions in `ids`; the weighted marginals are then summed
/// in ascending mask order.
pub fn shapley_exact(
    value: &dyn CoalitionValue,
    ids: &[ParticipantId],
) -> Result<BTreeMap<ParticipantId, f64>> {
    check_unique(ids)?;
    let n = ids.len();
    if n > EXACT_SHAPLEY_MAX_PLAYERS {
        return Err(ContributionError::TooManyPlayers {
            n,
            max: EXACT_SHAPLEY_MAX_PLAYERS,
        });
    }
    if n == 0 {
        return Ok(BTreeMap::new());
    }
    let table = (0..1u64 << n)
        .into_par_iter()
        .map(|mask| value.value(&members(ids, mask)))
        .collect::<Result<Vec<f64>>>()?;

    // |S|!(n-|S|-1)!/n! == 1 / (n * C(n-1, |S|))
    let mut binom = vec![1.0f64; n];
    for s in 1..n {
        binom[s] = binom[s - 1] * (n - s) as f64 / s as f64;
    }
    let weight: Vec<f64> = binom.iter().map(|c| 1.0 / (n as f64 * c)).collect();

    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let bit = 1u64 << i;
            let sv = (0..1u64 << n)
                .filter(|mask| mask & bit == 0)
                .map(|mask| {
                    weight[mask.count_ones() as usize] * (table[(mask | bit) as usize] - table[mask as usize])
                })
                .sum();
            (id, sv)
        })
        .collect())
}

/// Join orders used to estimate Shapley values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinOrders {
    /// Every one of the `n!` orders exactly once.
    Exhaustive,
    /// `count` orders drawn uniformly with a seeded generator.
    Sampled { count: usize, seed: u64 },
}

struct MemoValue<'a> {
    inner: &'a dyn CoalitionValue,
    ids: &'a [ParticipantId],
    cache: HashMap<u64, f64>,
}

impl MemoValue<'_> {
    fn get(&mut self, mask: u64) -> Result<f64> {
        if let Some(&v) = self.cache.get(&mask) {
            return Ok(v);
        }
        let v = self.inner.value(&members(self.ids, mask))?;
        self.cache.insert(mask, v);
        Ok(v)
    }
}

fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = (1..perm.len()).rev().find(|&i| perm[i - 1] < perm[i]) else {
        return false;
    };
    let j = (i..perm.len()).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Shapley values as the mean marginal contribution over join orders.
pub fn shapley_permutations(
    value: &dyn CoalitionValue,
    ids: &[ParticipantId],
    orders: JoinOrders,
) -> Result<BTreeMap<ParticipantId, f64>> {
    check_unique(ids)?;
    let n = ids.len();
    if n > 63 {
        return Err(ContributionError::TooManyPlayers { n, max: 63 });
    }
    let mut memo = MemoValue {
        inner: value,
        ids,
        cache: HashMap::new(),
    };
    let mut totals = vec![0.0; n];
    let mut walk = |order: &[usize], memo: &mut MemoValue<'_>| -> Result<()> {
        let mut mask = 0u64;
        let mut prev = memo.get(0)?;
        for &i in order {
            mask |= 1 << i;
            let next = memo.get(mask)?;
            totals[i] += next - prev;
            prev = next;
        }
        Ok(())
    };

    let mut perm: Vec<usize> = (0..n).collect();
    let count = match orders {
        JoinOrders::Exhaustive => {
            if n > EXHAUSTIVE_MAX_PLAYERS {
                return Err(ContributionError::TooManyPlayers {
                    n,
                    max: EXHAUSTIVE_MAX_PLAYERS,
                });
            }
            let mut count = 0usize;
            loop {
                walk(&perm, &mut memo)?;
                count += 1;
                if !next_permutation(&mut perm) {
                    break;
                }
            }
            count
        }
        JoinOrders::Sampled { count, seed } => {
            if count == 0 {
                return Err(ContributionError::NoPermutations);
            }
            let mut rng = rng_for(seed, &[0x5A4]);
            for _ in 0..count {
                perm.shuffle(&mut rng);
                walk(&perm, &mut memo)?;
            }
            count
        }
    };
    Ok(ids
        .iter()
        .zip(totals)
        .map(|(&id, t)| (id, t / count as f64))
        .collect())
}

/// Monte-Carlo Shapley estimate from `num_permutations` random join orders.
pub fn shapley_sampled(
    value: &dyn CoalitionValue,
    ids: &[ParticipantId],
    num_permutations: usize,
    seed: u64,
) -> Result<BTreeMap<ParticipantId, f64>> {
    shapley_permutations(
        value,
        ids,
        JoinOrders::Sampled {
            count: num_permutations,
            seed,
        },
    )
}

/// The data size the participant claims. Blind to update quality.
pub fn self_reported_score(update: &Update) -> f64 {
    update.reported_data_size as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureOptions {
    pub weighting: Weighting,
    /// Reputation window, in rounds.
    pub ts: usize,
    /// Join orders per round for sampled Shapley.
    pub num_permutations: usize,
    pub seed: u64,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            weighting: Weighting::DataSize,
            ts: 5,
            num_permutations: 1000,
            seed: 0,
        }
    }
}

/// Scores for one scheme over a run: the cross-round summary plus the
/// per-round values it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeReport {
    pub score: ContributionScore,
    pub per_round: Vec<(u32, BTreeMap<ParticipantId, f64>)>,
}

fn per_round_scores(
    scheme: Scheme,
    record: &RoundRecord,
    test: &Dataset,
    opts: &MeasureOptions,
) -> Result<BTreeMap<ParticipantId, f64>> {
    let value = RoundValue::new(record, test, opts.weighting);
    let ids = &record.selected_ids;
    match scheme {
        Scheme::Influence | Scheme::Reputation => ids
            .iter()
            .map(|&id| Ok((id, influence(record, id, test, opts.weighting)?)))
            .collect(),
        Scheme::ShapleyExact => shapley_exact(&value, ids),
        Scheme::ShapleySampled => shapley_sampled(
            &value,
            ids,
            opts.num_permutations,
            derive_seed(opts.seed, &[u64::from(record.round)]),
        ),
        Scheme::SelfReported => Ok(record
            .updates
            .iter()
            .map(|u| (u.participant_id, self_reported_score(u)))
            .collect()),
    }
}

/// Run one scheme over a federation's round records.
pub fn measure(
    scheme: Scheme,
    records: &[RoundRecord],
    test: &Dataset,
    opts: &MeasureOptions,
) -> Result<SchemeReport> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(a), Some(b)) => (a.round, b.round),
        _ => return Err(ContributionError::NoRounds),
    };
    let per_round_raw = records
        .iter()
        .map(|r| Ok((r.round, per_round_scores(scheme, r, test, opts)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut history: BTreeMap<ParticipantId, Vec<f64>> = BTreeMap::new();
    for (_, scores) in &per_round_raw {
        for (&id, &s) in scores {
            history.entry(id).or_default().push(s);
        }
    }

    let (scores, per_round) = if scheme == Scheme::Reputation {
        let scores = history
            .iter()
            .map(|(&id, inf)| {
                let rep = reputation(inf, opts.ts).map_err(|e| match e {
                    ContributionError::InsufficientHistory { ts, available, .. } => {
                        ContributionError::InsufficientHistory { id, ts, available }
                    }
                    other => other,
                })?;
                Ok((id, rep))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let steps = per_round_raw
            .into_iter()
            .map(|(r, m)| (r, m.into_iter().map(|(id, x)| (id, heaviside(x))).collect()))
            .collect();
        (scores, steps)
    } else {
        let scores = history
            .iter()
            .map(|(&id, xs)| (id, xs.iter().sum::<f64>() / xs.len() as f64))
            .collect();
        (scores, per_round_raw)
    };

    Ok(SchemeReport {
        score: ContributionScore {
            scheme,
            scores,
            rounds: Some((first, last)),
        },
        per_round,
    })
}
