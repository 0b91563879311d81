//! The federated round engine.
//!
//! A federation runs rounds `1..=rounds` of: select participants, let each
//! produce an update from the incoming global model, average the updates and
//! evaluate the new global model on the federator's test set. Every round is
//! recorded so contribution schemes can replay coalitions afterwards.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    flip_labels, free_rider_update, poison_update, AttackError, FlipSpec, FreeRiderStrategy,
    PoisonStrategy,
};
use crate::ml::{evaluate, train_local, Dataset, MlError, ModelParams, TrainConfig};
use crate::seed::{derive_seed, rng_for};

pub type ParticipantId = u32;

/// Half-width of the uniform range for initial global parameters.
pub const INIT_RANGE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("participant {id} failed in round {round}: {source}")]
    Participant {
        id: ParticipantId,
        round: u32,
        source: Box<ProtocolError>,
    },
    #[error("participant id {0} appears more than once")]
    DuplicateId(ParticipantId),
    #[error("cannot select {k} of {n} participants")]
    SelectionTooLarge { k: usize, n: usize },
    #[error("federation has no participants")]
    NoParticipants,
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("round numbers start at 1")]
    InvalidRound,
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("all reported data sizes are zero under data-size weighting")]
    ZeroTotalDataSize,
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum Behavior {
    Honest,
    /// Trains honestly on a label-flipped copy of its shard. The shard is
    /// flipped with the same seed every round unless `reflip_each_round`.
    LabelFlipper {
        flip: FlipSpec,
        #[serde(default)]
        reflip_each_round: bool,
    },
    FreeRider(FreeRiderStrategy),
    UntargetedPoisoner(PoisonStrategy),
}

impl Behavior {
    pub fn is_honest(&self) -> bool {
        matches!(self, Behavior::Honest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantSpec {
    pub id: ParticipantId,
    pub data: Dataset,
    pub behavior: Behavior,
    pub train_cfg: TrainConfig,
    /// Size the participant claims to hold; `None` reports the true size.
    pub reported_data_size: Option<usize>,
}

impl ParticipantSpec {
    pub fn honest(id: ParticipantId, data: Dataset, train_cfg: TrainConfig) -> Self {
        Self {
            id,
            data,
            behavior: Behavior::Honest,
            train_cfg,
            reported_data_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub participant_id: ParticipantId,
    pub round: u32,
    pub params: ModelParams,
    pub reported_data_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    /// Ascending.
    pub selected_ids: Vec<ParticipantId>,
    /// One per selected id, in the same order.
    pub updates: Vec<Update>,
    pub global_before: ModelParams,
    pub global_after: ModelParams,
    pub global_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    All,
    UniformRandom { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    #[default]
    DataSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub participants: Vec<ParticipantSpec>,
    pub rounds: u32,
    pub selection: Selection,
    pub test_set: Dataset,
    pub weighting: Weighting,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.participants.is_empty() {
            return Err(ProtocolError::NoParticipants);
        }
        if self.rounds == 0 {
            return Err(ProtocolError::NoRounds);
        }
        let mut seen = BTreeSet::new();
        for p in &self.participants {
            if !seen.insert(p.id) {
                return Err(ProtocolError::DuplicateId(p.id));
            }
            if let Behavior::LabelFlipper { flip, .. } = &p.behavior {
                flip.validate()?;
            }
        }
        if let Selection::UniformRandom { k, .. } = self.selection {
            if k > self.participants.len() {
                return Err(ProtocolError::SelectionTooLarge {
                    k,
                    n: self.participants.len(),
                });
            }
        }
        Ok(())
    }

    pub fn participant(&self, id: ParticipantId) -> Option<&ParticipantSpec> {
        self.participants.iter().find(|p| p.id == id)
    }
}

/// Initial global model: entries uniform in `[-INIT_RANGE, INIT_RANGE]`,
/// shaped after the federator's test set.
pub fn initialize(cfg: &FederationConfig) -> ModelParams {
    let (k, d) = (cfg.test_set.num_classes(), cfg.test_set.dim());
    let mut rng = rng_for(cfg.seed, &[0x1A17]);
    let values = (0..k * d + k)
        .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    ModelParams::from_flat(k, d, values).expect("shape built from test set")
}

/// Ids taking part in `round`, ascending.
pub fn select_participants(cfg: &FederationConfig, round: u32) -> Result<Vec<ParticipantId>> {
    if round == 0 {
        return Err(ProtocolError::InvalidRound);
    }
    let mut ids: Vec<ParticipantId> = cfg.participants.iter().map(|p| p.id).collect();
    ids.sort_unstable();
    match cfg.selection {
        Selection::All => Ok(ids),
        Selection::UniformRandom { k, seed } => {
            if k > ids.len() {
                return Err(ProtocolError::SelectionTooLarge { k, n: ids.len() });
            }
            let mut rng = rng_for(seed, &[0x5E1, u64::from(round)]);
            let mut chosen: Vec<ParticipantId> = rand::seq::index::sample(&mut rng, ids.len(), k)
                .into_iter()
                .map(|i| ids[i])
                .collect();
            chosen.sort_unstable();
            Ok(chosen)
        }
    }
}

fn round_train_cfg(spec: &ParticipantSpec, round: u32) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(spec.train_cfg.seed, &[u64::from(round)]),
        ..spec.train_cfg
    }
}

/// The update participant `spec` submits in `round`, starting from `global`.
pub fn produce_update(spec: &ParticipantSpec, global: &ModelParams, round: u32) -> Result<Update> {
    if round == 0 {
        return Err(ProtocolError::InvalidRound);
    }
    let cfg = round_train_cfg(spec, round);
    let params = match &spec.behavior {
        Behavior::Honest => train_local(&spec.data, global, &cfg)?,
        Behavior::LabelFlipper {
            flip,
            reflip_each_round,
        } => {
            let flip = if *reflip_each_round {
                FlipSpec {
                    seed: derive_seed(flip.seed, &[u64::from(round)]),
                    ..*flip
                }
            } else {
                *flip
            };
            let poisoned = flip_labels(&spec.data, &flip)?;
            train_local(&poisoned, global, &cfg)?
        }
        Behavior::FreeRider(strategy) => free_rider_update(strategy, global, round)?,
        Behavior::UntargetedPoisoner(strategy) => {
            let honest = train_local(&spec.data, global, &cfg)?;
            let strategy = PoisonStrategy {
                seed: derive_seed(strategy.seed, &[u64::from(round)]),
                ..*strategy
            };
            poison_update(&strategy, &honest)?
        }
    };
    Ok(Update {
        participant_id: spec.id,
        round,
        params,
        reported_data_size: spec.reported_data_size.unwrap_or(spec.data.len()),
    })
}

/// Weighted mean of update parameters.
///
/// Updates are summed in ascending participant id, so the result does not
/// depend on the order of `updates`. Each entry is clamped to the range
/// spanned by the inputs to absorb rounding in the weights.
pub fn aggregate(updates: &[Update], weighting: Weighting) -> Result<ModelParams> {
    let mut sorted: Vec<&Update> = updates.iter().collect();
    sorted.sort_by_key(|u| u.participant_id);
    let first = sorted.first().ok_or(ProtocolError::NoUpdates)?;
    let shape = first.params.shape();
    for u in &sorted[1..] {
        if u.params.shape() != shape {
            return Err(MlError::DimensionMismatch {
                expected: shape,
                found: u.params.shape(),
            }
            .into());
        }
    }
    for pair in sorted.windows(2) {
        if pair[0].participant_id == pair[1].participant_id {
            return Err(ProtocolError::DuplicateId(pair[0].participant_id));
        }
    }

    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0 / sorted.len() as f64; sorted.len()],
        Weighting::DataSize => {
            let total: usize = sorted.iter().map(|u| u.reported_data_size).sum();
            if total == 0 {
                return Err(ProtocolError::ZeroTotalDataSize);
            }
            sorted
                .iter()
                .map(|u| u.reported_data_size as f64 / total as f64)
                .collect()
        }
    };

    let mut out = first.params.map(|_| 0.0);
    for (u, &w) in sorted.iter().zip(&weights) {
        out.add_scaled(w, &u.params)?;
    }
    for (j, v) in out.as_mut_slice().iter_mut().enumerate() {
        let (lo, hi) = sorted.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| {
            let x = u.params.as_slice()[j];
            (lo.min(x), hi.max(x))
        });
        *v = v.clamp(lo, hi);
    }
    Ok(out)
}

/// Run every round of the federation and return the audit trail.
pub fn run_federation(cfg: &FederationConfig) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    let mut global = initialize(cfg);
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let selected_ids = select_participants(cfg, round)?;
        let specs: Vec<&ParticipantSpec> = selected_ids
            .iter()
            .map(|id| cfg.participant(*id).expect("selected from config"))
            .collect();
        // Collected in selection (ascending id) order regardless of scheduling.
        let updates = specs
            .par_iter()
            .map(|spec| {
                produce_update(spec, &global, round).map_err(|e| ProtocolError::Participant {
                    id: spec.id,
                    round,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global_after = aggregate(&updates, cfg.weighting)?;
        let global_accuracy = evaluate(&global_after, &cfg.test_set)?;
        records.push(RoundRecord {
            round,
            selected_ids,
            updates,
            global_before: global.clone(),
            global_after: global_after.clone(),
            global_accuracy,
        });
        global = global_after;
    }
    Ok(records)
}
