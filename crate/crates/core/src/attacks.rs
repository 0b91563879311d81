//! Malicious participant behaviours: label flipping, free-riding and
//! untargeted model poisoning.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ml::{Dataset, ModelParams};
use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("flip probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("label flipping needs at least two classes")]
    SingleClass,
    #[error("scale {0} must be finite and non-negative")]
    InvalidScale(f64),
}

/// Label-flipping data poisoning: each row's label is replaced with
/// probability `p` by a uniformly drawn different class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipSpec {
    pub p: f64,
    pub seed: u64,
}

impl FlipSpec {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(AttackError::InvalidProbability(self.p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FreeRiderKind {
    /// Fresh Gaussian parameters with the given standard deviation.
    RandomParams { scale: f64 },
    /// Resubmit the incoming global model unchanged.
    EchoGlobal,
    /// Incoming global model plus Gaussian noise.
    PerturbedGlobal { noise_scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeRiderStrategy {
    pub kind: FreeRiderKind,
    pub seed: u64,
}

impl FreeRiderStrategy {
    pub fn validate(&self) -> Result<(), AttackError> {
        match self.kind {
            FreeRiderKind::RandomParams { scale: s }
            | FreeRiderKind::PerturbedGlobal { noise_scale: s } => check_scale(s),
            FreeRiderKind::EchoGlobal => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PoisonKind {
    /// Negate every parameter.
    SignFlip,
    /// Add Gaussian noise with the given standard deviation.
    GaussianNoise { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonStrategy {
    pub kind: PoisonKind,
    pub seed: u64,
}

impl PoisonStrategy {
    pub fn validate(&self) -> Result<(), AttackError> {
        match self.kind {
            PoisonKind::GaussianNoise { scale } => check_scale(scale),
            PoisonKind::SignFlip => Ok(()),
        }
    }
}

fn check_scale(s: f64) -> Result<(), AttackError> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(AttackError::InvalidScale(s))
    }
}

fn add_gaussian(params: &ModelParams, scale: f64, rng: &mut impl Rng) -> ModelParams {
    if scale == 0.0 {
        return params.clone();
    }
    let noise = Normal::new(0.0, scale).expect("scale validated");
    params.map(|x| x + noise.sample(rng))
}

/// Flip each label independently with probability `spec.p`.
pub fn flip_labels(data: &Dataset, spec: &FlipSpec) -> Result<Dataset, AttackError> {
    spec.validate()?;
    let k = data.num_classes();
    if k < 2 {
        return Err(AttackError::SingleClass);
    }
    let mut rng = rng_for(spec.seed, &[0xF1]);
    let labels = data
        .labels()
        .iter()
        .map(|&y| {
            // Both draws happen for every row so the stream position does not
            // depend on p.
            let u: f64 = rng.random();
            let shift = rng.random_range(1..k);
            if u < spec.p {
                (y + shift) % k
            } else {
                y
            }
        })
        .collect();
    Ok(data.with_labels(labels).expect("same row count"))
}

/// Fabricated update submitted by a free-rider in `round`.
pub fn free_rider_update(
    strategy: &FreeRiderStrategy,
    global: &ModelParams,
    round: u32,
) -> Result<ModelParams, AttackError> {
    strategy.validate()?;
    let mut rng = rng_for(strategy.seed, &[0xFE, u64::from(round)]);
    Ok(match strategy.kind {
        FreeRiderKind::EchoGlobal => global.clone(),
        FreeRiderKind::RandomParams { scale } => {
            add_gaussian(&ModelParams::zeros(global.num_classes(), global.dim()), scale, &mut rng)
        }
        FreeRiderKind::PerturbedGlobal { noise_scale } => {
            add_gaussian(global, noise_scale, &mut rng)
        }
    })
}

/// Corrupt an honestly trained model.
pub fn poison_update(
    strategy: &PoisonStrategy,
    honest_params: &ModelParams,
) -> Result<ModelParams, AttackError> {
    strategy.validate()?;
    Ok(match strategy.kind {
        PoisonKind::SignFlip => honest_params.map(|x| -x),
        PoisonKind::GaussianNoise { scale } => {
            add_gaussian(honest_params, scale, &mut rng_for(strategy.seed, &[0xB0]))
        }
    })
}
