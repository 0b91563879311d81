//! Deterministic federated-learning simulator for studying how contribution
//! measurement schemes (leave-one-out Influence, Reputation, Shapley value,
//! self-reported data size) behave when some participants are malicious,
//! and how their scores feed a monotone reward allocation.
//!
//! Module map:
//!
//! * [`ml`]: datasets, softmax regression, SGD, accuracy.
//! * [`protocol`]: federated rounds (select, train, aggregate, evaluate).
//! * [`attacks`]: label flipping, free-riding, untargeted poisoning.
//! * [`contribution`]: coalition values and the measurement schemes.
//! * [`incentive`]: reward allocation and the monotonicity check.
//! * [`experiments`] / [`output`]: the experiment grid and its CSV tables.

pub mod attacks;
pub mod contribution;
pub mod experiments;
pub mod incentive;
pub mod ml;
pub mod output;
pub mod protocol;
pub mod seed;
