//! Experiment grid: users x attacker counts x flip probabilities x schemes x
//! seeds, each cell a full federation run scored by every requested scheme.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::FlipSpec;
use crate::contribution::{measure, ContributionError, MeasureOptions, Scheme, EXACT_SHAPLEY_MAX_PLAYERS};
use crate::ml::{Dataset, SyntheticTask, TrainConfig};
use crate::protocol::{
    run_federation, Behavior, FederationConfig, ParticipantId, ParticipantSpec, ProtocolError,
    Selection, Weighting,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cell (attackers={attacker_count}, p={flip_prob}, seed={seed}) failed: {source}")]
    Cell {
        attacker_count: usize,
        flip_prob: f64,
        seed: u64,
        source: CellError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CellError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Contribution(#[from] ContributionError),
}

fn default_test_per_class() -> usize {
    250
}
fn default_learning_rate() -> f64 {
    0.5
}
fn default_local_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    32
}
fn default_num_permutations() -> usize {
    200
}

/// Grid definition. Deserialized from JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub num_users: usize,
    pub attacker_counts: Vec<usize>,
    pub flip_probs: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub rounds: u32,
    pub ts: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_user: usize,
    #[serde(default = "default_test_per_class")]
    pub test_samples_per_class: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weighting: Weighting,
    /// Join orders per round for `shapley_sampled`.
    #[serde(default = "default_num_permutations")]
    pub num_permutations: usize,
    #[serde(default)]
    pub reflip_each_round: bool,
}

impl ExperimentGrid {
    /// Four users, 0-3 label flippers at p in {0.1, 0.3, 0.5, 1.0}, scored by
    /// Influence, Reputation and exact Shapley over seeds 1-5.
    pub fn demo() -> Self {
        Self {
            num_users: 4,
            attacker_counts: vec![0, 1, 2, 3],
            flip_probs: vec![0.1, 0.3, 0.5, 1.0],
            schemes: vec![Scheme::Influence, Scheme::Reputation, Scheme::ShapleyExact],
            seeds: (1..=5).collect(),
            rounds: 10,
            ts: 5,
            num_classes: 4,
            dim: 8,
            samples_per_user: 500,
            test_samples_per_class: default_test_per_class(),
            learning_rate: default_learning_rate(),
            local_epochs: default_local_epochs(),
            batch_size: default_batch_size(),
            weighting: Weighting::default(),
            num_permutations: default_num_permutations(),
            reflip_each_round: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let grid: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::InvalidConfig(msg));
        if self.num_users == 0 {
            return bad("num_users must be at least 1".into());
        }
        if self.attacker_counts.is_empty() || self.seeds.is_empty() || self.schemes.is_empty() {
            return bad("attacker_counts, seeds and schemes must be non-empty".into());
        }
        if let Some(a) = self
            .attacker_counts
            .iter()
            .find(|&&a| a != 0 && a >= self.num_users)
        {
            return bad(format!(
                "attacker count {a} leaves no honest user among {}",
                self.num_users
            ));
        }
        if self.attacker_counts.iter().any(|&a| a > 0) && self.flip_probs.is_empty() {
            return bad("flip_probs must be non-empty when attackers are configured".into());
        }
        if let Some(p) = self.flip_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("flip probability {p} outside [0, 1]"));
        }
        if self.rounds == 0 || self.ts == 0 || self.ts > self.rounds as usize {
            return bad(format!(
                "need 1 <= ts <= rounds, got ts={} rounds={}",
                self.ts, self.rounds
            ));
        }
        if self.num_classes < 2 || self.dim == 0 {
            return bad("need num_classes >= 2 and dim >= 1".into());
        }
        if self.samples_per_user == 0 || self.test_samples_per_class == 0 {
            return bad("samples_per_user and test_samples_per_class must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size > self.samples_per_user {
            return bad(format!(
                "batch_size {} not in [1, samples_per_user]",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.local_epochs == 0
        {
            return bad("learning_rate must be positive and local_epochs >= 1".into());
        }
        if self.schemes.contains(&Scheme::ShapleyExact) && self.num_users > EXACT_SHAPLEY_MAX_PLAYERS
        {
            return bad(format!(
                "exact Shapley supports at most {EXACT_SHAPLEY_MAX_PLAYERS} users"
            ));
        }
        if self.schemes.contains(&Scheme::ShapleySampled) && self.num_permutations == 0 {
            return bad("num_permutations must be positive".into());
        }
        let needs_pairs = self
            .schemes
            .iter()
            .any(|s| matches!(s, Scheme::Influence | Scheme::Reputation));
        if needs_pairs && self.num_users < 2 {
            return bad("influence and reputation need at least two users".into());
        }
        Ok(())
    }

    /// `(attacker_count, flip_prob)` pairs in output order. A zero attacker
    /// count yields a single cell with `flip_prob = 0`.
    pub fn cells(&self) -> Vec<Cell> {
        self.attacker_counts
            .iter()
            .flat_map(|&a| {
                if a == 0 {
                    vec![Cell {
                        attacker_count: 0,
                        flip_prob: 0.0,
                    }]
                } else {
                    self.flip_probs
                        .iter()
                        .map(|&p| Cell {
                            attacker_count: a,
                            flip_prob: p,
                        })
                        .collect()
                }
            })
            .collect()
    }

    /// Number of rows `run_grid` emits.
    pub fn expected_rows(&self) -> usize {
        let zero = self.attacker_counts.iter().filter(|&&a| a == 0).count();
        let cells = zero + (self.attacker_counts.len() - zero) * self.flip_probs.len();
        cells * self.seeds.len() * self.schemes.len() * self.num_users
    }

    fn federation(&self, cell: Cell, seed: u64) -> FederationConfig {
        let task = SyntheticTask::new(self.num_classes, self.dim, derive_seed(seed, &[1]))
            .expect("validated task shape");
        let total = self.num_users * self.samples_per_user;
        let pool = task.sample(total.div_ceil(self.num_classes), derive_seed(seed, &[2]));
        let test = task.sample(self.test_samples_per_class, derive_seed(seed, &[3]));
        let participants = (0..self.num_users)
            .map(|i| {
                let id = participant_id(i);
                let rows: Vec<usize> =
                    (i * self.samples_per_user..(i + 1) * self.samples_per_user).collect();
                let behavior = if i < cell.attacker_count {
                    Behavior::LabelFlipper {
                        flip: FlipSpec {
                            p: cell.flip_prob,
                            seed: derive_seed(seed, &[4, u64::from(id)]),
                        },
                        reflip_each_round: self.reflip_each_round,
                    }
                } else {
                    Behavior::Honest
                };
                ParticipantSpec {
                    id,
                    data: pool.select(&rows),
                    behavior,
                    train_cfg: TrainConfig {
                        learning_rate: self.learning_rate,
                        epochs: self.local_epochs,
                        batch_size: self.batch_size,
                        seed: derive_seed(seed, &[5, u64::from(id)]),
                    },
                    reported_data_size: None,
                }
            })
            .collect();
        FederationConfig {
            participants,
            rounds: self.rounds,
            selection: Selection::All,
            test_set: test,
            weighting: self.weighting,
            seed: derive_seed(seed, &[6]),
        }
    }

    fn run_cell(
        &self,
        cell: Cell,
        seed: u64,
        record_timing: bool,
    ) -> Result<Vec<ResultRow>, ExperimentError> {
        let wrap = |source: CellError| ExperimentError::Cell {
            attacker_count: cell.attacker_count,
            flip_prob: cell.flip_prob,
            seed,
            source,
        };
        let started = Instant::now();
        let fed = self.federation(cell, seed);
        let records = run_federation(&fed).map_err(|e| wrap(e.into()))?;
        let federation_ms = started.elapsed().as_millis() as u64;
        let final_accuracy = records.last().map_or(f64::NAN, |r| r.global_accuracy);
        let opts = MeasureOptions {
            weighting: self.weighting,
            ts: self.ts,
            num_permutations: self.num_permutations,
            seed: derive_seed(seed, &[7]),
        };
        let mut rows = Vec::with_capacity(self.schemes.len() * self.num_users);
        for &scheme in &self.schemes {
            let t = Instant::now();
            let report = measure(scheme, &records, &fed.test_set, &opts).map_err(|e| wrap(e.into()))?;
            let wall_time_ms = record_timing.then(|| federation_ms + t.elapsed().as_millis() as u64);
            for i in 0..self.num_users {
                let id = participant_id(i);
                rows.push(ResultRow {
                    seed,
                    scheme,
                    attacker_count: cell.attacker_count,
                    flip_prob: cell.flip_prob,
                    participant_id: id,
                    is_attacker: i < cell.attacker_count,
                    mean_score: report.score.scores.get(&id).copied().unwrap_or(f64::NAN),
                    final_global_accuracy: final_accuracy,
                    wall_time_ms,
                });
            }
        }
        Ok(rows)
    }

    /// The federator's test set for `seed`, as used by every cell.
    pub fn test_set(&self, seed: u64) -> Dataset {
        self.federation(
            Cell {
                attacker_count: 0,
                flip_prob: 0.0,
            },
            seed,
        )
        .test_set
    }

    /// Federation config for one cell, exposed for inspection and tests.
    pub fn federation_for(&self, cell: Cell, seed: u64) -> FederationConfig {
        self.federation(cell, seed)
    }
}

/// Users are numbered from 1; attackers take the lowest ids.
fn participant_id(index: usize) -> ParticipantId {
    index as ParticipantId + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub attacker_count: usize,
    pub flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub scheme: Scheme,
    pub attacker_count: usize,
    pub flip_prob: f64,
    pub participant_id: ParticipantId,
    pub is_attacker: bool,
    pub mean_score: f64,
    pub final_global_accuracy: f64,
    /// Only filled when timing is requested, so default output stays
    /// reproducible byte for byte.
    pub wall_time_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses the rayon default.
    pub parallel: usize,
    pub record_timing: bool,
}

/// Run every cell and seed. Rows come back in grid order (cell, seed,
/// scheme, participant) whatever the degree of parallelism.
pub fn run_grid(grid: &ExperimentGrid, opts: RunOptions) -> Result<Vec<ResultRow>, ExperimentError> {
    grid.validate()?;
    let jobs: Vec<(Cell, u64)> = grid
        .cells()
        .into_iter()
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(cell, seed)| grid.run_cell(cell, seed, opts.record_timing))
            .collect::<Result<Vec<_>, _>>()
    };
    let per_job = if opts.parallel > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?
            .install(work)?
    } else {
        work()?
    };
    Ok(per_job.into_iter().flatten().collect())
}

/// Nominal width of a scheme's score range, for comparing separations
/// across schemes. `None` for unbounded schemes.
pub fn score_range_width(scheme: Scheme) -> Option<f64> {
    match scheme {
        // Accuracy differences lie in [-1, 1].
        Scheme::Influence | Scheme::ShapleyExact | Scheme::ShapleySampled => Some(2.0),
        Scheme::Reputation => Some(1.0),
        Scheme::SelfReported => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub attacker_count: usize,
    pub flip_prob: f64,
    pub seeds: usize,
    pub honest_mean: Option<f64>,
    pub attacker_mean: Option<f64>,
    pub separation: Option<f64>,
    pub normalized_separation: Option<f64>,
    pub final_accuracy_mean: f64,
}

#[derive(Default)]
struct Group {
    honest: Vec<f64>,
    attacker: Vec<f64>,
    accuracy_by_seed: Vec<(u64, f64)>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per (scheme, attacker_count, flip_prob): honest and attacker mean scores,
/// their difference and the mean final accuracy. Groups keep first-seen
/// order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(Scheme, usize, u64)> = Vec::new();
    let mut groups: HashMap<(Scheme, usize, u64), Group> = HashMap::new();
    for r in rows {
        let key = (r.scheme, r.attacker_count, r.flip_prob.to_bits());
        let g = groups.entry(key).or_insert_with(|| {
            order.push(key);
            Group::default()
        });
        if r.is_attacker {
            g.attacker.push(r.mean_score);
        } else {
            g.honest.push(r.mean_score);
        }
        if !g.accuracy_by_seed.iter().any(|&(s, _)| s == r.seed) {
            g.accuracy_by_seed.push((r.seed, r.final_global_accuracy));
        }
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let honest_mean = mean(&g.honest);
            let attacker_mean = mean(&g.attacker);
            let separation = honest_mean.zip(attacker_mean).map(|(h, a)| h - a);
            let accs: Vec<f64> = g.accuracy_by_seed.iter().map(|&(_, a)| a).collect();
            SummaryRow {
                scheme: key.0,
                attacker_count: key.1,
                flip_prob: f64::from_bits(key.2),
                seeds: accs.len(),
                honest_mean,
                attacker_mean,
                separation,
                normalized_separation: separation
                    .zip(score_range_width(key.0))
                    .map(|(s, w)| s / w),
                final_accuracy_mean: mean(&accs).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> ExperimentGrid {
        ExperimentGrid {
            num_users: 3,
            attacker_counts: vec![0, 1],
            flip_probs: vec![0.5, 1.0],
            schemes: vec![Scheme::Influence, Scheme::SelfReported],
            seeds: vec![1, 2],
            rounds: 3,
            ts: 2,
            num_classes: 3,
            dim: 2,
            samples_per_user: 40,
            test_samples_per_class: 20,
            ..ExperimentGrid::demo()
        }
    }

    #[test]
    fn default_grid_cardinality() {
        let g = ExperimentGrid::demo();
        assert_eq!(g.cells().len(), 13);
        assert_eq!(g.expected_rows(), 780);
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let ok = small_grid();
        assert!(ok.validate().is_ok());
        for g in [
            ExperimentGrid { attacker_counts: vec![3], ..ok.clone() },
            ExperimentGrid { flip_probs: vec![1.2], ..ok.clone() },
            ExperimentGrid { ts: 4, ..ok.clone() },
            ExperimentGrid { seeds: vec![], ..ok.clone() },
            ExperimentGrid { batch_size: 41, ..ok.clone() },
            ExperimentGrid { num_classes: 1, ..ok.clone() },
        ] {
            assert!(matches!(g.validate(), Err(ExperimentError::InvalidConfig(_))), "{g:?}");
        }
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let mut v = serde_json::to_value(small_grid()).unwrap();
        assert!(ExperimentGrid::from_json(&v.to_string()).is_ok());
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(
            ExperimentGrid::from_json(&v.to_string()),
            Err(ExperimentError::InvalidConfig(_))
        ));
    }

    #[test]
    fn shards_are_disjoint_and_attackers_lowest_ids() {
        let g = small_grid();
        let fed = g.federation_for(Cell { attacker_count: 1, flip_prob: 1.0 }, 1);
        assert_eq!(fed.participants.len(), 3);
        assert!(matches!(fed.participants[0].behavior, Behavior::LabelFlipper { .. }));
        assert!(fed.participants[1..].iter().all(|p| p.behavior.is_honest()));
        let a = fed.participants[0].data.features();
        let b = fed.participants[1].data.features();
        assert_eq!(a.len(), 80);
        assert!(a.chunks(2).all(|r| !b.chunks(2).any(|s| s == r)));
    }

    #[test]
    fn rows_follow_grid_order() {
        let g = small_grid();
        let rows = run_grid(&g, RunOptions::default()).unwrap();
        assert_eq!(rows.len(), g.expected_rows());
        assert_eq!(rows.len(), 3 * 2 * 2 * 3);
        for r in &rows {
            assert_eq!(r.is_attacker, r.participant_id as usize <= r.attacker_count);
            assert!(r.wall_time_ms.is_none());
        }
        let serial = run_grid(&g, RunOptions { parallel: 1, record_timing: false }).unwrap();
        assert_eq!(rows, serial);
        let timed = run_grid(&g, RunOptions { parallel: 2, record_timing: true }).unwrap();
        assert!(timed.iter().all(|r| r.wall_time_ms.is_some()));
    }

    #[test]
    fn summary_handles_absent_attackers() {
        let row = |is_attacker, mean_score| ResultRow {
            seed: 1,
            scheme: Scheme::Influence,
            attacker_count: 1,
            flip_prob: 1.0,
            participant_id: 1,
            is_attacker,
            mean_score,
            final_global_accuracy: 0.9,
            wall_time_ms: None,
        };
        let s = summarize(&[row(false, 0.8), row(true, 0.2)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].separation.unwrap() - 0.6).abs() < 1e-12);
        assert!((s[0].normalized_separation.unwrap() - 0.3).abs() < 1e-12);

        let honest_only = summarize(&[ResultRow { attacker_count: 0, flip_prob: 0.0, ..row(false, 0.5) }]);
        assert_eq!(honest_only[0].attacker_mean, None);
        assert_eq!(honest_only[0].separation, None);
        assert_eq!(honest_only[0].honest_mean, Some(0.5));
    }
}
