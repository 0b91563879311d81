#![allow(dead_code)]

use fedcontrib::ml::{loss, Dataset, ModelParams};
use fedcontrib::protocol::ParticipantId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A game given by an explicit value per subset bitmask.
pub struct TableGame {
    pub ids: Vec<ParticipantId>,
    pub table: Vec<f64>,
}

impl TableGame {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            ids: (0..n as ParticipantId).map(|i| 10 + 3 * i).collect(),
            table: (0..1usize << n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Random game where the first player is a dummy and, for n >= 3, the
    /// last two players are interchangeable.
    pub fn random_with_structure(n: usize, seed: u64) -> Self {
        let mut game = Self::random(n, seed);
        let full = (1usize << n) - 1;
        for mask in 0..=full {
            if mask & 1 == 1 {
                game.table[mask] = game.table[mask & !1];
            }
        }
        if n >= 3 {
            let (a, b) = (1usize << (n - 2), 1usize << (n - 1));
            for mask in 0..=full {
                if mask & a != 0 && mask & b == 0 {
                    game.table[mask] = game.table[(mask & !a) | b];
                }
            }
        }
        game
    }

    pub fn mask(&self, s: &[ParticipantId]) -> usize {
        s.iter()
            .map(|id| 1usize << self.ids.iter().position(|x| x == id).unwrap())
            .sum()
    }

    pub fn v(&self, s: &[ParticipantId]) -> f64 {
        self.table[self.mask(s)]
    }

    pub fn grand(&self) -> f64 {
        self.table[self.table.len() - 1] - self.table[0]
    }
}

/// Brute-force average of marginal contributions over all join orders,
/// built from Heap's algorithm independently of the library's enumeration.
pub fn brute_force_shapley(game: &TableGame) -> Vec<f64> {
    let n = game.ids.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut totals = vec![0.0; n];
    let mut count = 0usize;
    let mut visit = |p: &[usize]| {
        let mut mask = 0usize;
        for &i in p {
            let before = game.table[mask];
            mask |= 1 << i;
            totals[i] += game.table[mask] - before;
        }
        count += 1;
    };
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    totals.iter().map(|t| t / count as f64).collect()
}

/// Player 1 holds a left glove, players 2 and 3 a right glove each.
pub fn glove(s: &[ParticipantId]) -> f64 {
    f64::from(s.contains(&1) && (s.contains(&2) || s.contains(&3)))
}

pub const GLOVE_VALUES: [(ParticipantId, f64); 3] = [(1, 2.0 / 3.0), (2, 1.0 / 6.0), (3, 1.0 / 6.0)];

/// Central finite differences of the loss, entry by entry.
pub fn finite_difference_gradient(params: &ModelParams, batch: &Dataset, h: f64) -> Vec<f64> {
    (0..params.as_slice().len())
        .map(|j| {
            let mut plus = params.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[j] -= h;
            (loss(&plus, batch).unwrap() - loss(&minus, batch).unwrap()) / (2.0 * h)
        })
        .collect()
}

pub fn random_instance(seed: u64) -> (ModelParams, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..6);
    let d = rng.random_range(1..6);
    let n = rng.random_range(1..12);
    let values = (0..k * d + k)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let params = ModelParams::from_flat(k, d, values).unwrap();
    let features = (0..n * d)
        .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect::<Vec<f64>>();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (params, Dataset::new(features, labels, d, k).unwrap())
}
