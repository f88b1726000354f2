//! Repair statistics: direct repair with random fresh proofs, and the
//! level-cache failure probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash_tree::{verify_poi, Digest, LeafState, LookUpTable, SmtHasher};
use crate::par::{self, Execution};
use crate::repair::update_poi_with_poi;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectRepairStats {
    pub missed_updates: usize,
    pub trials: usize,
    /// Still broken after the first fresh proof.
    pub first_fail_rate: f64,
    /// Still broken after ten fresh proofs.
    pub first10_fail_rate: f64,
    /// Still broken when giving up.
    pub fail_rate: f64,
    /// Fresh proofs fed per trial; a failed trial counts `give_up`.
    pub avg_tries: f64,
    pub avg_tries_std_error: f64,
}

/// Per-trial generator: one ChaCha stream per trial index, so results do
/// not depend on how trials are spread over threads.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Tries to repair a proof that missed `m` CA changes by blending in fresh
/// proofs of random other leaves, up to `give_up` of them.
pub fn run_direct_repair_analysis(
    hasher: &'static SmtHasher,
    tree_leaves: usize,
    m: usize,
    trials: usize,
    give_up: usize,
    seed: u64,
    exec: Execution,
) -> DirectRepairStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves: Vec<Digest> = (0..tree_leaves).map(|_| Digest(rng.gen())).collect();
    let base = LookUpTable::from_leaves(hasher, leaves.iter().copied());

    // tries needed, or None when the trial gave up
    let outcomes: Vec<Option<usize>> = par::map_range(exec, trials, |t| {
        let mut rng = trial_rng(seed, t + 1);
        let mut lut = base.clone();
        let mut members = leaves.clone();
        let victim = members[rng.gen_range(0..members.len())];
        let mut poi = lut.calc_poi(&victim);
        for _ in 0..m {
            if rng.gen::<bool>() && members.len() > 2 {
                let k = rng.gen_range(0..members.len());
                if members[k] == victim {
                    continue;
                }
                let gone = members.swap_remove(k);
                lut.remove_leaf(&gone);
            } else {
                let fresh = Digest(rng.gen());
                lut.add_leaf(fresh);
                members.push(fresh);
            }
        }
        let root = lut.root();
        let mut tries = 0;
        while !verify_poi(hasher, &victim, &poi, &root) {
            if tries == give_up {
                return None;
            }
            tries += 1;
            let peer = loop {
                let p = members[rng.gen_range(0..members.len())];
                if p != victim {
                    break p;
                }
            };
            let fresh = lut.calc_poi(&peer);
            update_poi_with_poi(hasher, &mut poi, &fresh, LeafState::Present).expect("distinct leaves");
        }
        Some(tries)
    });

    let n = trials.max(1) as f64;
    let tries: Vec<f64> = outcomes.iter().map(|o| o.unwrap_or(give_up) as f64).collect();
    let mean = tries.iter().sum::<f64>() / n;
    let var = tries.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let rate = |pred: &dyn Fn(&Option<usize>) -> bool| outcomes.iter().filter(|o| pred(o)).count() as f64 / n;
    DirectRepairStats {
        missed_updates: m,
        trials,
        first_fail_rate: rate(&|o| o.is_none_or(|t| t > 1)),
        first10_fail_rate: rate(&|o| o.is_none_or(|t| t > 10)),
        fail_rate: rate(&|o| o.is_none()),
        avg_tries: mean,
        avg_tries_std_error: (var / n).sqrt(),
    }
}

/// Chance that at least one of `m` missed changes falls into the same
/// depth-`clvl` part as the victim, which breaks a cache repair.
pub fn lc_fail_probability(clvl: u8, m: u32) -> f64 {
    let p = 0.5f64.powi(i32::from(clvl));
    1.0 - (1.0 - p).powi(m as i32)
}

/// Largest `m` whose failure probability stays within `target`.
pub fn max_missable(clvl: u8, target: f64) -> u32 {
    let mut m = 0;
    while lc_fail_probability(clvl, m + 1) <= target {
        m += 1;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcEstimate {
    pub clvl: u8,
    pub missed_updates: u32,
    pub trials: usize,
    pub fail_rate: f64,
    pub std_error: f64,
}

/// Monte-Carlo version of [`lc_fail_probability`]: random victim and
/// changed positions, failure when any change shares the victim's part.
pub fn lc_fail_monte_carlo(clvl: u8, m: u32, trials: usize, seed: u64, exec: Execution) -> LcEstimate {
    const CHUNK: usize = 4096;
    let chunks = trials.div_ceil(CHUNK);
    let fails: usize = par::map_range(exec, chunks, |c| {
        let mut rng = trial_rng(seed, c);
        let len = CHUNK.min(trials - c * CHUNK);
        (0..len)
            .filter(|_| {
                let victim = Digest(rng.gen()).leading_bits(u32::from(clvl));
                let mut hit = false;
                for _ in 0..m {
                    hit |= Digest(rng.gen()).leading_bits(u32::from(clvl)) == victim;
                }
                hit
            })
            .count()
    })
    .into_iter()
    .sum();
    let p = fails as f64 / trials as f64;
    LcEstimate {
        clvl,
        missed_updates: m,
        trials,
        fail_rate: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
    }
}
