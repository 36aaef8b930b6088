//! Synthetic interaction logs with planted sequential structure.
//!
//! Items are laid out on `num_chains` disjoint cycles. A user starts on a
//! popularity-weighted item and at each step either advances along the
//! cycle of the current item (with probability `follow_prob`) or jumps to a
//! popularity-weighted random item. Timestamps are strictly increasing per
//! user.

use rand::Rng as _;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};
use crate::util::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_chains: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub follow_prob: f64,
    /// Exponent of the Zipf-like item popularity used for starts and jumps.
    pub popularity_exponent: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 200,
            num_chains: 20,
            min_len: 8,
            max_len: 20,
            follow_prob: 0.8,
            popularity_exponent: 0.8,
        }
    }
}

/// Original (non-dense) id given to synthetic item `i`, so that ingestion has
/// a real remapping to do.
fn original_id(i: usize) -> u32 {
    (i as u32) * 10 + 1
}

pub fn generate(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Vec<Interaction>> {
    if cfg.num_items < 2 || cfg.num_chains == 0 || cfg.num_chains > cfg.num_items {
        return Err(Error::Config(format!(
            "need 1 <= num_chains <= num_items and num_items >= 2, got {cfg:?}"
        )));
    }
    if cfg.min_len < 3 || cfg.max_len < cfg.min_len {
        return Err(Error::Config("need 3 <= min_len <= max_len".into()));
    }
    if !(0.0..=1.0).contains(&cfg.follow_prob) {
        return Err(Error::Config("follow_prob must be in [0, 1]".into()));
    }
    let weights: Vec<f64> = (0..cfg.num_items)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent))
        .collect();
    let popular = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    // item i sits on cycle i % num_chains; its successor is the next member
    let successor = |i: usize| -> usize {
        let next = i + cfg.num_chains;
        if next < cfg.num_items {
            next
        } else {
            i % cfg.num_chains
        }
    };

    let mut out = Vec::new();
    for u in 0..cfg.num_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut item = popular.sample(rng);
        let mut ts = rng.random_range(0..1_000u64);
        for _ in 0..len {
            out.push(Interaction {
                user_id: u as u32 + 1,
                item_id: original_id(item),
                rating: rng.random_range(1..=5),
                timestamp: ts,
            });
            ts += rng.random_range(1..100u64);
            item = if rng.random::<f64>() < cfg.follow_prob {
                successor(item)
            } else {
                popular.sample(rng)
            };
        }
    }
    Ok(out)
}
