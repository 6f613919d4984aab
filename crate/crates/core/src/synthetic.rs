//! Planted-structure click logs: a block Markov chain over the catalog.
//!
//! Items are split into equal blocks arranged as rings. From an item at ring
//! position `j`, the next click lands in the same block with probability
//! `within_block`, otherwise in another block chosen uniformly. Either way the
//! landing position is `j + s` (mod block size) with step `s` in `1..=stride`,
//! drawn with weight `stride + 1 - s`.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::dataio::{write_file, RawEvent};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub sessions: usize,
    pub items: usize,
    pub blocks: usize,
    pub within_block: f64,
    pub stride: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Gap between consecutive session starts.
    pub session_gap_secs: i64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            sessions: 2000,
            items: 50,
            blocks: 2,
            within_block: 0.9,
            stride: 5,
            min_len: 3,
            max_len: 12,
            session_gap_secs: 60,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 || !self.items.is_multiple_of(self.blocks) {
            return Err(Error::Config("items must split into at least two equal blocks".into()));
        }
        if self.stride == 0 || self.stride >= self.items / self.blocks {
            return Err(Error::Config("stride must lie in 1..block size".into()));
        }
        if !(0.0..=1.0).contains(&self.within_block) {
            return Err(Error::Config("within-block mass must lie in [0, 1]".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config("session lengths must satisfy 2 <= min <= max".into()));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.items / self.blocks
    }

    pub fn block_of(&self, item: usize) -> usize {
        item / self.block_size()
    }

    /// Exact next-click distribution from `item`.
    pub fn transition_row(&self, item: usize) -> Vec<f64> {
        let b = self.block_size();
        let (block, pos) = (item / b, item % b);
        let total: f64 = (1..=self.stride).map(|s| (self.stride + 1 - s) as f64).sum();
        let mut row = vec![0.0; self.items];
        for s in 1..=self.stride {
            let w = (self.stride + 1 - s) as f64 / total;
            let landing = (pos + s) % b;
            row[block * b + landing] += self.within_block * w;
            for other in (0..self.blocks).filter(|&o| o != block) {
                row[other * b + landing] += (1.0 - self.within_block) * w / (self.blocks - 1) as f64;
            }
        }
        row
    }
}

fn step<R: Rng>(cfg: &PlantedConfig, steps: &WeightedIndex<f64>, item: usize, rng: &mut R) -> usize {
    let b = cfg.block_size();
    let (block, pos) = (item / b, item % b);
    let s = steps.sample(rng) + 1;
    let target_block = if rng.random::<f64>() < cfg.within_block {
        block
    } else {
        let k = rng.random_range(0..cfg.blocks - 1);
        if k >= block {
            k + 1
        } else {
            k
        }
    };
    target_block * b + (pos + s) % b
}

/// Sessions as item-index sequences, in chronological order.
pub fn planted_sessions(cfg: &PlantedConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, "planted");
    let steps = WeightedIndex::new((1..=cfg.stride).map(|s| (cfg.stride + 1 - s) as f64)).expect("positive weights");
    Ok((0..cfg.sessions)
        .map(|_| {
            let len = r.random_range(cfg.min_len..=cfg.max_len);
            let mut items = vec![r.random_range(0..cfg.items)];
            while items.len() < len {
                let next = step(cfg, &steps, *items.last().unwrap(), &mut r);
                items.push(next);
            }
            items
        })
        .collect())
}

/// Click events with session ids `s<k>`, item ids `i<index>` and one-second
/// spacing inside each session.
pub fn planted_events(cfg: &PlantedConfig) -> Result<Vec<RawEvent>> {
    let sessions = planted_sessions(cfg)?;
    let mut events = Vec::new();
    for (k, items) in sessions.iter().enumerate() {
        let start = k as i64 * cfg.session_gap_secs * 1000;
        for (t, &item) in items.iter().enumerate() {
            events.push(RawEvent {
                session_id: format!("s{k}"),
                item_id: format!("i{item}"),
                timestamp: start + t as i64 * 1000,
            });
        }
    }
    Ok(events)
}

/// Writes `session_id,timestamp,item_id` rows without a header.
pub fn write_events(path: &Path, events: &[RawEvent]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(out, "{},{},{}", e.session_id, e.timestamp, e.item_id);
    }
    write_file(path, &out)
}
