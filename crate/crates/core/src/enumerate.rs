//! Head replication search space.
//!
//! A replication scheme says how many copies of each head a layer carries.
//! Copies of one head are interchangeable until they are placed on GPUs, so a
//! scheme is just a replica-count vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_SCHEMES: usize = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnumerationError {
    #[error("head count must be at least 1")]
    NoHeads,
    #[error("r_max and tp must be at least 1")]
    InvalidConfig,
    #[error("search space exceeds {cap} schemes; lower ch_budget/r_max or raise the cap")]
    TooManySchemes { cap: usize },
}

/// Replica count per head. `replicas[i] == 1` means head `i` is not copied.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicationScheme {
    pub replicas: Vec<usize>,
}

impl ReplicationScheme {
    pub fn identity(n: usize) -> Self {
        Self { replicas: vec![1; n] }
    }

    pub fn heads(&self) -> usize {
        self.replicas.len()
    }

    pub fn total_copies(&self) -> usize {
        self.replicas.iter().sum()
    }

    /// Copies beyond the first of every head.
    pub fn extra_copies(&self) -> usize {
        self.total_copies() - self.heads()
    }

    pub fn max_replicas(&self) -> usize {
        self.replicas.iter().copied().max().unwrap_or(0)
    }

    pub fn satisfies(&self, cfg: &EnumerationConfig) -> bool {
        self.replicas.iter().all(|&r| r >= 1 && r <= cfg.r_max)
            && self.extra_copies() <= cfg.ch_budget
            && (!cfg.require_divisible || self.total_copies().is_multiple_of(cfg.tp))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationConfig {
    /// Extra copies allowed per layer.
    pub ch_budget: usize,
    /// Cap on the total copies of any one head.
    pub r_max: usize,
    /// Keep only schemes whose total copy count is a multiple of `tp`.
    pub require_divisible: bool,
    pub tp: usize,
    pub max_schemes: usize,
}

impl EnumerationConfig {
    pub fn new(ch_budget: usize, r_max: usize) -> Self {
        Self {
            ch_budget,
            r_max,
            require_divisible: false,
            tp: 1,
            max_schemes: DEFAULT_MAX_SCHEMES,
        }
    }

    pub fn divisible_by(mut self, tp: usize) -> Self {
        self.require_divisible = true;
        self.tp = tp;
        self
    }

    fn check(&self, n: usize) -> Result<(), EnumerationError> {
        if n == 0 {
            return Err(EnumerationError::NoHeads);
        }
        if self.r_max == 0 || self.tp == 0 {
            return Err(EnumerationError::InvalidConfig);
        }
        Ok(())
    }
}

/// All replication schemes of `n` heads allowed by `cfg`, in lexicographic order.
///
/// Backtracks over heads: each head either keeps a single copy or takes
/// `2..=r_max` copies, bounded by the extra-copy budget that is still unspent.
pub fn enumerate_schemes(n: usize, cfg: &EnumerationConfig) -> Result<Vec<ReplicationScheme>, EnumerationError> {
    cfg.check(n)?;
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    backtrack(n, cfg, cfg.ch_budget, &mut current, &mut out)?;
    Ok(out)
}

fn backtrack(
    n: usize,
    cfg: &EnumerationConfig,
    budget_left: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<ReplicationScheme>,
) -> Result<(), EnumerationError> {
    if current.len() == n {
        let total = n + (cfg.ch_budget - budget_left);
        if !cfg.require_divisible || total.is_multiple_of(cfg.tp) {
            if out.len() == cfg.max_schemes {
                return Err(EnumerationError::TooManySchemes { cap: cfg.max_schemes });
            }
            out.push(ReplicationScheme {
                replicas: current.clone(),
            });
        }
        return Ok(());
    }
    let max_r = cfg.r_max.min(budget_left + 1);
    for r in 1..=max_r {
        current.push(r);
        backtrack(n, cfg, budget_left - (r - 1), current, out)?;
        current.pop();
    }
    Ok(())
}

/// `|enumerate_schemes(n, cfg)|` without materializing the schemes.
/// Ignores `max_schemes`.
pub fn count_schemes(n: usize, cfg: &EnumerationConfig) -> u128 {
    if cfg.check(n).is_err() {
        return 0;
    }
    let budget = cfg.ch_budget;
    let per_head_extra = cfg.r_max - 1;
    // ways[e] = number of replica vectors over the heads seen so far using
    // exactly `e` extra copies.
    let mut ways = vec![0u128; budget + 1];
    ways[0] = 1;
    for _ in 0..n {
        let mut next = vec![0u128; budget + 1];
        for (used, &count) in ways.iter().enumerate() {
            if count == 0 {
                continue;
            }
            for extra in 0..=per_head_extra.min(budget - used) {
                next[used + extra] = next[used + extra].saturating_add(count);
            }
        }
        ways = next;
    }
    ways.iter()
        .enumerate()
        .filter(|(extra, _)| !cfg.require_divisible || (n + extra).is_multiple_of(cfg.tp))
        .fold(0u128, |acc, (_, &c)| acc.saturating_add(c))
}
