use serde::{Deserialize, Serialize};

/// Welford accumulator for one reward component stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Population variance of everything pushed so far.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Chan et al. pairwise merge; `a.merge(b)` equals pushing `b`'s samples
    /// after `a`'s up to rounding.
    pub fn merge(&self, other: &RunningStats) -> RunningStats {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return *other;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let count = self.count + other.count;
        let n = count as f64;
        let delta = other.mean - self.mean;
        RunningStats {
            count,
            mean: self.mean + delta * n_b / n,
            m2: self.m2 + other.m2 + delta * delta * n_a * n_b / n,
        }
    }
}

/// Running per-component scale estimates for the ensemble reward.
///
/// Components are divided by their running standard deviation (no mean
/// shift) once more than `warmup` samples have been observed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub vis: RunningStats,
    pub struc: RunningStats,
    pub len: RunningStats,
}

impl RewardNormalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, vis: f64, struc: f64, len: f64) {
        self.vis.push(vis);
        self.struc.push(struc);
        self.len.push(len);
    }

    pub fn merge(&self, other: &RewardNormalizer) -> RewardNormalizer {
        RewardNormalizer {
            vis: self.vis.merge(&other.vis),
            struc: self.struc.merge(&other.struc),
            len: self.len.merge(&other.len),
        }
    }

    pub fn samples(&self) -> u64 {
        self.vis.count
    }
}

pub(crate) fn scale(stats: &RunningStats, x: f64, warmup: u64, sigma_floor: f64) -> f64 {
    if stats.count <= warmup {
        x
    } else {
        x / stats.std().max(sigma_floor)
    }
}
