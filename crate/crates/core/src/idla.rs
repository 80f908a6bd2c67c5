//! Drifted internal DLA: particles start at the origin one at a time and
//! settle at the first site they visit outside the current cluster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{ClusterSet, ModelParams, Site, StepLaw};
use crate::walks::WalkState;

/// Steps a single walk may take before the run is abandoned.
pub const DEFAULT_STEP_CAP: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    /// 1-based particle number; particle `j` walks on RNG stream `j`.
    pub particle: u64,
    pub site: Site,
    pub walk_length: u64,
}

#[derive(Debug, Clone)]
pub struct IdlaRun {
    pub cluster: ClusterSet,
    pub settle_order: Vec<Settlement>,
    pub params: ModelParams,
}

impl IdlaRun {
    pub fn particles(&self) -> u64 {
        self.settle_order.len() as u64
    }
}

/// Incremental aggregation state.
struct Growth {
    params: ModelParams,
    law: StepLaw,
    cluster: ClusterSet,
    settle_order: Vec<Settlement>,
    step_cap: u64,
}

impl Growth {
    fn new(params: &ModelParams, step_cap: u64) -> Self {
        Growth {
            params: *params,
            law: params.step_law(),
            cluster: ClusterSet::new(params.d),
            settle_order: Vec::new(),
            step_cap,
        }
    }

    fn launched(&self) -> u64 {
        self.settle_order.len() as u64
    }

    fn add_particle(&mut self) -> Result<()> {
        let j = self.launched() + 1;
        let mut walk = WalkState::new(Site::origin(self.params.d), self.params.seed, j);
        while self.cluster.contains(&walk.position) {
            if walk.steps_taken >= self.step_cap {
                return Err(Error::RunawayWalk { walk: j, cap: self.step_cap });
            }
            walk.advance(&self.law);
        }
        self.cluster.insert(walk.position.clone());
        self.settle_order.push(Settlement {
            particle: j,
            site: walk.position,
            walk_length: walk.steps_taken,
        });
        Ok(())
    }

    fn snapshot(&self) -> IdlaRun {
        IdlaRun {
            cluster: self.cluster.clone(),
            settle_order: self.settle_order.clone(),
            params: self.params,
        }
    }
}

fn check_inputs(n: u64, params: &ModelParams) -> Result<()> {
    params.validate()?;
    if n < 1 {
        return Err(Error::InvalidParams("iDLA needs at least one particle".into()));
    }
    Ok(())
}

/// Grows a cluster of `n` particles. Deterministic given `params.seed`.
pub fn build_cluster(n: u64, params: &ModelParams) -> Result<IdlaRun> {
    build_cluster_with_cap(n, params, DEFAULT_STEP_CAP)
}

pub fn build_cluster_with_cap(n: u64, params: &ModelParams, step_cap: u64) -> Result<IdlaRun> {
    check_inputs(n, params)?;
    let mut growth = Growth::new(params, step_cap);
    for _ in 0..n {
        growth.add_particle()?;
    }
    Ok(IdlaRun {
        cluster: growth.cluster,
        settle_order: growth.settle_order,
        params: *params,
    })
}

/// Snapshots after every `checkpoint_every` particles, plus the final
/// cluster if `n` is not a multiple of it.
pub struct BatchedGrowth {
    growth: Growth,
    target: u64,
    checkpoint_every: u64,
    failed: bool,
}

impl Iterator for BatchedGrowth {
    type Item = Result<IdlaRun>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.growth.launched() >= self.target {
            return None;
        }
        let stop = (self.growth.launched() + self.checkpoint_every).min(self.target);
        while self.growth.launched() < stop {
            if let Err(e) = self.growth.add_particle() {
                self.failed = true;
                return Some(Err(e));
            }
        }
        Some(Ok(self.growth.snapshot()))
    }
}

pub fn build_cluster_batched(n: u64, params: &ModelParams, checkpoint_every: u64) -> Result<BatchedGrowth> {
    check_inputs(n, params)?;
    if checkpoint_every < 1 {
        return Err(Error::InvalidParams("checkpoint interval must be at least 1".into()));
    }
    Ok(BatchedGrowth {
        growth: Growth::new(params, DEFAULT_STEP_CAP),
        target: n,
        checkpoint_every,
        failed: false,
    })
}
