//! Entropy of a sub-network's terminating distribution, and its cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extract_subroots, EntropyMode, LossSpec};
use crate::env::{DagEnv, StateIdx, Trajectory};
use crate::error::{Error, Result};
use crate::exact::{entropy_of, terminating_distribution_sparse};
use crate::model::{rollout_terminal, FlowParams};

/// Largest descendant set evaluated exactly.
pub const EXACT_ENTROPY_BUDGET: usize = 65_536;

/// Entropy of the terminating distribution of rollouts started at `s`.
///
/// `ExactDp` runs the forward DP over descendants of `s` (a budget error past
/// [`EXACT_ENTROPY_BUDGET`]); `MonteCarlo` returns the plug-in entropy of
/// `rollouts` sampled terminals.
pub fn subnet_entropy<E: DagEnv + ?Sized, R: Rng + ?Sized>(
    params: &FlowParams,
    env: &E,
    s: StateIdx,
    mode: EntropyMode,
    rng: &mut R,
) -> Result<f64> {
    match mode {
        EntropyMode::ExactDp => exact_entropy(params, env, s, EXACT_ENTROPY_BUDGET),
        EntropyMode::MonteCarlo { rollouts } => monte_carlo_entropy(params, env, s, rollouts, rng),
    }
}

pub(crate) fn exact_entropy<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    s: StateIdx,
    budget: usize,
) -> Result<f64> {
    let dist = terminating_distribution_sparse(params, env, s, budget)?;
    Ok(entropy_of(dist.into_iter().map(|(_, p)| p)))
}

pub(crate) fn monte_carlo_entropy<E: DagEnv + ?Sized, R: Rng + ?Sized>(
    params: &FlowParams,
    env: &E,
    s: StateIdx,
    rollouts: usize,
    rng: &mut R,
) -> Result<f64> {
    if rollouts == 0 {
        return Err(Error::Config("Monte Carlo entropy needs at least one rollout".into()));
    }
    let mut terminals = (0..rollouts)
        .map(|_| rollout_terminal(params, env, s, rng))
        .collect::<Result<Vec<_>>>()?;
    terminals.sort_unstable();
    let n = rollouts as f64;
    let counts = terminals.chunk_by(|a, b| a == b).map(|run| run.len() as f64 / n);
    Ok(entropy_of(counts))
}

/// Per-state sub-network entropies with per-entry staleness.
///
/// Entries exist only for branching states. A cached value is recomputed
/// once it is `entropy_refresh` steps old.
#[derive(Debug, Clone)]
pub struct EntropyCache {
    values: Vec<Option<(f64, u64)>>,
    seed: u64,
}

impl EntropyCache {
    pub fn new<E: DagEnv + ?Sized>(env: &E, seed: u64) -> Self {
        Self {
            values: vec![None; env.num_states()],
            seed,
        }
    }

    pub fn get(&self, s: StateIdx) -> Option<f64> {
        self.values.get(s).copied().flatten().map(|(v, _)| v)
    }

    /// Step at which `s` was last computed.
    pub fn refreshed_at(&self, s: StateIdx) -> Option<u64> {
        self.values.get(s).copied().flatten().map(|(_, step)| step)
    }

    pub fn insert<E: DagEnv + ?Sized>(&mut self, env: &E, s: StateIdx, value: f64, step: u64) -> Result<()> {
        if !env.is_branching(s) {
            return Err(Error::Contract(format!("state {s} does not root a sub-network")));
        }
        if !(value >= 0.0) {
            return Err(Error::Contract(format!("entropy must be nonnegative, got {value}")));
        }
        self.values[s] = Some((value, step));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean of all cached entropies.
    pub fn mean(&self) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(sum, n), (v, _)| (sum + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    fn is_stale(&self, s: StateIdx, step: u64, refresh: u64) -> bool {
        match self.values[s] {
            None => true,
            Some((_, at)) => step.saturating_sub(at) >= refresh,
        }
    }

    /// Generator for a Monte Carlo estimate of `s` at `step`. Depends only
    /// on `(seed, step, s)`, so refresh order never changes the draws.
    fn rng_for(&self, step: u64, s: StateIdx) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(s as u64);
        rng
    }

    /// Recomputes every missing or stale entry for the sub-roots of `batch`.
    /// Returns the number of entries computed.
    pub fn refresh<E: DagEnv + ?Sized>(
        &mut self,
        params: &FlowParams,
        env: &E,
        batch: &[Trajectory],
        spec: &LossSpec,
        step: u64,
    ) -> Result<usize> {
        let mut computed = 0;
        for traj in batch {
            for root in extract_subroots(env, traj) {
                let s = root.state;
                if !self.is_stale(s, step, spec.entropy_refresh) {
                    continue;
                }
                let value = match spec.entropy_mode {
                    EntropyMode::ExactDp => match exact_entropy(params, env, s, spec.exact_budget) {
                        Err(Error::Budget { .. }) => monte_carlo_entropy(
                            params,
                            env,
                            s,
                            spec.fallback_rollouts,
                            &mut self.rng_for(step, s),
                        )?,
                        other => other?,
                    },
                    EntropyMode::MonteCarlo { rollouts } => {
                        monte_carlo_entropy(params, env, s, rollouts, &mut self.rng_for(step, s))?
                    }
                };
                self.values[s] = Some((value, step));
                computed += 1;
            }
        }
        Ok(computed)
    }
}
