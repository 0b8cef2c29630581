//! Training objectives.
//!
//! Every objective is a mean of squared log-ratio residuals. FM and DB
//! compare (δ-regularised) flows, and FM also checks each visited terminate
//! edge against the reward unless [`LossSpec::fm_reward_edge`] is off; TB, SubTB and the sub-network loss compare
//! log-space products along a trajectory and share one residual form:
//!
//! ```text
//! positions 0..=n are s_0..s_n, position n+1 is the sink
//! node(i)  = log F(s_i)            (i <= n),   node(n+1) = log R(s_n)
//! edge(t)  = log P_F(s_t | s_{t-1}) - log P_B(s_{t-1} | s_t)   (t <= n)
//! edge(n+1) = log P_F(stop | s_n)
//! r(i, j)  = node(i) + sum_{i<t<=j} edge(t) - node(j)
//! ```
//!
//! TB is `r(0, n+1)`, the sub-network loss rooted at position `k` is
//! `r(k, n+1)`, DB along the path (with δ = 0) is `r(t-1, t)`, and SubTB is
//! the λ-weighted average over all `i < j`.
//!
//! Gradients are accumulated analytically into a flat vector aligned with
//! [`FlowParams::values`].

mod entropy;

pub use entropy::{subnet_entropy, EntropyCache, EXACT_ENTROPY_BUDGET};

use std::collections::BTreeSet;

use crate::env::{DagEnv, StateIdx, Trajectory};
use crate::error::{Error, Result};
use crate::model::{FlowParams, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    FlowMatching,
    DetailedBalance,
    TrajectoryBalance,
    SubTrajectoryBalance,
    SubGFlowNet,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::FlowMatching,
        LossKind::DetailedBalance,
        LossKind::TrajectoryBalance,
        LossKind::SubTrajectoryBalance,
        LossKind::SubGFlowNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::FlowMatching => "fm",
            LossKind::DetailedBalance => "db",
            LossKind::TrajectoryBalance => "tb",
            LossKind::SubTrajectoryBalance => "subtb",
            LossKind::SubGFlowNet => "subgfn",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

/// How sub-network entropies are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyMode {
    /// Exact DP over descendants; falls back to Monte Carlo past the budget.
    ExactDp,
    MonteCarlo { rollouts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Flow regulariser for FM and DB.
    pub delta: f64,
    /// SubTB decay.
    pub lambda: f64,
    pub entropy_mode: EntropyMode,
    /// Optimizer steps between recomputations of a cached entropy.
    pub entropy_refresh: u64,
    /// Below this total entropy the sub-network loss uses uniform weights.
    pub entropy_floor: f64,
    /// Descendant budget for exact entropies.
    pub exact_budget: usize,
    /// Rollouts used when an exact entropy exceeds its budget.
    pub fallback_rollouts: usize,
    /// Adds the reward constraint `F(s -> s_f) = R(s)` on each visited
    /// state's terminate edge to the FM objective. The FM residual alone
    /// does not pin the derived terminate flow, so without it the sampler
    /// can drift while the loss stays at zero.
    pub fm_reward_edge: bool,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            delta: 1e-6,
            lambda: 0.99,
            entropy_mode: EntropyMode::ExactDp,
            entropy_refresh: 100,
            entropy_floor: 1e-8,
            exact_budget: EXACT_ENTROPY_BUDGET,
            fallback_rollouts: 64,
            fm_reward_edge: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if let EntropyMode::MonteCarlo { rollouts: 0 } = self.entropy_mode {
            return Err(Error::Config("Monte Carlo entropy needs at least one rollout".into()));
        }
        if self.entropy_refresh == 0 {
            return Err(Error::Config("entropy refresh interval must be >= 1".into()));
        }
        if !(self.entropy_floor >= 0.0) {
            return Err(Error::Config("entropy floor must be >= 0".into()));
        }
        if self.fallback_rollouts == 0 {
            return Err(Error::Config("fallback rollouts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Writes `d(log quantity)/d(param)` contributions into a flat gradient.
pub(crate) struct GradSink<'a> {
    params: &'a FlowParams,
    grads: &'a mut [f64],
}

impl<'a> GradSink<'a> {
    pub(crate) fn new(params: &'a FlowParams, grads: &'a mut [f64]) -> Self {
        debug_assert_eq!(params.len(), grads.len());
        Self { params, grads }
    }

    /// `log F(s)`: `log_Z` at the source, the state-flow entry elsewhere.
    fn log_flow<E: DagEnv + ?Sized>(&mut self, env: &E, s: StateIdx, w: f64) {
        if s == env.source() {
            self.grads[0] += w;
        } else {
            self.grads[self.params.flat_index(ParamId::LogStateFlow(s))] += w;
        }
    }

    fn log_z(&mut self, w: f64) {
        self.grads[0] += w;
    }

    /// `log softmax(logits_s)[slot]`.
    fn log_pf(&mut self, s: StateIdx, slot: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        let range = self.params.child_range(s);
        softmax_grad(&self.params.values()[range.clone()], slot, w, &mut self.grads[range]);
    }

    fn log_pb(&mut self, s: StateIdx, slot: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        if let Some(range) = self.params.parent_range(s) {
            softmax_grad(&self.params.values()[range.clone()], slot, w, &mut self.grads[range]);
        }
    }
}

fn softmax_grad(logits: &[f64], slot: usize, w: f64, out: &mut [f64]) {
    let probs = crate::model::softmax(logits);
    for (j, (g, p)) in out.iter_mut().zip(probs).enumerate() {
        *g += w * (if j == slot { 1.0 } else { 0.0 } - p);
    }
}

/// Log-space quantities of one trajectory in the shared residual form.
struct Chain {
    states: Vec<StateIdx>,
    slots: Vec<usize>,
    back_slots: Vec<usize>,
    node: Vec<f64>,
    /// Prefix sums of edge terms: `prefix[j] = sum_{t=1..=j} edge(t)`.
    prefix: Vec<f64>,
}

impl Chain {
    fn new<E: DagEnv + ?Sized>(params: &FlowParams, env: &E, traj: &Trajectory) -> Result<Self> {
        let n = traj.len();
        let slots = traj.slots(env);
        let back_slots: Vec<usize> = traj
            .states
            .windows(2)
            .map(|w| {
                env.parent_slot(w[1], w[0])
                    .ok_or_else(|| Error::Contract("trajectory edge has no reverse".into()))
            })
            .collect::<Result<_>>()?;
        let mut node: Vec<f64> = traj.states.iter().map(|&s| params.state_log_flow(s)).collect();
        node.push(env.reward(traj.terminal()).ln());
        let mut prefix = Vec::with_capacity(n + 2);
        prefix.push(0.0);
        for t in 1..=n + 1 {
            let prev = traj.states[t - 1];
            let mut e = params.log_pf(prev, slots[t - 1]);
            if t <= n {
                e -= params.log_pb(env, traj.states[t], back_slots[t - 1]);
            }
            prefix.push(prefix[t - 1] + e);
        }
        Ok(Self {
            states: traj.states.clone(),
            slots,
            back_slots,
            node,
            prefix,
        })
    }

    /// Index of the sink position.
    fn sink(&self) -> usize {
        self.states.len()
    }

    fn residual(&self, i: usize, j: usize) -> f64 {
        self.node[i] + self.prefix[j] - self.prefix[i] - self.node[j]
    }

    /// `sum w * r(i, j)^2` over `pairs`; with a sink, adds `d/dθ` of that sum.
    fn loss<E: DagEnv + ?Sized>(
        &self,
        env: &E,
        pairs: impl Iterator<Item = (usize, usize, f64)>,
        sink: Option<&mut GradSink<'_>>,
    ) -> f64 {
        let m = self.sink();
        let mut total = 0.0;
        let mut node_coef = vec![0.0; m + 1];
        // difference array for edge coefficients over t in (i, j]
        let mut edge_diff = vec![0.0; m + 2];
        for (i, j, w) in pairs {
            let r = self.residual(i, j);
            total += w * r * r;
            let g = 2.0 * w * r;
            node_coef[i] += g;
            node_coef[j] -= g;
            edge_diff[i + 1] += g;
            edge_diff[j + 1] -= g;
        }
        if let Some(sink) = sink {
            for (&s, &c) in self.states.iter().zip(&node_coef).take(m) {
                sink.log_flow(env, s, c);
            }
            let mut coef = 0.0;
            for (t, &d) in edge_diff.iter().enumerate().take(m + 1).skip(1) {
                coef += d;
                let prev = self.states[t - 1];
                sink.log_pf(prev, self.slots[t - 1], coef);
                if t < m {
                    sink.log_pb(self.states[t], self.back_slots[t - 1], -coef);
                }
            }
        }
        total
    }
}

/// `(log((δ + inflow) / (δ + outflow)))^2` on raw flows.
pub fn fm_residual(inflow: f64, reward: f64, outflow: f64, delta: f64) -> Result<f64> {
    let r = log_ratio(delta + inflow, delta + reward + outflow)?;
    Ok(r * r)
}

/// `(log((δ + forward) / (δ + backward)))^2` on raw edge flows.
pub fn db_residual(forward: f64, backward: f64, delta: f64) -> Result<f64> {
    let r = log_ratio(delta + forward, delta + backward)?;
    Ok(r * r)
}

fn log_ratio(num: f64, den: f64) -> Result<f64> {
    if !(num > 0.0) || !(den > 0.0) || !num.is_finite() || !den.is_finite() {
        return Err(Error::NumericalDomain(format!("log({num} / {den}) is undefined")));
    }
    Ok(num.ln() - den.ln())
}

/// Flow-matching residual at state `s`.
pub fn fm_loss<E: DagEnv + ?Sized>(params: &FlowParams, env: &E, s: StateIdx, delta: f64) -> Result<f64> {
    fm_term(params, env, s, delta, None)
}

fn fm_term<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    s: StateIdx,
    delta: f64,
    grad: Option<(&mut GradSink<'_>, f64)>,
) -> Result<f64> {
    // inflow terms as (log flow, parent, slot); the source's inflow is Z
    let inflow_terms: Vec<(f64, StateIdx, usize)> = if s == env.source() {
        vec![(params.log_z(), s, usize::MAX)]
    } else {
        (0..env.num_parents(s))
            .map(|k| {
                let p = env.parent(s, k);
                let slot = env.child_slot(p, s).expect("parent has an edge to child");
                (params.state_log_flow(p) + params.log_pf(p, slot), p, slot)
            })
            .collect()
    };
    let log_fs = params.state_log_flow(s);
    let term = env.terminate_slot(s);
    let outflow_terms: Vec<(f64, usize)> = (0..term).map(|k| (log_fs + params.log_pf(s, k), k)).collect();
    let inflow: f64 = inflow_terms.iter().map(|t| t.0.exp()).sum();
    let outflow: f64 = outflow_terms.iter().map(|t| t.0.exp()).sum();
    let num = delta + inflow;
    let den = delta + env.reward(s) + outflow;
    let r = log_ratio(num, den)?;
    if let Some((sink, scale)) = grad {
        let g = 2.0 * r * scale;
        for &(lf, p, slot) in &inflow_terms {
            let w = g * lf.exp() / num;
            if slot == usize::MAX {
                sink.log_z(w);
            } else {
                sink.log_flow(env, p, w);
                sink.log_pf(p, slot, w);
            }
        }
        for &(lf, k) in &outflow_terms {
            let w = -g * lf.exp() / den;
            sink.log_flow(env, s, w);
            sink.log_pf(s, k, w);
        }
    }
    Ok(r * r)
}

/// Detailed-balance residual on the edge leaving `s` through `slot`.
pub fn db_loss<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    s: StateIdx,
    slot: usize,
    delta: f64,
) -> Result<f64> {
    db_term(params, env, s, slot, delta, None)
}

fn db_term<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    s: StateIdx,
    slot: usize,
    delta: f64,
    grad: Option<(&mut GradSink<'_>, f64)>,
) -> Result<f64> {
    if slot >= env.num_children(s) {
        return Err(Error::Contract(format!("state {s} has no child slot {slot}")));
    }
    let log_fwd = params.state_log_flow(s) + params.log_pf(s, slot);
    let child = env.child(s, slot);
    let (log_bwd, back) = match child {
        Some(c) => {
            let back = env.parent_slot(c, s).expect("edge has a reverse");
            (params.state_log_flow(c) + params.log_pb(env, c, back), Some((c, back)))
        }
        None => (env.reward(s).ln(), None),
    };
    let (fwd, bwd) = (log_fwd.exp(), log_bwd.exp());
    let r = log_ratio(delta + fwd, delta + bwd)?;
    if let Some((sink, scale)) = grad {
        let g = 2.0 * r * scale;
        let wf = g * fwd / (delta + fwd);
        sink.log_flow(env, s, wf);
        sink.log_pf(s, slot, wf);
        if let Some((c, back)) = back {
            let wb = -g * bwd / (delta + bwd);
            sink.log_flow(env, c, wb);
            sink.log_pb(c, back, wb);
        }
    }
    Ok(r * r)
}

/// Trajectory-balance residual of a complete trajectory.
pub fn tb_loss<E: DagEnv + ?Sized>(params: &FlowParams, env: &E, traj: &Trajectory) -> Result<f64> {
    let chain = Chain::new(params, env, traj)?;
    Ok(chain.loss(env, std::iter::once((0, chain.sink(), 1.0)), None))
}

fn subtb_pairs(m: usize, lambda: f64) -> impl Iterator<Item = (usize, usize, f64)> {
    // m = sink position; pairs 0 <= i < j <= m
    let norm: f64 = (1..=m).map(|len| (m + 1 - len) as f64 * lambda.powi(len as i32)).sum();
    (0..m).flat_map(move |i| (i + 1..=m).map(move |j| (i, j, lambda.powi((j - i) as i32) / norm)))
}

/// λ-weighted average of squared residuals over every sub-trajectory.
pub fn subtb_loss<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    traj: &Trajectory,
    lambda: f64,
) -> Result<f64> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let chain = Chain::new(params, env, traj)?;
    Ok(chain.loss(env, subtb_pairs(chain.sink(), lambda), None))
}

/// A branching state on a trajectory, identified by its position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubRoot {
    pub state: StateIdx,
    pub position: usize,
}

/// Positions of a trajectory whose state roots a sub-network.
pub fn extract_subroots<E: DagEnv + ?Sized>(env: &E, traj: &Trajectory) -> Vec<SubRoot> {
    traj.states
        .iter()
        .enumerate()
        .filter(|&(_, &s)| env.is_branching(s))
        .map(|(position, &state)| SubRoot { state, position })
        .collect()
}

/// Trajectory-balance residual of the suffix starting at `root`, with the
/// sub-network's total flow taken as `F(root)`.
pub fn subgfn_suffix_loss<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    traj: &Trajectory,
    root: SubRoot,
) -> Result<f64> {
    if traj.states.get(root.position) != Some(&root.state) {
        return Err(Error::Contract(format!(
            "state {} is not at position {} of the trajectory",
            root.state, root.position
        )));
    }
    let chain = Chain::new(params, env, traj)?;
    Ok(chain.loss(env, std::iter::once((root.position, chain.sink(), 1.0)), None))
}

/// Normalised weights `w_i / sum w`, or uniform weights when the total is at
/// or below `floor`.
pub fn entropy_weights(entropies: &[f64], floor: f64) -> Vec<f64> {
    let total: f64 = entropies.iter().sum();
    if total <= floor {
        vec![1.0 / entropies.len() as f64; entropies.len()]
    } else {
        entropies.iter().map(|e| e / total).collect()
    }
}

/// Entropy-weighted mean of suffix losses over every (trajectory, sub-root)
/// pair in the batch. Weights are read from `cache` and treated as constants.
pub fn subgfn_batch_loss<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    batch: &[Trajectory],
    cache: &EntropyCache,
    spec: &LossSpec,
) -> Result<f64> {
    subgfn_term(params, env, batch, cache, spec, None)
}

fn subgfn_term<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    batch: &[Trajectory],
    cache: &EntropyCache,
    spec: &LossSpec,
    mut grad: Option<&mut GradSink<'_>>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let roots: Vec<Vec<SubRoot>> = batch.iter().map(|t| extract_subroots(env, t)).collect();
    let entropies: Vec<f64> = roots
        .iter()
        .flatten()
        .map(|r| {
            cache.get(r.state).ok_or_else(|| {
                Error::Contract(format!("no cached entropy for sub-root state {}", r.state))
            })
        })
        .collect::<Result<_>>()?;
    if entropies.is_empty() {
        return Err(Error::Contract("batch contains no branching states".into()));
    }
    let weights = entropy_weights(&entropies, spec.entropy_floor);
    let mut weights = weights.into_iter();
    let mut total = 0.0;
    for (traj, roots) in batch.iter().zip(&roots) {
        let chain = Chain::new(params, env, traj)?;
        let m = chain.sink();
        let pairs: Vec<(usize, usize, f64)> = roots
            .iter()
            .map(|r| (r.position, m, weights.next().expect("one weight per root")))
            .collect();
        total += chain.loss(env, pairs.into_iter(), grad.as_deref_mut());
    }
    Ok(total)
}

/// Batch objective for `spec.kind`. `cache` is required for the sub-network loss.
pub fn batch_loss<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    batch: &[Trajectory],
    spec: &LossSpec,
    cache: Option<&EntropyCache>,
) -> Result<f64> {
    loss_and_grad(params, env, batch, spec, cache, None)
}

/// Batch objective and, when `grads` is given, its gradient added into it.
pub(crate) fn loss_and_grad<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    batch: &[Trajectory],
    spec: &LossSpec,
    cache: Option<&EntropyCache>,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut sink = grads.map(|g| GradSink::new(params, g));
    match spec.kind {
        LossKind::FlowMatching => {
            let states: BTreeSet<StateIdx> = batch.iter().flat_map(|t| t.states.iter().copied()).collect();
            let scale = 1.0 / states.len() as f64;
            let mut total = 0.0;
            for &s in &states {
                total += fm_term(params, env, s, spec.delta, sink.as_mut().map(|g| (g, scale)))?;
                if spec.fm_reward_edge {
                    let stop = env.terminate_slot(s);
                    total += db_term(params, env, s, stop, spec.delta, sink.as_mut().map(|g| (g, scale)))?;
                }
            }
            Ok(total * scale)
        }
        LossKind::DetailedBalance => {
            let edges: BTreeSet<(StateIdx, usize)> = batch
                .iter()
                .flat_map(|t| t.states.iter().copied().zip(t.slots(env)))
                .collect();
            let scale = 1.0 / edges.len() as f64;
            let mut total = 0.0;
            for &(s, k) in &edges {
                total += db_term(params, env, s, k, spec.delta, sink.as_mut().map(|g| (g, scale)))?;
            }
            Ok(total * scale)
        }
        LossKind::TrajectoryBalance | LossKind::SubTrajectoryBalance => {
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            for traj in batch {
                let chain = Chain::new(params, env, traj)?;
                let m = chain.sink();
                total += if spec.kind == LossKind::TrajectoryBalance {
                    chain.loss(env, std::iter::once((0, m, scale)), sink.as_mut())
                } else {
                    let pairs = subtb_pairs(m, spec.lambda).map(|(i, j, w)| (i, j, w * scale));
                    chain.loss(env, pairs, sink.as_mut())
                };
            }
            Ok(total)
        }
        LossKind::SubGFlowNet => {
            let cache = cache.ok_or_else(|| {
                Error::Contract("the sub-network loss needs an entropy cache".into())
            })?;
            subgfn_term(params, env, batch, cache, spec, sink.as_mut())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Hypergrid;
    use crate::exact::{brute_force_flows, DEFAULT_TRAJECTORY_BUDGET};
    use crate::model::{BackwardMode, InitScheme};

    const LN2_SQ: f64 = 0.480_453_013_918_201_4;

    fn grid(d: usize, h: usize) -> Hypergrid {
        Hypergrid::new(d, h, 0.1).unwrap()
    }

    #[test]
    fn fm_raw_examples() {
        assert_eq!(fm_residual(1.0, 0.5, 0.5, 0.0).unwrap(), 0.0);
        assert!((fm_residual(1.0, 1.0, 1.0, 0.0).unwrap() - LN2_SQ).abs() < 1e-15);
        assert_eq!(fm_residual(0.0, 0.0, 0.0, 1e-6).unwrap(), 0.0);
        assert!(matches!(fm_residual(0.0, 0.0, 0.0, 0.0), Err(Error::NumericalDomain(_))));
    }

    #[test]
    fn db_raw_examples() {
        assert_eq!(db_residual(0.3, 0.3, 0.0).unwrap(), 0.0);
        assert!((db_residual(0.6, 0.3, 0.0).unwrap() - LN2_SQ).abs() < 1e-15);
        assert!((db_residual(0.2, 0.1, 0.0).unwrap() - LN2_SQ).abs() < 1e-15);
        assert!(db_residual(0.0, 0.3, 0.0).is_err());
    }

    #[test]
    fn db_terminal_edge_from_params() {
        // F(s) P_F(stop | s) = 0.2 against R(s) = 0.1
        let env = grid(2, 2);
        let mut p = FlowParams::zeros(&env);
        let s = env.index(&[1, 1]).unwrap();
        p.set_log_state_flow(s, 0.2f64.ln());
        let l = db_loss(&p, &env, s, 0, 0.0).unwrap();
        assert!((l - LN2_SQ).abs() < 1e-14);
    }

    #[test]
    fn tb_hand_example() {
        let env = grid(2, 2);
        let p = FlowParams::zeros(&env);
        let t = Trajectory::from_states(&env, &[0, 2]).unwrap();
        let expected = (5.0f64 / 3.0).ln().powi(2);
        assert!((tb_loss(&p, &env, &t).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.2609).abs() < 1e-4);
    }

    #[test]
    fn suffix_hand_example() {
        let env = grid(2, 2);
        let p = FlowParams::zeros(&env);
        let t = Trajectory::from_states(&env, &[0, 2, 3]).unwrap();
        let l = subgfn_suffix_loss(&p, &env, &t, SubRoot { state: 2, position: 1 }).unwrap();
        assert!((l - 10f64.ln().powi(2)).abs() < 1e-13);
        let whole = subgfn_suffix_loss(&p, &env, &t, SubRoot { state: 0, position: 0 }).unwrap();
        assert_eq!(whole, tb_loss(&p, &env, &t).unwrap());
        assert!(subgfn_suffix_loss(&p, &env, &t, SubRoot { state: 3, position: 1 }).is_err());
    }

    #[test]
    fn subroots() {
        let env = grid(2, 2);
        let t = Trajectory::from_states(&env, &[0, 2, 3]).unwrap();
        let roots: Vec<_> = extract_subroots(&env, &t).iter().map(|r| r.state).collect();
        assert_eq!(roots, vec![0, 2]);
        let t = Trajectory::from_states(&env, &[0]).unwrap();
        assert_eq!(extract_subroots(&env, &t), vec![SubRoot { state: 0, position: 0 }]);

        let env = grid(2, 8);
        let path: Vec<usize> = (0..8).map(|i| env.index(&[i, 0]).unwrap())
            .chain((1..8).map(|j| env.index(&[7, j]).unwrap()))
            .collect();
        let t = Trajectory::from_states(&env, &path).unwrap();
        let roots = extract_subroots(&env, &t);
        assert_eq!(roots.len(), path.len() - 1);
        assert!(roots.iter().all(|r| r.state != env.far_corner()));
    }

    #[test]
    fn subtb_reductions() {
        let env = grid(2, 2);
        let p = FlowParams::new(&env, InitScheme::Uniform { scale: 0.7, seed: 3 }, BackwardMode::Uniform);
        let single = Trajectory::from_states(&env, &[0]).unwrap();
        assert!((subtb_loss(&p, &env, &single, 1.0).unwrap() - tb_loss(&p, &env, &single).unwrap()).abs() < 1e-15);

        // small λ: single-edge terms dominate, giving the mean DB residual
        let t = Trajectory::from_states(&env, &[0, 2, 3]).unwrap();
        let slots = t.slots(&env);
        let db_mean: f64 = t
            .states
            .iter()
            .zip(&slots)
            .map(|(&s, &k)| db_loss(&p, &env, s, k, 0.0).unwrap())
            .sum::<f64>()
            / 3.0;
        let approx = subtb_loss(&p, &env, &t, 1e-9).unwrap();
        assert!((approx - db_mean).abs() < 1e-7, "{approx} vs {db_mean}");
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn weights_examples() {
        let w = entropy_weights(&[0.5, 0.5, 0.5], 1e-8);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(entropy_weights(&[0.0, 0.0], 1e-8), vec![0.5, 0.5]);
        let (e1, l1, e2, l2) = (1.3297, 0.2609, 0.6931, 5.3019);
        let w = entropy_weights(&[e1, e2], 1e-8);
        let combined = w[0] * l1 + w[1] * l2;
        // Exact combination of the rounded inputs is 1.98817.
        assert!((combined - 1.98817).abs() < 1e-5, "{combined}");
    }

    #[test]
    fn batch_requires_cache_and_nonempty() {
        let env = grid(2, 2);
        let p = FlowParams::zeros(&env);
        let t = Trajectory::from_states(&env, &[0]).unwrap();
        let spec = LossSpec::new(LossKind::SubGFlowNet);
        assert!(batch_loss(&p, &env, std::slice::from_ref(&t), &spec, None).is_err());
        let empty = EntropyCache::new(&env, 0);
        assert!(batch_loss(&p, &env, &[t], &spec, Some(&empty)).is_err());
        assert!(batch_loss(&p, &env, &[], &LossSpec::new(LossKind::TrajectoryBalance), None).is_err());
    }

    #[test]
    fn fm_batch_is_mean_over_distinct_states() {
        let env = grid(2, 2);
        let p = FlowParams::new(&env, InitScheme::Uniform { scale: 1.0, seed: 5 }, BackwardMode::Uniform);
        let batch = vec![
            Trajectory::from_states(&env, &[0, 1, 3]).unwrap(),
            Trajectory::from_states(&env, &[0, 2]).unwrap(),
            Trajectory::from_states(&env, &[0, 2, 3]).unwrap(),
        ];
        let spec = LossSpec {
            fm_reward_edge: false,
            ..LossSpec::new(LossKind::FlowMatching)
        };
        let direct: f64 = (0..4).map(|s| fm_loss(&p, &env, s, spec.delta).unwrap()).sum::<f64>() / 4.0;
        let batched = batch_loss(&p, &env, &batch, &spec, None).unwrap();
        assert!((direct - batched).abs() < 1e-15);

        let spec = LossSpec::new(LossKind::FlowMatching);
        let stop: f64 = (0..4)
            .map(|s| db_loss(&p, &env, s, env.terminate_slot(s), spec.delta).unwrap())
            .sum::<f64>()
            / 4.0;
        let batched = batch_loss(&p, &env, &batch, &spec, None).unwrap();
        assert!((direct + stop - batched).abs() < 1e-14);
    }

    #[test]
    fn optimum_zeroes_every_loss() {
        for h in [2, 3, 4] {
            let env = grid(2, h);
            let template = FlowParams::zeros(&env);
            let table = brute_force_flows(&env, &template, DEFAULT_TRAJECTORY_BUDGET).unwrap();
            let p = table.to_params(&env, &template);
            let batch = crate::exact::enumerate_trajectories(&env, 0, 1000).unwrap();
            let mut cache = EntropyCache::new(&env, 0);
            let spec = LossSpec::new(LossKind::SubGFlowNet);
            cache.refresh(&p, &env, &batch, &spec, 0).unwrap();
            for kind in LossKind::ALL {
                let spec = LossSpec { kind, ..spec };
                let l = batch_loss(&p, &env, &batch, &spec, Some(&cache)).unwrap();
                assert!(l < 1e-9, "{kind} at H={h}: {l}");
            }
            let doubled = {
                let mut q = p.clone();
                q.set_log_z(q.log_z() + 2f64.ln());
                q
            };
            let t = &batch[0];
            assert!((tb_loss(&doubled, &env, t).unwrap() - LN2_SQ).abs() < 1e-12);
        }
    }
}
