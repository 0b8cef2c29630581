//! Tabular flow parameterization and on-policy sampling.
//!
//! All parameters live in one flat vector:
//!
//! ```text
//! [ log_Z | forward logits (CSR by state) | log state flows | backward logits (learned mode only) ]
//! ```
//!
//! The flat layout is what the optimizer and the finite-difference checker
//! iterate over; the typed accessors below are views into it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{DagEnv, StateIdx, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Uniform,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitScheme {
    /// Every parameter zero: uniform forward policy, unit flows, `Z = 1`.
    #[default]
    Zeros,
    /// Independent draws from `U(-scale, scale)`.
    Uniform { scale: f64, seed: u64 },
}

/// Identifies one scalar in [`FlowParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    LogZ,
    ForwardLogit { state: StateIdx, slot: usize },
    LogStateFlow(StateIdx),
    BackwardLogit { state: StateIdx, slot: usize },
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::LogZ => write!(f, "log_z"),
            ParamId::ForwardLogit { state, slot } => write!(f, "forward_logit[{state}][{slot}]"),
            ParamId::LogStateFlow(s) => write!(f, "log_state_flow[{s}]"),
            ParamId::BackwardLogit { state, slot } => write!(f, "backward_logit[{state}][{slot}]"),
        }
    }
}

/// Which optimizer group a flat parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Policy,
    Flow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    values: Vec<f64>,
    child_offsets: Vec<usize>,
    parent_offsets: Vec<usize>,
    backward_mode: BackwardMode,
    source: StateIdx,
}

impl FlowParams {
    pub fn new<E: DagEnv + ?Sized>(env: &E, scheme: InitScheme, backward_mode: BackwardMode) -> Self {
        let n = env.num_states();
        let mut child_offsets = Vec::with_capacity(n + 1);
        let mut parent_offsets = Vec::with_capacity(n + 1);
        let (mut c, mut p) = (0, 0);
        for s in 0..n {
            child_offsets.push(c);
            parent_offsets.push(p);
            c += env.num_children(s);
            p += env.num_parents(s);
        }
        child_offsets.push(c);
        parent_offsets.push(p);
        let backward_len = match backward_mode {
            BackwardMode::Uniform => 0,
            BackwardMode::Learned => p,
        };
        let len = 1 + c + n + backward_len;
        let values = match scheme {
            InitScheme::Zeros => vec![0.0; len],
            InitScheme::Uniform { scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
            }
        };
        Self {
            values,
            child_offsets,
            parent_offsets,
            backward_mode,
            source: env.source(),
        }
    }

    pub fn zeros<E: DagEnv + ?Sized>(env: &E) -> Self {
        Self::new(env, InitScheme::Zeros, BackwardMode::Uniform)
    }

    pub fn num_states(&self) -> usize {
        self.child_offsets.len() - 1
    }

    pub fn backward_mode(&self) -> BackwardMode {
        self.backward_mode
    }

    fn forward_base(&self) -> usize {
        1
    }

    fn flow_base(&self) -> usize {
        1 + self.child_offsets[self.num_states()]
    }

    fn backward_base(&self) -> usize {
        self.flow_base() + self.num_states()
    }

    pub fn log_z(&self) -> f64 {
        self.values[0]
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.values[0] = v;
    }

    pub fn forward_logits(&self, s: StateIdx) -> &[f64] {
        let b = self.forward_base();
        &self.values[b + self.child_offsets[s]..b + self.child_offsets[s + 1]]
    }

    pub fn forward_logits_mut(&mut self, s: StateIdx) -> &mut [f64] {
        let b = self.forward_base();
        let (lo, hi) = (self.child_offsets[s], self.child_offsets[s + 1]);
        &mut self.values[b + lo..b + hi]
    }

    /// Raw `log_state_flow` entry. Use [`FlowParams::state_log_flow`] for `log F(s)`.
    pub fn log_state_flow(&self, s: StateIdx) -> f64 {
        self.values[self.flow_base() + s]
    }

    pub fn set_log_state_flow(&mut self, s: StateIdx, v: f64) {
        let b = self.flow_base();
        self.values[b + s] = v;
    }

    pub fn backward_logits(&self, s: StateIdx) -> Option<&[f64]> {
        match self.backward_mode {
            BackwardMode::Uniform => None,
            BackwardMode::Learned => {
                let b = self.backward_base();
                Some(&self.values[b + self.parent_offsets[s]..b + self.parent_offsets[s + 1]])
            }
        }
    }

    pub fn backward_logits_mut(&mut self, s: StateIdx) -> Option<&mut [f64]> {
        match self.backward_mode {
            BackwardMode::Uniform => None,
            BackwardMode::Learned => {
                let b = self.backward_base();
                let (lo, hi) = (self.parent_offsets[s], self.parent_offsets[s + 1]);
                Some(&mut self.values[b + lo..b + hi])
            }
        }
    }

    /// `log F(s)`. The source's flow is `log_Z`; its `log_state_flow` entry is unused.
    pub fn state_log_flow(&self, s: StateIdx) -> f64 {
        if s == self.source {
            self.log_z()
        } else {
            self.log_state_flow(s)
        }
    }

    pub fn forward_log_probs(&self, s: StateIdx) -> Vec<f64> {
        log_softmax(self.forward_logits(s))
    }

    pub fn forward_policy(&self, s: StateIdx) -> Vec<f64> {
        softmax(self.forward_logits(s))
    }

    /// `log P_F(child slot | s)`.
    pub fn log_pf(&self, s: StateIdx, slot: usize) -> f64 {
        let logits = self.forward_logits(s);
        logits[slot] - log_sum_exp(logits)
    }

    pub fn backward_log_probs<E: DagEnv + ?Sized>(&self, env: &E, s: StateIdx) -> Result<Vec<f64>> {
        let n = env.num_parents(s);
        if n == 0 {
            return Err(Error::Contract(format!("state {s} has no parents")));
        }
        Ok(match self.backward_logits(s) {
            None => vec![-(n as f64).ln(); n],
            Some(logits) => log_softmax(logits),
        })
    }

    pub fn backward_policy<E: DagEnv + ?Sized>(&self, env: &E, s: StateIdx) -> Result<Vec<f64>> {
        Ok(self
            .backward_log_probs(env, s)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// `log P_B(parent slot | s)`.
    pub fn log_pb<E: DagEnv + ?Sized>(&self, env: &E, s: StateIdx, slot: usize) -> f64 {
        match self.backward_logits(s) {
            None => -(env.num_parents(s) as f64).ln(),
            Some(logits) => logits[slot] - log_sum_exp(logits),
        }
    }

    // Flat view.

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn flat_index(&self, id: ParamId) -> usize {
        match id {
            ParamId::LogZ => 0,
            ParamId::ForwardLogit { state, slot } => self.forward_base() + self.child_offsets[state] + slot,
            ParamId::LogStateFlow(s) => self.flow_base() + s,
            ParamId::BackwardLogit { state, slot } => {
                self.backward_base() + self.parent_offsets[state] + slot
            }
        }
    }

    pub fn param_id(&self, i: usize) -> ParamId {
        if i == 0 {
            return ParamId::LogZ;
        }
        let locate = |offsets: &[usize], rel: usize| {
            let state = offsets.partition_point(|&o| o <= rel) - 1;
            (state, rel - offsets[state])
        };
        if i < self.flow_base() {
            let (state, slot) = locate(&self.child_offsets, i - self.forward_base());
            ParamId::ForwardLogit { state, slot }
        } else if i < self.backward_base() {
            ParamId::LogStateFlow(i - self.flow_base())
        } else {
            let (state, slot) = locate(&self.parent_offsets, i - self.backward_base());
            ParamId::BackwardLogit { state, slot }
        }
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        if i == 0 || (i >= self.flow_base() && i < self.backward_base()) {
            ParamGroup::Flow
        } else {
            ParamGroup::Policy
        }
    }

    /// Flat index of the unused `log_state_flow[source]` entry.
    pub fn tied_source_index(&self) -> usize {
        self.flow_base() + self.source
    }

    pub(crate) fn child_range(&self, s: StateIdx) -> std::ops::Range<usize> {
        let b = self.forward_base();
        b + self.child_offsets[s]..b + self.child_offsets[s + 1]
    }

    pub(crate) fn parent_range(&self, s: StateIdx) -> Option<std::ops::Range<usize>> {
        match self.backward_mode {
            BackwardMode::Uniform => None,
            BackwardMode::Learned => {
                let b = self.backward_base();
                Some(b + self.parent_offsets[s]..b + self.parent_offsets[s + 1])
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                param: self.param_id(i).to_string(),
                value: self.values[i],
            }),
        }
    }

    /// Whether `other` was built for the same state space and mode.
    pub fn same_layout(&self, other: &FlowParams) -> bool {
        self.child_offsets == other.child_offsets
            && self.parent_offsets == other.parent_offsets
            && self.backward_mode == other.backward_mode
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    /// Weight of the uniform-over-children component mixed into the policy.
    pub epsilon: f64,
    pub seed: u64,
}

impl SampleConfig {
    pub fn new(epsilon: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        Ok(Self { epsilon, seed })
    }

    /// Generator for the `stream`-th trajectory of this run.
    ///
    /// ChaCha is counter based, so every stream is independent and
    /// reproducible regardless of how streams are scheduled.
    pub fn stream_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { epsilon: 0.0, seed: 0 }
    }
}

fn pick_slot<R: Rng + ?Sized>(probs: &[f64], epsilon: f64, rng: &mut R) -> usize {
    let n = probs.len();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += (1.0 - epsilon) * p + epsilon / n as f64;
        if u < acc {
            return k;
        }
    }
    n - 1
}

/// Draws one complete trajectory from the source.
///
/// Actions come from `(1 - eps) * P_F + eps * uniform`; the cached
/// log-probabilities are the model's own, unmixed values.
pub fn sample_trajectory<E: DagEnv + ?Sized, R: Rng + ?Sized>(
    params: &FlowParams,
    env: &E,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let limit = env.max_trajectory_len();
    let mut s = env.source();
    let mut traj = Trajectory {
        states: vec![s],
        actions: Vec::new(),
        log_pf: Vec::new(),
        log_pb: Vec::new(),
    };
    loop {
        if traj.actions.len() >= limit {
            return Err(Error::Internal(format!(
                "trajectory exceeded {limit} actions without terminating"
            )));
        }
        let log_probs = params.forward_log_probs(s);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let slot = pick_slot(&probs, cfg.epsilon, rng);
        traj.actions.push(env.action(s, slot));
        traj.log_pf.push(log_probs[slot]);
        match env.child(s, slot) {
            None => return Ok(traj),
            Some(next) => {
                let back = env
                    .parent_slot(next, s)
                    .ok_or_else(|| Error::Internal(format!("edge {s}->{next} has no reverse")))?;
                traj.log_pb.push(params.log_pb(env, next, back));
                traj.states.push(next);
                s = next;
            }
        }
    }
}

/// Samples `count` trajectories on streams `first_stream..first_stream + count`.
pub fn sample_batch<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    cfg: &SampleConfig,
    first_stream: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count as u64)
        .map(|i| sample_trajectory(params, env, cfg, &mut cfg.stream_rng(first_stream + i)))
        .collect()
}

/// Rolls the forward policy out from `start` and returns the terminating state.
pub fn rollout_terminal<E: DagEnv + ?Sized, R: Rng + ?Sized>(
    params: &FlowParams,
    env: &E,
    start: StateIdx,
    rng: &mut R,
) -> Result<StateIdx> {
    let mut s = start;
    for _ in 0..env.max_trajectory_len() {
        let slot = pick_slot(&params.forward_policy(s), 0.0, rng);
        match env.child(s, slot) {
            None => return Ok(s),
            Some(next) => s = next,
        }
    }
    Err(Error::Internal(format!("rollout from {start} did not terminate")))
}

/// Fills a trajectory's cached log-probabilities from `params`.
pub fn score_trajectory<E: DagEnv + ?Sized>(params: &FlowParams, env: &E, traj: &mut Trajectory) {
    let slots = traj.slots(env);
    traj.log_pf = traj
        .states
        .iter()
        .zip(&slots)
        .map(|(&s, &k)| params.log_pf(s, k))
        .collect();
    traj.log_pb = traj
        .states
        .windows(2)
        .map(|w| {
            let back = env.parent_slot(w[1], w[0]).expect("trajectory edge has no reverse");
            params.log_pb(env, w[1], back)
        })
        .collect();
}
