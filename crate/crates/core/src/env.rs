//! Finite DAG environments and the hypergrid benchmark.
//!
//! States are addressed by dense ordinals. Every environment numbers its
//! states topologically: a parent always has a smaller ordinal than any of
//! its children, so a single pass in ordinal order is a valid DP sweep.
//!
//! Each state's outgoing edges are addressed by a *child slot*. The
//! terminate edge (to the implicit sink) is always the last slot, so the
//! terminating state and its sink share one ordinal.

use crate::error::{Error, Result};

/// Ordinal of a state in an environment's index space.
pub type StateIdx = usize;

/// Largest state space the enumeration-based modules accept.
pub const DEFAULT_STATE_CAP: usize = 1 << 24;

/// An action taken from a state.
///
/// For the hypergrid, `Increment(d)` adds one to coordinate `d`. Other
/// environments label their non-terminal actions with an env-defined integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionId {
    Increment(usize),
    Terminate,
}

/// Contract for a finite, deterministic DAG environment.
pub trait DagEnv {
    fn num_states(&self) -> usize;

    fn source(&self) -> StateIdx;

    /// Number of outgoing edges, including the terminate edge.
    fn num_children(&self, s: StateIdx) -> usize;

    /// Successor through `slot`; `None` for the terminate slot.
    fn child(&self, s: StateIdx, slot: usize) -> Option<StateIdx>;

    fn num_parents(&self, s: StateIdx) -> usize;

    fn parent(&self, s: StateIdx, slot: usize) -> StateIdx;

    fn reward(&self, s: StateIdx) -> f64;

    /// Action label of an outgoing slot.
    fn action(&self, s: StateIdx, slot: usize) -> ActionId;

    /// Inverse of [`DagEnv::action`]; `None` when the action is illegal at `s`.
    fn slot_of(&self, s: StateIdx, action: ActionId) -> Option<usize>;

    /// Upper bound on the number of actions in a complete trajectory.
    fn max_trajectory_len(&self) -> usize;

    /// Reward at or above which a terminating state counts as a mode.
    fn mode_threshold(&self) -> Option<f64> {
        None
    }

    fn terminate_slot(&self, s: StateIdx) -> usize {
        self.num_children(s) - 1
    }

    /// Slot of the edge `s -> child` among the children of `s`.
    fn child_slot(&self, s: StateIdx, child: StateIdx) -> Option<usize> {
        (0..self.num_children(s)).find(|&k| self.child(s, k) == Some(child))
    }

    /// Slot of `parent` among the parents of `s`.
    fn parent_slot(&self, s: StateIdx, parent: StateIdx) -> Option<usize> {
        (0..self.num_parents(s)).find(|&k| self.parent(s, k) == parent)
    }

    fn successor(&self, s: StateIdx, action: ActionId) -> Option<Option<StateIdx>> {
        self.slot_of(s, action).map(|k| self.child(s, k))
    }

    fn children(&self, s: StateIdx) -> Vec<(ActionId, Option<StateIdx>)> {
        (0..self.num_children(s))
            .map(|k| (self.action(s, k), self.child(s, k)))
            .collect()
    }

    fn parents(&self, s: StateIdx) -> Vec<(StateIdx, ActionId)> {
        (0..self.num_parents(s))
            .map(|k| {
                let p = self.parent(s, k);
                let slot = self.child_slot(p, s).expect("parent/child tables disagree");
                (p, self.action(p, slot))
            })
            .collect()
    }

    /// A state roots a sub-network when it has at least two outgoing edges.
    fn is_branching(&self, s: StateIdx) -> bool {
        self.num_children(s) >= 2
    }

    fn is_valid(&self, s: StateIdx) -> bool {
        s < self.num_states()
    }
}

/// Whether the reward bands exclude or include their lower edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntervalClosure {
    /// `(a, b)`: both ends excluded.
    #[default]
    Open,
    /// `[a, b)`: lower end included, as in the original hypergrid code.
    HalfOpen,
}

impl IntervalClosure {
    pub fn as_str(self) -> &'static str {
        match self {
            IntervalClosure::Open => "open",
            IntervalClosure::HalfOpen => "half-open",
        }
    }

    fn contains(self, x: f64, lo: f64, hi: f64) -> bool {
        match self {
            IntervalClosure::Open => x > lo && x < hi,
            IntervalClosure::HalfOpen => x >= lo && x < hi,
        }
    }
}

impl std::str::FromStr for IntervalClosure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(IntervalClosure::Open),
            "half-open" | "halfopen" => Ok(IntervalClosure::HalfOpen),
            other => Err(Error::Config(format!("unknown interval closure `{other}`"))),
        }
    }
}

/// D-dimensional grid of side H. Actions increment one coordinate or stop.
///
/// The ordinal of a state is `sum_d s[d] * H^d`, so decrementing any
/// coordinate lowers the ordinal and ordinal order is topological.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergrid {
    dim: usize,
    horizon: usize,
    r0: f64,
    closure: IntervalClosure,
    num_states: usize,
    strides: Vec<usize>,
}

impl Hypergrid {
    pub fn new(dim: usize, horizon: usize, r0: f64) -> Result<Self> {
        Self::with_options(dim, horizon, r0, IntervalClosure::Open, DEFAULT_STATE_CAP)
    }

    pub fn with_options(
        dim: usize,
        horizon: usize,
        r0: f64,
        closure: IntervalClosure,
        state_cap: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if horizon < 2 {
            return Err(Error::Config(format!("horizon must be at least 2, got {horizon}")));
        }
        if !(r0 > 0.0) || !r0.is_finite() {
            return Err(Error::Config(format!("R0 must be positive and finite, got {r0}")));
        }
        let num_states = u32::try_from(dim)
            .ok()
            .and_then(|d| horizon.checked_pow(d))
            .filter(|&n| n <= state_cap)
            .ok_or(Error::Budget {
                what: "hypergrid states",
                limit: state_cap,
            })?;
        let strides = (0..dim).map(|d| horizon.pow(d as u32)).collect();
        Ok(Self {
            dim,
            horizon,
            r0,
            closure,
            num_states,
            strides,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn closure(&self) -> IntervalClosure {
        self.closure
    }

    pub fn index(&self, coords: &[usize]) -> Result<StateIdx> {
        if coords.len() != self.dim {
            return Err(Error::Contract(format!(
                "expected {} coordinates, got {}",
                self.dim,
                coords.len()
            )));
        }
        coords
            .iter()
            .zip(&self.strides)
            .try_fold(0, |acc, (&c, &stride)| {
                if c < self.horizon {
                    Ok(acc + c * stride)
                } else {
                    Err(Error::Contract(format!(
                        "coordinate {c} outside [0, {}]",
                        self.horizon - 1
                    )))
                }
            })
    }

    pub fn coords(&self, s: StateIdx) -> Vec<usize> {
        let mut rest = s;
        (0..self.dim)
            .map(|_| {
                let c = rest % self.horizon;
                rest /= self.horizon;
                c
            })
            .collect()
    }

    #[inline]
    fn coord(&self, s: StateIdx, d: usize) -> usize {
        (s / self.strides[d]) % self.horizon
    }

    /// All states sorted by coordinate sum (ties by ordinal).
    pub fn enumerate_states(&self) -> Vec<StateIdx> {
        let mut states: Vec<StateIdx> = (0..self.num_states).collect();
        states.sort_by_key(|&s| (self.coords(s).iter().sum::<usize>(), s));
        states
    }

    /// Reward of terminating at `s`: `R0 + 0.5 * outer + 2 * inner`, where the
    /// bands test `|s_d/(H-1) - 0.5|` against (0.25, 0.5) and (0.3, 0.4) in every
    /// dimension.
    pub fn reward_at(&self, coords: &[usize]) -> f64 {
        let scale = (self.horizon - 1) as f64;
        let dist = |c: usize| (c as f64 / scale - 0.5).abs();
        let outer = coords
            .iter()
            .all(|&c| self.closure.contains(dist(c), 0.25, 0.5));
        let inner = coords
            .iter()
            .all(|&c| self.closure.contains(dist(c), 0.3, 0.4));
        self.r0 + if outer { 0.5 } else { 0.0 } + if inner { 2.0 } else { 0.0 }
    }

    /// The corner state with every coordinate at H-1.
    pub fn far_corner(&self) -> StateIdx {
        self.num_states - 1
    }
}

impl DagEnv for Hypergrid {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn source(&self) -> StateIdx {
        0
    }

    fn num_children(&self, s: StateIdx) -> usize {
        1 + (0..self.dim)
            .filter(|&d| self.coord(s, d) + 1 < self.horizon)
            .count()
    }

    fn child(&self, s: StateIdx, slot: usize) -> Option<StateIdx> {
        (0..self.dim)
            .filter(|&d| self.coord(s, d) + 1 < self.horizon)
            .nth(slot)
            .map(|d| s + self.strides[d])
    }

    fn num_parents(&self, s: StateIdx) -> usize {
        (0..self.dim).filter(|&d| self.coord(s, d) > 0).count()
    }

    fn parent(&self, s: StateIdx, slot: usize) -> StateIdx {
        let d = (0..self.dim)
            .filter(|&d| self.coord(s, d) > 0)
            .nth(slot)
            .expect("parent slot out of range");
        s - self.strides[d]
    }

    fn reward(&self, s: StateIdx) -> f64 {
        self.reward_at(&self.coords(s))
    }

    fn action(&self, s: StateIdx, slot: usize) -> ActionId {
        match (0..self.dim)
            .filter(|&d| self.coord(s, d) + 1 < self.horizon)
            .nth(slot)
        {
            Some(d) => ActionId::Increment(d),
            None => ActionId::Terminate,
        }
    }

    fn slot_of(&self, s: StateIdx, action: ActionId) -> Option<usize> {
        match action {
            ActionId::Terminate => Some(self.terminate_slot(s)),
            ActionId::Increment(d) if d < self.dim && self.coord(s, d) + 1 < self.horizon => {
                Some((0..d).filter(|&e| self.coord(s, e) + 1 < self.horizon).count())
            }
            ActionId::Increment(_) => None,
        }
    }

    fn max_trajectory_len(&self) -> usize {
        self.dim * (self.horizon - 1) + 1
    }

    fn mode_threshold(&self) -> Option<f64> {
        Some(2.0 + self.r0)
    }

    fn child_slot(&self, s: StateIdx, child: StateIdx) -> Option<usize> {
        let diff = child.checked_sub(s)?;
        let d = self.strides.iter().position(|&st| st == diff)?;
        self.slot_of(s, ActionId::Increment(d))
    }

    fn parent_slot(&self, s: StateIdx, parent: StateIdx) -> Option<usize> {
        let diff = s.checked_sub(parent)?;
        let d = self.strides.iter().position(|&st| st == diff)?;
        if self.coord(s, d) == 0 {
            return None;
        }
        Some((0..d).filter(|&e| self.coord(s, e) > 0).count())
    }
}

/// A complete source-to-sink trajectory.
///
/// `states` holds `s_0..s_n`; `actions` holds the `n + 1` actions, the last
/// being [`ActionId::Terminate`]. Sampled trajectories carry the model's
/// log-probabilities per transition; enumerated ones leave them empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateIdx>,
    pub actions: Vec<ActionId>,
    /// `log P_F` for each of the `n + 1` actions (terminate included).
    pub log_pf: Vec<f64>,
    /// `log P_B(s_{t-1} | s_t)` for `t = 1..=n`.
    pub log_pb: Vec<f64>,
}

impl Trajectory {
    /// Builds a trajectory from a state path, inferring the actions and
    /// appending the terminate action.
    pub fn from_states<E: DagEnv + ?Sized>(env: &E, states: &[StateIdx]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Contract("empty state path".into()));
        }
        let mut actions = Vec::with_capacity(states.len());
        for (t, pair) in states.windows(2).enumerate() {
            let slot = env.child_slot(pair[0], pair[1]).ok_or_else(|| {
                Error::Contract(format!("no edge from position {t} to {}", t + 1))
            })?;
            actions.push(env.action(pair[0], slot));
        }
        actions.push(ActionId::Terminate);
        Ok(Self {
            states: states.to_vec(),
            actions,
            log_pf: Vec::new(),
            log_pb: Vec::new(),
        })
    }

    /// Number of non-terminal transitions.
    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn terminal(&self) -> StateIdx {
        *self.states.last().expect("trajectory has at least one state")
    }

    /// Child slot taken at each position, terminate included.
    pub fn slots<E: DagEnv + ?Sized>(&self, env: &E) -> Vec<usize> {
        self.states
            .iter()
            .zip(&self.actions)
            .map(|(&s, &a)| env.slot_of(s, a).expect("trajectory action illegal"))
            .collect()
    }
}

/// First rule a trajectory breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    InvalidState { position: usize },
    BadStart { found: StateIdx },
    IllegalStep { position: usize },
    EarlyTerminate { position: usize },
    MissingTerminate,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Empty => write!(f, "trajectory has no states"),
            Violation::InvalidState { position } => {
                write!(f, "state at position {position} is outside the environment")
            }
            Violation::BadStart { found } => {
                write!(f, "trajectory starts at state {found}, not the source")
            }
            Violation::IllegalStep { position } => {
                write!(f, "illegal transition out of position {position}")
            }
            Violation::EarlyTerminate { position } => {
                write!(f, "terminate action at position {position} before the end")
            }
            Violation::MissingTerminate => write!(f, "trajectory does not end with terminate"),
        }
    }
}

pub fn validate_trajectory<E: DagEnv + ?Sized>(
    env: &E,
    traj: &Trajectory,
) -> std::result::Result<(), Violation> {
    let first = *traj.states.first().ok_or(Violation::Empty)?;
    if let Some(position) = traj.states.iter().position(|&s| !env.is_valid(s)) {
        return Err(Violation::InvalidState { position });
    }
    if first != env.source() {
        return Err(Violation::BadStart { found: first });
    }
    let n = traj.states.len() - 1;
    for t in 0..n {
        match traj.actions.get(t) {
            None => return Err(Violation::MissingTerminate),
            Some(ActionId::Terminate) => return Err(Violation::EarlyTerminate { position: t }),
            Some(&a) => {
                if env.successor(traj.states[t], a) != Some(Some(traj.states[t + 1])) {
                    return Err(Violation::IllegalStep { position: t });
                }
            }
        }
    }
    match traj.actions.get(n) {
        Some(ActionId::Terminate) if traj.actions.len() == n + 1 => Ok(()),
        Some(ActionId::Terminate) => Err(Violation::EarlyTerminate { position: n }),
        _ => Err(Violation::MissingTerminate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(d: usize, h: usize) -> Hypergrid {
        Hypergrid::new(d, h, 0.1).unwrap()
    }

    #[test]
    fn construction() {
        assert_eq!(grid(2, 8).num_states(), 64);
        assert_eq!(grid(4, 32).num_states(), 1_048_576);
        assert!(matches!(Hypergrid::new(0, 8, 0.1), Err(Error::Config(_))));
        assert!(matches!(Hypergrid::new(2, 1, 0.1), Err(Error::Config(_))));
        assert!(matches!(Hypergrid::new(2, 8, 0.0), Err(Error::Config(_))));
        assert!(matches!(Hypergrid::new(2, 8, -1.0), Err(Error::Config(_))));
        assert!(matches!(Hypergrid::new(9, 32, 0.1), Err(Error::Budget { .. })));
    }

    #[test]
    fn children_enumeration() {
        let env = grid(2, 2);
        let ix = |c: &[usize]| env.index(c).unwrap();
        assert_eq!(
            env.children(ix(&[0, 0])),
            vec![
                (ActionId::Increment(0), Some(ix(&[1, 0]))),
                (ActionId::Increment(1), Some(ix(&[0, 1]))),
                (ActionId::Terminate, None),
            ]
        );
        assert_eq!(env.children(ix(&[1, 1])), vec![(ActionId::Terminate, None)]);
        assert_eq!(
            env.children(ix(&[0, 1])),
            vec![(ActionId::Increment(0), Some(ix(&[1, 1]))), (ActionId::Terminate, None)]
        );
    }

    #[test]
    fn parents_enumeration() {
        let env = grid(2, 2);
        let ix = |c: &[usize]| env.index(c).unwrap();
        let parents: Vec<_> = env.parents(ix(&[1, 1])).into_iter().map(|p| p.0).collect();
        assert_eq!(parents, vec![ix(&[0, 1]), ix(&[1, 0])]);
        assert!(env.parents(ix(&[0, 0])).is_empty());

        let env = grid(3, 8);
        let ix = |c: &[usize]| env.index(c).unwrap();
        let parents: Vec<_> = env.parents(ix(&[1, 0, 2])).into_iter().map(|p| p.0).collect();
        assert_eq!(parents, vec![ix(&[0, 0, 2]), ix(&[1, 0, 1])]);
    }

    #[test]
    fn reward_examples() {
        let env = grid(2, 8);
        assert!((env.reward_at(&[1, 1]) - 2.6).abs() < 1e-12);
        assert!((env.reward_at(&[0, 0]) - 0.1).abs() < 1e-12);
        assert!((env.reward_at(&[3, 4]) - 0.1).abs() < 1e-12);
        let peaks: Vec<_> = (0..64).filter(|&s| env.reward(s) > 2.0).map(|s| env.coords(s)).collect();
        assert_eq!(peaks, vec![vec![1, 1], vec![6, 1], vec![1, 6], vec![6, 6]]);
    }

    #[test]
    fn half_open_bands_score_the_corner_plateau() {
        // H=9, c=2 sits exactly on the 0.25 edge.
        let open = Hypergrid::with_options(1, 9, 0.1, IntervalClosure::Open, DEFAULT_STATE_CAP).unwrap();
        let half = Hypergrid::with_options(1, 9, 0.1, IntervalClosure::HalfOpen, DEFAULT_STATE_CAP).unwrap();
        assert!((open.reward_at(&[2]) - 0.1).abs() < 1e-12);
        assert!((half.reward_at(&[2]) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn index_bijection() {
        let env = grid(2, 2);
        assert_eq!(env.index(&[0, 0]).unwrap(), 0);
        assert_eq!(env.index(&[1, 0]).unwrap(), 1);
        assert_eq!(env.index(&[0, 1]).unwrap(), 2);
        assert_eq!(env.index(&[1, 1]).unwrap(), 3);
        assert_eq!(grid(2, 8).index(&[7, 7]).unwrap(), 63);
        assert!(env.index(&[2, 0]).is_err());
        assert!(env.index(&[0]).is_err());

        let order = env.enumerate_states();
        let pos = |s| order.iter().position(|&x| x == s).unwrap();
        assert!(pos(3) > pos(1) && pos(3) > pos(2));
    }

    #[test]
    fn branching() {
        let env = grid(2, 2);
        assert!(!env.is_branching(3));
        assert!(env.is_branching(0));
        assert!(env.is_branching(2));
    }

    #[test]
    fn validation() {
        let env = grid(2, 2);
        let ix = |c: &[usize]| env.index(c).unwrap();
        let ok = Trajectory::from_states(&env, &[ix(&[0, 0]), ix(&[0, 1])]).unwrap();
        assert_eq!(validate_trajectory(&env, &ok), Ok(()));

        let bad_start = Trajectory::from_states(&env, &[ix(&[0, 1]), ix(&[1, 1])]).unwrap();
        assert_eq!(
            validate_trajectory(&env, &bad_start),
            Err(Violation::BadStart { found: ix(&[0, 1]) })
        );

        let jump = Trajectory {
            states: vec![ix(&[0, 0]), ix(&[1, 1])],
            actions: vec![ActionId::Increment(0), ActionId::Terminate],
            log_pf: vec![],
            log_pb: vec![],
        };
        assert_eq!(validate_trajectory(&env, &jump), Err(Violation::IllegalStep { position: 0 }));

        let early = Trajectory {
            states: vec![ix(&[0, 0]), ix(&[1, 0])],
            actions: vec![ActionId::Terminate, ActionId::Terminate],
            log_pf: vec![],
            log_pb: vec![],
        };
        assert_eq!(validate_trajectory(&env, &early), Err(Violation::EarlyTerminate { position: 0 }));

        let unfinished = Trajectory {
            states: vec![ix(&[0, 0]), ix(&[1, 0])],
            actions: vec![ActionId::Increment(0)],
            log_pf: vec![],
            log_pb: vec![],
        };
        assert_eq!(validate_trajectory(&env, &unfinished), Err(Violation::MissingTerminate));
    }

    proptest! {
        #[test]
        fn structure_invariants(d in 1usize..4, h in 2usize..6, seed in any::<u64>()) {
            let env = grid(d, h);
            let s = (seed as usize) % env.num_states();
            let coords = env.coords(s);
            prop_assert_eq!(env.index(&coords).unwrap(), s);
            prop_assert!(coords.iter().all(|&c| c < h));
            prop_assert_eq!(env.num_parents(s), coords.iter().filter(|&&c| c > 0).count());
            prop_assert_eq!(env.num_children(s), 1 + coords.iter().filter(|&&c| c < h - 1).count());
            for k in 0..env.num_children(s) {
                if let Some(c) = env.child(s, k) {
                    prop_assert!(c > s);
                    prop_assert!(env.parents(c).iter().any(|p| p.0 == s));
                    prop_assert_eq!(env.child_slot(s, c), Some(k));
                    prop_assert_eq!(env.slot_of(s, env.action(s, k)), Some(k));
                }
            }
            for k in 0..env.num_parents(s) {
                let p = env.parent(s, k);
                prop_assert!(p < s);
                prop_assert!(env.child_slot(p, s).is_some());
                prop_assert_eq!(env.parent_slot(s, p), Some(k));
            }
            let r = env.reward(s);
            prop_assert!([0.1, 0.6, 2.6].iter().any(|v| (r - v).abs() < 1e-12));
        }
    }
}
