//! Exact evaluation over enumerable environments.
//!
//! Two independent routes to the same quantities:
//!
//! * dynamic programming over the DAG in topological (ordinal) order, and
//! * brute-force enumeration of every complete trajectory.
//!
//! The second exists to check the first on small grids.

use std::collections::BTreeMap;

use crate::env::{DagEnv, StateIdx, Trajectory, DEFAULT_STATE_CAP};
use crate::error::{Error, Result};
use crate::model::FlowParams;

pub const DEFAULT_TRAJECTORY_BUDGET: usize = 1_000_000;

/// A probability distribution over terminating states, indexed by ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDistribution {
    probs: Vec<f64>,
}

impl TerminalDistribution {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, s: StateIdx) -> f64 {
        self.probs[s]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy_of(self.probs.iter().copied())
    }
}

pub(crate) fn entropy_of(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Terminating law of forward rollouts started at `root`, as sparse
/// `(state, probability)` pairs in ordinal order.
///
/// Descendants are visited in increasing ordinal order, which is topological,
/// so every state's reach probability is complete when it is popped.
pub fn terminating_distribution_sparse<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    root: StateIdx,
    budget: usize,
) -> Result<Vec<(StateIdx, f64)>> {
    let mut frontier = BTreeMap::new();
    frontier.insert(root, 1.0);
    let mut out = Vec::new();
    while let Some((s, reach)) = frontier.pop_first() {
        if out.len() >= budget {
            return Err(Error::Budget {
                what: "descendant states",
                limit: budget,
            });
        }
        let probs = params.forward_policy(s);
        let term = env.terminate_slot(s);
        for (k, p) in probs.iter().enumerate().take(term) {
            let c = env.child(s, k).expect("non-terminal slot has a child");
            *frontier.entry(c).or_insert(0.0) += reach * p;
        }
        out.push((s, reach * probs[term]));
    }
    Ok(out)
}

/// Terminating distribution of rollouts from `root` over the full index space.
pub fn terminating_distribution<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    root: StateIdx,
) -> Result<TerminalDistribution> {
    let n = env.num_states();
    if n > DEFAULT_STATE_CAP {
        return Err(Error::Budget {
            what: "states",
            limit: DEFAULT_STATE_CAP,
        });
    }
    let mut probs = vec![0.0; n];
    if root == env.source() {
        let mut reach = vec![0.0; n];
        reach[root] = 1.0;
        for s in 0..n {
            if reach[s] == 0.0 {
                continue;
            }
            let policy = params.forward_policy(s);
            let term = env.terminate_slot(s);
            for (k, p) in policy.iter().enumerate().take(term) {
                let c = env.child(s, k).expect("non-terminal slot has a child");
                reach[c] += reach[s] * p;
            }
            probs[s] = reach[s] * policy[term];
        }
    } else {
        for (s, p) in terminating_distribution_sparse(params, env, root, n)? {
            probs[s] = p;
        }
    }
    Ok(TerminalDistribution { probs })
}

/// `p*(x) = R(x) / sum R`.
pub fn true_distribution<E: DagEnv + ?Sized>(env: &E) -> TerminalDistribution {
    let rewards: Vec<f64> = (0..env.num_states()).map(|s| env.reward(s)).collect();
    let total: f64 = rewards.iter().sum();
    TerminalDistribution {
        probs: rewards.into_iter().map(|r| r / total).collect(),
    }
}

pub fn l1_distance(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "distributions over {} and {} states",
            p.len(),
            q.len()
        )));
    }
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum())
}

/// Frequency estimate from a multiset of terminating states.
pub fn empirical_distribution<E: DagEnv + ?Sized>(
    samples: &[StateIdx],
    env: &E,
) -> Result<TerminalDistribution> {
    if samples.is_empty() {
        return Err(Error::Contract("empirical distribution needs at least one sample".into()));
    }
    let mut counts = vec![0usize; env.num_states()];
    for &s in samples {
        if !env.is_valid(s) {
            return Err(Error::Contract(format!("sample {s} is outside the environment")));
        }
        counts[s] += 1;
    }
    Ok(from_counts(&counts, samples.len()))
}

pub(crate) fn from_counts(counts: &[usize], total: usize) -> TerminalDistribution {
    let total = total as f64;
    TerminalDistribution {
        probs: counts.iter().map(|&c| c as f64 / total).collect(),
    }
}

/// Every complete trajectory starting at `root`, depth first, children in
/// slot order with the terminating trajectory of each prefix emitted last.
pub fn enumerate_trajectories<E: DagEnv + ?Sized>(
    env: &E,
    root: StateIdx,
    budget: usize,
) -> Result<Vec<Trajectory>> {
    fn visit<E: DagEnv + ?Sized>(
        env: &E,
        path: &mut Vec<StateIdx>,
        out: &mut Vec<Trajectory>,
        budget: usize,
    ) -> Result<()> {
        let s = *path.last().expect("path is never empty");
        for k in 0..env.num_children(s) {
            match env.child(s, k) {
                Some(c) => {
                    path.push(c);
                    visit(env, path, out, budget)?;
                    path.pop();
                }
                None => {
                    if out.len() >= budget {
                        return Err(Error::Budget {
                            what: "trajectories",
                            limit: budget,
                        });
                    }
                    out.push(Trajectory::from_states(env, path)?);
                }
            }
        }
        Ok(())
    }

    let mut out = Vec::new();
    visit(env, &mut vec![root], &mut out, budget)?;
    Ok(out)
}

/// Probability of a trajectory under the forward policy, `prod P_F`, terminate included.
pub fn trajectory_forward_prob<E: DagEnv + ?Sized>(params: &FlowParams, env: &E, traj: &Trajectory) -> f64 {
    traj.states
        .iter()
        .zip(traj.slots(env))
        .map(|(&s, k)| params.log_pf(s, k))
        .sum::<f64>()
        .exp()
}

/// Terminating distribution by enumerating every trajectory from `root` and
/// summing `prod P_F` per terminal. Oracle for [`terminating_distribution`].
pub fn brute_force_terminating_distribution<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    root: StateIdx,
    budget: usize,
) -> Result<TerminalDistribution> {
    let mut probs = vec![0.0; env.num_states()];
    for t in enumerate_trajectories(env, root, budget)? {
        probs[t.terminal()] += trajectory_forward_prob(params, env, &t);
    }
    Ok(TerminalDistribution { probs })
}

/// State and edge flows of a Markovian flow.
///
/// Edge flows are stored per state in child-slot order; the last slot of each
/// state is its terminate edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub state_flow: Vec<f64>,
    pub edge_flow: Vec<Vec<f64>>,
    pub z: f64,
}

impl FlowTable {
    /// Largest `|inflow - outflow|` over all states, where the source's
    /// inflow is `Z`. Also covers `F(s) = outflow`.
    pub fn max_flow_matching_violation<E: DagEnv + ?Sized>(&self, env: &E) -> f64 {
        let mut inflow = vec![0.0; env.num_states()];
        inflow[env.source()] = self.z;
        for s in 0..env.num_states() {
            for (k, f) in self.edge_flow[s].iter().enumerate() {
                if let Some(c) = env.child(s, k) {
                    inflow[c] += f;
                }
            }
        }
        (0..env.num_states())
            .map(|s| {
                let out: f64 = self.edge_flow[s].iter().sum();
                (inflow[s] - out).abs().max((self.state_flow[s] - out).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Largest `|F(s -> s_f) - R(s)|`.
    pub fn max_reward_violation<E: DagEnv + ?Sized>(&self, env: &E) -> f64 {
        (0..env.num_states())
            .map(|s| (self.edge_flow[s][env.terminate_slot(s)] - env.reward(s)).abs())
            .fold(0.0, f64::max)
    }

    /// Parameters that realise this flow exactly: forward logits are log edge
    /// ratios, state flows are log `F(s)`, `log_Z = log Z`. Backward logits
    /// (if any) are copied from `template`.
    pub fn to_params<E: DagEnv + ?Sized>(&self, env: &E, template: &FlowParams) -> FlowParams {
        let mut params = template.clone();
        params.set_log_z(self.z.ln());
        for s in 0..env.num_states() {
            let fs = self.state_flow[s];
            for (logit, f) in params.forward_logits_mut(s).iter_mut().zip(&self.edge_flow[s]) {
                *logit = (f / fs).ln();
            }
            params.set_log_state_flow(s, fs.ln());
        }
        params
    }
}

/// Builds the flow consistent with `R` and the backward policy of `backward`
/// by enumerating every complete trajectory and assigning it
/// `F(tau) = R(s_n) * prod P_B(s_{t-1} | s_t)`.
pub fn brute_force_flows<E: DagEnv + ?Sized>(
    env: &E,
    backward: &FlowParams,
    budget: usize,
) -> Result<FlowTable> {
    let n = env.num_states();
    let mut state_flow = vec![0.0; n];
    let mut edge_flow: Vec<Vec<f64>> = (0..n).map(|s| vec![0.0; env.num_children(s)]).collect();
    let mut z = 0.0;
    for t in enumerate_trajectories(env, env.source(), budget)? {
        let log_pb: f64 = t
            .states
            .windows(2)
            .map(|w| {
                let back = env.parent_slot(w[1], w[0]).expect("edge has a reverse");
                backward.log_pb(env, w[1], back)
            })
            .sum();
        let flow = env.reward(t.terminal()) * log_pb.exp();
        z += flow;
        for (&s, k) in t.states.iter().zip(t.slots(env)) {
            state_flow[s] += flow;
            edge_flow[s][k] += flow;
        }
    }
    Ok(FlowTable {
        state_flow,
        edge_flow,
        z,
    })
}

/// Number of distinct sampled terminal states with reward at least `threshold`.
pub fn modes_found<E: DagEnv + ?Sized>(env: &E, samples: &[StateIdx], threshold: f64) -> usize {
    let mut seen: Vec<StateIdx> = samples
        .iter()
        .copied()
        .filter(|&s| env.reward(s) >= threshold)
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Default mode threshold for the hypergrid: `2 + R0`.
pub fn default_mode_threshold(r0: f64) -> f64 {
    2.0 + r0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Hypergrid;
    use proptest::prelude::*;

    fn grid(d: usize, h: usize) -> Hypergrid {
        Hypergrid::new(d, h, 0.1).unwrap()
    }

    #[test]
    fn uniform_policy_distribution() {
        let env = grid(2, 2);
        let p = FlowParams::zeros(&env);
        let dist = terminating_distribution(&p, &env, 0).unwrap();
        let expected = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (a, b) in dist.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let sub = terminating_distribution(&p, &env, 2).unwrap();
        assert_eq!(sub.probs(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn deterministic_policy_to_corner() {
        let env = grid(2, 4);
        let mut p = FlowParams::zeros(&env);
        for s in 0..env.num_states() {
            let logits = p.forward_logits_mut(s);
            let n = logits.len();
            for (k, l) in logits.iter_mut().enumerate() {
                *l = if k == 0 && n > 1 { 0.0 } else { -800.0 };
            }
            if n == 1 {
                logits[0] = 0.0;
            }
        }
        let dist = terminating_distribution(&p, &env, 0).unwrap();
        assert_eq!(dist.prob(env.far_corner()), 1.0);
    }

    #[test]
    fn true_distribution_examples() {
        let env = grid(2, 2);
        assert!(true_distribution(&env).probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let env = grid(2, 8);
        let total: f64 = (0..64).map(|s| env.reward(s)).sum();
        assert!((total - 16.4).abs() < 1e-12);
        let p = true_distribution(&env);
        let s = env.index(&[1, 1]).unwrap();
        assert!((p.prob(s) - 2.6 / 16.4).abs() < 1e-15);

        let scaled = Hypergrid::new(2, 8, 1.0).unwrap();
        // R0 = 1: sixty troughs at 1.0 and four peaks at 3.5.
        let q = true_distribution(&scaled);
        assert!((q.prob(s) - 3.5 / (64.0 + 10.0)).abs() < 1e-15);
    }

    #[test]
    fn l1_examples() {
        let u = TerminalDistribution::from_probs(vec![0.25; 4]).unwrap();
        let v = TerminalDistribution::from_probs(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(l1_distance(&u, &u).unwrap(), 0.0);
        assert!((l1_distance(&u, &v).unwrap() - 0.4).abs() < 1e-15);
        let a = TerminalDistribution::from_probs(vec![1.0, 0.0]).unwrap();
        let b = TerminalDistribution::from_probs(vec![0.0, 1.0]).unwrap();
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        assert!(l1_distance(&a, &u).is_err());
    }

    #[test]
    fn empirical_examples() {
        let env = grid(2, 2);
        let d = empirical_distribution(&[3, 3, 3, 0], &env).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.0, 0.0, 0.75]);
        let d = empirical_distribution(&[2], &env).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(empirical_distribution(&[], &env).is_err());
    }

    #[test]
    fn trajectory_counts() {
        assert_eq!(enumerate_trajectories(&grid(2, 2), 0, 100).unwrap().len(), 5);
        // sum over the 3x3 grid of C(i + j, i)
        let oracle: usize = (0..3usize)
            .flat_map(|i| (0..3usize).map(move |j| (i, j)))
            .map(|(i, j)| binomial(i + j, i))
            .sum();
        assert_eq!(oracle, 19);
        assert_eq!(enumerate_trajectories(&grid(2, 3), 0, 100).unwrap().len(), oracle);
        let env = grid(3, 3);
        assert_eq!(enumerate_trajectories(&env, env.far_corner(), 10).unwrap().len(), 1);
        assert!(matches!(
            enumerate_trajectories(&grid(2, 3), 0, 10),
            Err(Error::Budget { .. })
        ));
    }

    fn binomial(n: usize, k: usize) -> usize {
        (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
    }

    #[test]
    fn brute_force_flow_examples() {
        let env = grid(2, 2);
        let table = brute_force_flows(&env, &FlowParams::zeros(&env), 100).unwrap();
        assert!((table.z - 0.4).abs() < 1e-15);
        assert!((table.state_flow[0] - table.z).abs() < 1e-15);
        // (0,0)->(0,1)->(1,1)->stop carries 0.1 * 1/2 * 1
        let t = Trajectory::from_states(&env, &[0, 2, 3]).unwrap();
        let pb: f64 = [0.5, 1.0].iter().product();
        assert!((env.reward(t.terminal()) * pb - 0.05).abs() < 1e-15);
        assert!(table.max_flow_matching_violation(&env) < 1e-15);
        assert!(table.max_reward_violation(&env) < 1e-15);
    }

    #[test]
    fn modes() {
        let env = grid(2, 8);
        let ix = |c: &[usize]| env.index(c).unwrap();
        let th = default_mode_threshold(0.1);
        assert_eq!(modes_found(&env, &[], th), 0);
        let peaks = [ix(&[1, 1]), ix(&[1, 6]), ix(&[6, 1]), ix(&[6, 6]), ix(&[1, 1])];
        assert_eq!(modes_found(&env, &peaks, th), 4);
        assert_eq!(modes_found(&env, &[ix(&[0, 0]), ix(&[3, 4])], th), 0);
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(
            raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 2..12)
        ) {
            let norm = |xs: Vec<f64>| {
                let t: f64 = xs.iter().sum();
                TerminalDistribution::from_probs(xs.into_iter().map(|x| x / t).collect()).unwrap()
            };
            let p = norm(raw.iter().map(|r| r.0).collect());
            let q = norm(raw.iter().map(|r| r.1).collect());
            let r = norm(raw.iter().map(|r| r.2).collect());
            let pq = l1_distance(&p, &q).unwrap();
            prop_assert!((pq - l1_distance(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!(pq <= l1_distance(&p, &r).unwrap() + l1_distance(&r, &q).unwrap() + 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&pq));
        }

        #[test]
        fn reward_rescale_leaves_target_unchanged(c in 0.1f64..50.0) {
            let env = grid(2, 3);
            let p = true_distribution(&env);
            let rewards: Vec<f64> = (0..9).map(|s| env.reward(s) * c).collect();
            let total: f64 = rewards.iter().sum();
            for (s, r) in rewards.iter().enumerate() {
                prop_assert!((r / total - p.prob(s)).abs() < 1e-14);
            }
        }
    }
}
