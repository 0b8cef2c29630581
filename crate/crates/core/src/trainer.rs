//! Gradients, Adam, and the training loop.

use std::collections::VecDeque;
use std::time::Instant;

use crate::env::{DagEnv, StateIdx, Trajectory};
use crate::error::{Error, Result};
use crate::exact::{from_counts, l1_distance, terminating_distribution, true_distribution, TerminalDistribution};
use crate::losses::{loss_and_grad, EntropyCache, LossKind, LossSpec};
use crate::model::{sample_batch, BackwardMode, FlowParams, InitScheme, ParamGroup, SampleConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Adam step size for forward/backward logits.
    pub lr_policy: f64,
    /// Adam step size for `log_Z` and the log state flows.
    pub lr_logz_flow: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub loss: LossSpec,
    pub epsilon: f64,
    /// Size of the sliding window of sampled terminals behind `l1_empirical`.
    /// `None` disables the empirical metric.
    pub empirical_window: Option<usize>,
    /// Fill `elapsed_ms`. Off by default so metric series are reproducible.
    pub record_time: bool,
    pub init: InitScheme,
    pub backward: BackwardMode,
    /// Reward at or above which a terminal counts as a mode. Defaults to the
    /// environment's own threshold.
    pub mode_threshold: Option<f64>,
}

impl TrainConfig {
    pub fn new(loss: LossSpec) -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr_policy: 1e-3,
            lr_logz_flow: 1e-1,
            seed: 0,
            eval_every: 250,
            loss,
            epsilon: 0.0,
            empirical_window: Some(200_000),
            record_time: false,
            init: InitScheme::Zeros,
            backward: BackwardMode::Uniform,
            mode_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval interval must be >= 1".into()));
        }
        for (name, lr) in [("lr", self.lr_policy), ("lr-logz", self.lr_logz_flow)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if self.empirical_window == Some(0) {
            return Err(Error::Config("empirical window must be >= 1".into()));
        }
        Ok(())
    }
}

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub l1_exact: f64,
    pub l1_empirical: Option<f64>,
    pub log_z: f64,
    pub mean_entropy: Option<f64>,
    pub modes_found: usize,
    pub elapsed_ms: u64,
}

/// Loss and its gradient, aligned with [`FlowParams::values`].
///
/// Entropy weights come from `cache` and are constants here.
pub fn compute_gradients<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    batch: &[Trajectory],
    spec: &LossSpec,
    cache: Option<&EntropyCache>,
) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; params.len()];
    let loss = loss_and_grad(params, env, batch, spec, cache, Some(&mut grads))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            param: "loss".into(),
            value: loss,
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            param: format!("gradient of {}", params.param_id(i)),
            value: grads[i],
        });
    }
    Ok((loss, grads))
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over parameters whose analytic gradient
/// exceeds 1e-10 in magnitude.
///
/// A parameter the analytic gradient misses (|g| <= 1e-10 while the
/// difference quotient exceeds 1e-6) counts as relative error 1.
pub fn grad_check<E: DagEnv + ?Sized>(
    params: &FlowParams,
    env: &E,
    batch: &[Trajectory],
    spec: &LossSpec,
    cache: Option<&EntropyCache>,
    h: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = compute_gradients(params, env, batch, spec, cache)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let x = params.values()[i];
        probe.values_mut()[i] = x + h;
        let up = loss_and_grad(&probe, env, batch, spec, cache, None)?;
        probe.values_mut()[i] = x - h;
        let down = loss_and_grad(&probe, env, batch, spec, cache, None)?;
        probe.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let err = if g.abs() > 1e-10 {
            (g - numeric).abs() / g.abs().max(numeric.abs())
        } else if numeric.abs() > 1e-6 {
            1.0
        } else {
            0.0
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradient entries below this magnitude are treated as exactly zero.
///
/// Adam divides by `sqrt(v) + eps`, so at an exact optimum a roundoff
/// gradient of 1e-16 still moves a parameter by ~`lr * 1e-8`, and the
/// residual it creates is then amplified to a full `lr`-sized step.
pub const GRAD_FLOOR: f64 = 1e-12;

/// One bias-corrected Adam update. Parameters and moments are left untouched
/// if any updated value would be non-finite.
pub fn adam_step(params: &mut FlowParams, grads: &[f64], opt: &mut OptState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::Contract("gradient, optimizer and parameter shapes differ".into()));
    }
    let t = opt.t + 1;
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    let mut next = Vec::with_capacity(params.len());
    for (i, &g) in grads.iter().enumerate() {
        let g = if g.abs() < GRAD_FLOOR { 0.0 } else { g };
        let m = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
        let v = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
        let lr = match params.group(i) {
            ParamGroup::Policy => cfg.lr_policy,
            ParamGroup::Flow => cfg.lr_logz_flow,
        };
        let x = params.values()[i] - lr * (m / bc1) / ((v / bc2).sqrt() + opt.eps);
        if !(m.is_finite() && v.is_finite() && x.is_finite()) {
            return Err(Error::NonFinite {
                param: format!("Adam update of {}", params.param_id(i)),
                value: x,
            });
        }
        next.push((m, v, x));
    }
    for (i, (m, v, x)) in next.into_iter().enumerate() {
        opt.m[i] = m;
        opt.v[i] = v;
        params.values_mut()[i] = x;
    }
    opt.t = t;
    Ok(())
}

/// L1 distance between the model's exact terminating distribution and the
/// reward-proportional target.
pub fn exact_l1<E: DagEnv + ?Sized>(params: &FlowParams, env: &E) -> Result<f64> {
    let model = terminating_distribution(params, env, env.source())?;
    l1_distance(&model, &true_distribution(env))
}

/// Stateful training loop over one environment.
pub struct Trainer<E: DagEnv> {
    env: E,
    cfg: TrainConfig,
    params: FlowParams,
    opt: OptState,
    cache: EntropyCache,
    sample_cfg: SampleConfig,
    target: TerminalDistribution,
    step: u64,
    window: VecDeque<StateIdx>,
    window_counts: Vec<usize>,
    mode_seen: Vec<bool>,
    modes_found: usize,
    mode_threshold: f64,
    started: Instant,
}

impl<E: DagEnv> Trainer<E> {
    pub fn new(env: E, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = FlowParams::new(&env, cfg.init, cfg.backward);
        Self::with_params(env, cfg, params)
    }

    /// Starts from existing parameters (e.g. a checkpoint).
    pub fn with_params(env: E, cfg: TrainConfig, params: FlowParams) -> Result<Self> {
        cfg.validate()?;
        if params.num_states() != env.num_states() {
            return Err(Error::Contract("parameters were built for another state space".into()));
        }
        let n = env.num_states();
        let mode_threshold = cfg
            .mode_threshold
            .or_else(|| env.mode_threshold())
            .unwrap_or(f64::INFINITY);
        Ok(Self {
            opt: OptState::new(params.len()),
            cache: EntropyCache::new(&env, cfg.seed),
            sample_cfg: SampleConfig::new(cfg.epsilon, cfg.seed)?,
            target: true_distribution(&env),
            step: 0,
            window: VecDeque::new(),
            window_counts: if cfg.empirical_window.is_some() { vec![0; n] } else { Vec::new() },
            mode_seen: vec![false; n],
            modes_found: 0,
            mode_threshold,
            started: Instant::now(),
            params,
            env,
            cfg,
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn params(&self) -> &FlowParams {
        &self.params
    }

    pub fn into_params(self) -> FlowParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &EntropyCache {
        &self.cache
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn record_terminals(&mut self, batch: &[Trajectory]) {
        for t in batch {
            let x = t.terminal();
            if !self.mode_seen[x] && self.env.reward(x) >= self.mode_threshold {
                self.mode_seen[x] = true;
                self.modes_found += 1;
            }
            if let Some(cap) = self.cfg.empirical_window {
                self.window.push_back(x);
                self.window_counts[x] += 1;
                if self.window.len() > cap {
                    let old = self.window.pop_front().expect("window is nonempty");
                    self.window_counts[old] -= 1;
                }
            }
        }
    }

    /// Sample a batch, refresh entropies if due, and take one Adam step.
    /// Returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let b = self.cfg.batch_size;
        let batch = sample_batch(&self.params, &self.env, &self.sample_cfg, self.step * b as u64, b)?;
        self.record_terminals(&batch);
        let spec = self.cfg.loss;
        let cache = if spec.kind == LossKind::SubGFlowNet {
            self.cache.refresh(&self.params, &self.env, &batch, &spec, self.step)?;
            Some(&self.cache)
        } else {
            None
        };
        let (loss, grads) = compute_gradients(&self.params, &self.env, &batch, &spec, cache)?;
        adam_step(&mut self.params, &grads, &mut self.opt, &self.cfg)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn evaluate(&self, loss: f64) -> Result<MetricsRow> {
        let model = terminating_distribution(&self.params, &self.env, self.env.source())?;
        let l1_empirical = match self.cfg.empirical_window {
            Some(_) if !self.window.is_empty() => {
                let emp = from_counts(&self.window_counts, self.window.len());
                Some(l1_distance(&emp, &self.target)?)
            }
            _ => None,
        };
        Ok(MetricsRow {
            step: self.step,
            loss,
            l1_exact: l1_distance(&model, &self.target)?,
            l1_empirical,
            log_z: self.params.log_z(),
            mean_entropy: self.cache.mean(),
            modes_found: self.modes_found,
            elapsed_ms: if self.cfg.record_time {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Runs the remaining configured steps, evaluating every `eval_every`
    /// steps and after the last one.
    pub fn run(&mut self) -> std::result::Result<Vec<MetricsRow>, TrainFailure> {
        let mut rows = Vec::new();
        while self.step < self.cfg.steps {
            let outcome = self.step().and_then(|loss| {
                if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps {
                    rows.push(self.evaluate(loss)?);
                }
                Ok(())
            });
            if let Err(error) = outcome {
                return Err(TrainFailure {
                    error,
                    step: self.step,
                    last_good: Some(Box::new(self.params.clone())),
                    metrics: rows,
                });
            }
        }
        Ok(rows)
    }
}

/// A run aborted by an error. `last_good` holds the parameters before the
/// failing step; it is `None` when the run never started.
#[derive(Debug, Clone)]
pub struct TrainFailure {
    pub error: Error,
    pub step: u64,
    pub last_good: Option<Box<FlowParams>>,
    pub metrics: Vec<MetricsRow>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// Trains from scratch and returns the final parameters with the metric series.
pub fn train_run<E: DagEnv>(
    env: E,
    cfg: TrainConfig,
) -> std::result::Result<(FlowParams, Vec<MetricsRow>), TrainFailure> {
    let mut trainer = Trainer::new(env, cfg).map_err(|error| TrainFailure {
        error,
        step: 0,
        last_good: None,
        metrics: Vec::new(),
    })?;
    let rows = trainer.run()?;
    Ok((trainer.into_params(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Hypergrid;

    fn grid(d: usize, h: usize) -> Hypergrid {
        Hypergrid::new(d, h, 0.1).unwrap()
    }

    #[test]
    fn tb_log_z_gradient_is_twice_the_residual() {
        let env = grid(2, 3);
        let p = FlowParams::new(&env, InitScheme::Uniform { scale: 1.0, seed: 2 }, BackwardMode::Uniform);
        let t = Trajectory::from_states(&env, &[0, 1, 4]).unwrap();
        let spec = LossSpec::new(LossKind::TrajectoryBalance);
        let (loss, g) = compute_gradients(&p, &env, &[t], &spec, None).unwrap();
        let residual = loss.sqrt();
        assert!((g[0].abs() - 2.0 * residual).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let env = grid(2, 2);
        let mut p = FlowParams::zeros(&env);
        let cfg = TrainConfig::new(LossSpec::new(LossKind::TrajectoryBalance));
        let mut opt = OptState::new(p.len());
        let mut g = vec![0.0; p.len()];
        g[0] = 0.37;
        g[1] = -5.0;
        adam_step(&mut p, &g, &mut opt, &cfg).unwrap();
        assert!((p.values()[0] + cfg.lr_logz_flow).abs() < 1e-8);
        assert!((p.values()[1] - cfg.lr_policy).abs() < 1e-8);
        assert!(p.values()[2..].iter().all(|&x| x == 0.0));
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn roundoff_gradients_do_not_move_params() {
        let env = grid(2, 2);
        let mut p = FlowParams::zeros(&env);
        let cfg = TrainConfig::new(LossSpec::new(LossKind::TrajectoryBalance));
        let mut opt = OptState::new(p.len());
        let mut g = vec![0.0; p.len()];
        g[0] = 3e-16;
        g[1] = -2e-13;
        adam_step(&mut p, &g, &mut opt, &cfg).unwrap();
        assert!(p.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let env = grid(2, 2);
        let mut p = FlowParams::zeros(&env);
        let before = p.clone();
        let cfg = TrainConfig::new(LossSpec::new(LossKind::TrajectoryBalance));
        let mut opt = OptState::new(p.len());
        let mut g = vec![0.0; p.len()];
        g[3] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &g, &mut opt, &cfg), Err(Error::NonFinite { .. })));
        assert_eq!(p, before);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn zero_steps() {
        let env = grid(2, 2);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::new(LossSpec::new(LossKind::TrajectoryBalance))
        };
        let (params, rows) = train_run(env.clone(), cfg).unwrap();
        assert!(rows.is_empty());
        assert_eq!(params, FlowParams::zeros(&env));
    }

    #[test]
    fn init_l1_is_one_third() {
        let env = grid(2, 2);
        let l1 = exact_l1(&FlowParams::zeros(&env), &env).unwrap();
        assert!((l1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn row_cadence() {
        let env = grid(2, 4);
        let cfg = TrainConfig {
            steps: 25,
            eval_every: 10,
            ..TrainConfig::new(LossSpec::new(LossKind::SubGFlowNet))
        };
        let (_, rows) = train_run(env, cfg).unwrap();
        let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
        for r in &rows {
            assert!((0.0..=2.0).contains(&r.l1_exact));
            assert!(r.mean_entropy.is_some());
            assert_eq!(r.elapsed_ms, 0);
        }
    }

    #[test]
    fn invalid_config() {
        let mut cfg = TrainConfig::new(LossSpec::new(LossKind::TrajectoryBalance));
        cfg.lr_policy = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(LossSpec::new(LossKind::TrajectoryBalance));
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let env = grid(2, 2);
        let p = FlowParams::zeros(&env);
        let t = Trajectory::from_states(&env, &[0]).unwrap();
        let spec = LossSpec::new(LossKind::TrajectoryBalance);
        assert!(grad_check(&p, &env, &[t], &spec, None, 1e-2).is_err());
    }
}
