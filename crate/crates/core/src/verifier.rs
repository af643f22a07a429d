//! Empirical equilibrium checks: reward-to-go of deviation strategies against
//! the computed value function, and finite/infinite-horizon consistency.
//!
//! The tested agent's opponents always follow the equilibrium prescriptions,
//! and the public belief is always updated with the equilibrium prescriptions,
//! whatever the tested agent actually plays.

use log::debug;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{update_joint, PolicyError, PolicyLookup, ProductBelief};
use crate::finite_horizon::{backward_solve, FiniteHorizonConfig, SolveError};
use crate::game_model::GameSpec;
use crate::grid::{PolicyGrid, ValueTable};
use crate::stage_game::{all_action_values, best_response, ZeroValue};

pub const DEFAULT_EPS_DEV: f64 = 1e-3;
pub const DEFAULT_NODE_CAP: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("enumeration tree needs {needed} nodes, above the cap of {cap}; use the Monte Carlo estimator")]
    NodeCapExceeded { needed: f64, cap: usize },
    #[error("at least one sample is required")]
    NoSamples,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Behaviour of the tested agent: a distribution over own actions at
/// `step` (counted from the start of the evaluation) given the public belief
/// and own current type.
pub trait Strategy: Sync {
    fn name(&self) -> String;
    fn distribution(&self, step: usize, belief: &ProductBelief, agent: usize, own_type: usize) -> Vec<f64>;
}

/// Follow the equilibrium prescriptions (nearest grid point).
pub struct Equilibrium<'a>(pub &'a PolicyGrid);

impl Strategy for Equilibrium<'_> {
    fn name(&self) -> String {
        "equilibrium".into()
    }

    fn distribution(&self, _step: usize, belief: &ProductBelief, agent: usize, own_type: usize) -> Vec<f64> {
        self.0.nearest(belief).gamma[agent][own_type].clone()
    }
}

/// Play `action` at the first step, then return to the equilibrium.
pub struct OneStepDeviation<'a> {
    pub action: usize,
    pub policy: &'a PolicyGrid,
}

impl Strategy for OneStepDeviation<'_> {
    fn name(&self) -> String {
        format!("one-step action {}", self.action)
    }

    fn distribution(&self, step: usize, belief: &ProductBelief, agent: usize, own_type: usize) -> Vec<f64> {
        if step == 0 {
            let n = self.policy.nearest(belief).gamma[agent][own_type].len();
            let mut d = vec![0.0; n];
            d[self.action] = 1.0;
            d
        } else {
            Equilibrium(self.policy).distribution(step, belief, agent, own_type)
        }
    }
}

/// Uniform over own actions at every step.
pub struct UniformRandom {
    pub n_actions: usize,
}

impl Strategy for UniformRandom {
    fn name(&self) -> String {
        "uniform random".into()
    }

    fn distribution(&self, _step: usize, _belief: &ProductBelief, _agent: usize, _own_type: usize) -> Vec<f64> {
        vec![1.0 / self.n_actions as f64; self.n_actions]
    }
}

/// Maximise the expected stage reward against the equilibrium prescriptions
/// of the others, ignoring the future.
pub struct MyopicGreedy<'a> {
    pub spec: &'a GameSpec,
    pub policy: &'a PolicyGrid,
}

impl Strategy for MyopicGreedy<'_> {
    fn name(&self) -> String {
        "myopic greedy".into()
    }

    fn distribution(&self, _step: usize, belief: &ProductBelief, agent: usize, own_type: usize) -> Vec<f64> {
        let gamma = self.policy.nearest(belief);
        let zero_discount = self.spec.with_discount(0.0).expect("zero discount is valid");
        let av = all_action_values(&zero_discount, belief, gamma, &ZeroValue);
        let q = av.of(agent, own_type);
        let (set, _) = best_response(q, 1e-9);
        let mut d = vec![0.0; q.len()];
        for a in &set {
            d[*a] = 1.0 / set.len() as f64;
        }
        d
    }
}

/// `(1 - delta) * delta^T * (R_max / (1 - delta) + V_max)`: bound on what the
/// truncated reward-to-go can miss, on the normalised scale.
pub fn tail_bound(spec: &GameSpec, v: &ValueTable, horizon: usize) -> f64 {
    let d = spec.discount();
    let r_max = spec.max_abs_reward();
    (1.0 - d) * d.powi(horizon as i32) * (r_max / (1.0 - d) + v.max_abs())
}

/// Smallest horizon whose tail bound is at most `eps_dev / 10`.
pub fn auto_horizon(spec: &GameSpec, v: &ValueTable, eps_dev: f64) -> usize {
    let mut t = 1;
    while tail_bound(spec, v, t) > eps_dev / 10.0 && t < 100_000 {
        t += 1;
    }
    t
}

/// Exact `T`-step reward-to-go of `strategy` for `agent` of type `own_type`
/// at public belief `belief`, with terminal reward `delta^T V(pi_{T+1}, x)`.
/// Opponents' types and actions are integrated out under the belief and the
/// equilibrium prescriptions.
#[allow(clippy::too_many_arguments)]
pub fn reward_to_go_exact(
    spec: &GameSpec,
    strategy: &dyn Strategy,
    equilibrium: &dyn PolicyLookup,
    belief: &ProductBelief,
    agent: usize,
    own_type: usize,
    horizon: usize,
    terminal: Option<&ValueTable>,
    node_cap: usize,
) -> Result<f64, VerifyError> {
    let branching = (spec.joint_actions().len() * spec.n_types(agent)) as f64;
    let needed = branching.powi(horizon as i32);
    if needed > node_cap as f64 {
        return Err(VerifyError::NodeCapExceeded { needed, cap: node_cap });
    }
    let ctx = Exact {
        spec,
        strategy,
        equilibrium,
        agent,
        horizon,
        terminal,
    };
    ctx.value(0, belief, own_type)
}

struct Exact<'a> {
    spec: &'a GameSpec,
    strategy: &'a dyn Strategy,
    equilibrium: &'a dyn PolicyLookup,
    agent: usize,
    horizon: usize,
    terminal: Option<&'a ValueTable>,
}

impl Exact<'_> {
    fn value(&self, step: usize, belief: &ProductBelief, own_type: usize) -> Result<f64, VerifyError> {
        let spec = self.spec;
        let i = self.agent;
        if step == self.horizon {
            return Ok(self.terminal.map_or(0.0, |v| v.interpolate(belief, i, own_type)));
        }
        let gamma = self.equilibrium.prescription(step, belief)?;
        let own = self.strategy.distribution(step, belief, i, own_type);
        let jt = spec.joint_types();
        let ja = spec.joint_actions();
        let kernel = spec.kernel(i);
        let mut total = 0.0;
        for a in 0..ja.len() {
            let p_own = own[ja.component(a, i)];
            if p_own == 0.0 {
                continue;
            }
            let mut mass = 0.0;
            let mut reward = 0.0;
            for x in (0..jt.len()).filter(|&x| jt.component(x, i) == own_type) {
                let w: f64 = (0..spec.n_agents())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let xj = jt.component(x, j);
                        belief.marginals[j][xj] * gamma.gamma[j][xj][ja.component(a, j)]
                    })
                    .product();
                mass += w;
                reward += w * spec.reward(i, x, a);
            }
            if mass == 0.0 {
                continue;
            }
            total += p_own * reward;
            let next = update_joint(belief, &gamma, a, spec);
            for (x_next, &q) in kernel.row(own_type, a).iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                total += spec.discount() * p_own * mass * q * self.value(step + 1, &next, x_next)?;
            }
        }
        Ok(total)
    }
}

fn sample(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    WeightedIndex::new(dist)
        .expect("valid probability vector")
        .sample(rng)
}

/// One simulated truncated reward-to-go with opponents' types drawn from the
/// belief.
#[allow(clippy::too_many_arguments)]
fn rollout(
    spec: &GameSpec,
    strategy: &dyn Strategy,
    theta: &PolicyGrid,
    terminal: &ValueTable,
    belief: &ProductBelief,
    agent: usize,
    own_type: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = spec.n_agents();
    let ja = spec.joint_actions();
    let jt = spec.joint_types();
    let mut types: Vec<usize> = (0..n)
        .map(|j| if j == agent { own_type } else { sample(&belief.marginals[j], rng) })
        .collect();
    let mut pi = belief.clone();
    let mut acts = vec![0usize; n];
    let mut total = 0.0;
    let mut disc = 1.0;
    for step in 0..horizon {
        let gamma = theta.nearest(&pi).clone();
        for j in 0..n {
            acts[j] = if j == agent {
                sample(&strategy.distribution(step, &pi, agent, types[agent]), rng)
            } else {
                sample(&gamma.gamma[j][types[j]], rng)
            };
        }
        let a = ja.flatten(&acts);
        total += disc * spec.reward(agent, jt.flatten(&types), a);
        for (j, t) in types.iter_mut().enumerate() {
            *t = sample(spec.kernel(j).row(*t, a), rng);
        }
        pi = update_joint(&pi, &gamma, a, spec);
        disc *= spec.discount();
    }
    total + disc * terminal.interpolate(&pi, agent, types[agent])
}

/// Monte Carlo estimate of the truncated reward-to-go: `(mean, standard error)`.
/// Rollout `k` uses its own ChaCha stream, so results do not depend on the
/// number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn reward_to_go_mc(
    spec: &GameSpec,
    strategy: &dyn Strategy,
    theta: &PolicyGrid,
    terminal: &ValueTable,
    belief: &ProductBelief,
    agent: usize,
    own_type: usize,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), VerifyError> {
    if n_samples == 0 {
        return Err(VerifyError::NoSamples);
    }
    let draws: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rollout(spec, strategy, theta, terminal, belief, agent, own_type, horizon, &mut rng)
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = if draws.len() > 1 {
        draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// One tested (agent, belief, type, strategy) combination. Gap, standard
/// error and tail are on the `(1 - delta)`-normalised scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeviationEntry {
    pub agent: usize,
    pub belief: Vec<Vec<f64>>,
    pub own_type: usize,
    pub strategy: String,
    pub horizon: usize,
    pub samples: usize,
    pub reward_to_go: f64,
    pub value: f64,
    pub gap: f64,
    pub standard_error: f64,
    pub tail_bound: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl DeviationEntry {
    pub fn threshold(&self) -> f64 {
        self.tolerance + self.tail_bound + 3.0 * self.standard_error
    }
}

/// Compare the Monte Carlo reward-to-go of `deviation` with `V(pi, x)`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_gap_mc(
    spec: &GameSpec,
    v: &ValueTable,
    theta: &PolicyGrid,
    agent: usize,
    belief: &ProductBelief,
    own_type: usize,
    deviation: &dyn Strategy,
    horizon: usize,
    n_samples: usize,
    seed: u64,
    eps_dev: f64,
) -> Result<DeviationEntry, VerifyError> {
    let scale = 1.0 - spec.discount();
    let (w, se) = reward_to_go_mc(spec, deviation, theta, v, belief, agent, own_type, horizon, n_samples, seed)?;
    let value = v.interpolate(belief, agent, own_type);
    let gap = scale * (w - value);
    let standard_error = scale * se;
    let tail = tail_bound(spec, v, horizon);
    let pass = gap <= eps_dev + tail + 3.0 * standard_error;
    Ok(DeviationEntry {
        agent,
        belief: belief.marginals.clone(),
        own_type,
        strategy: deviation.name(),
        horizon,
        samples: n_samples,
        reward_to_go: w,
        value,
        gap,
        standard_error,
        tail_bound: tail,
        tolerance: eps_dev,
        pass,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SuiteConfig {
    pub points: usize,
    pub samples: usize,
    pub seed: u64,
    pub eps_dev: f64,
    /// Truncation horizon; chosen from the tail bound when absent.
    pub horizon: Option<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            points: 64,
            samples: 2000,
            seed: 0,
            eps_dev: DEFAULT_EPS_DEV,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeviationReport {
    pub config: SuiteConfig,
    pub horizon: usize,
    pub entries: Vec<DeviationEntry>,
    pub failures: usize,
    pub max_gap: f64,
    pub passed: bool,
}

/// Sampled test points: (grid point, agent, own type).
pub fn sample_test_points(spec: &GameSpec, theta: &PolicyGrid, count: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid_len = theta.grid().len();
    (0..count)
        .map(|_| {
            let p = rng.gen_range(0..grid_len);
            let i = rng.gen_range(0..spec.n_agents());
            let x = rng.gen_range(0..spec.n_types(i));
            (p, i, x)
        })
        .collect()
}

/// The standard deviation library: equilibrium play (control), every
/// one-step pure deviation, uniform random play and myopic greedy play.
pub fn strategy_library<'a>(spec: &'a GameSpec, theta: &'a PolicyGrid, agent: usize) -> Vec<Box<dyn Strategy + 'a>> {
    let mut lib: Vec<Box<dyn Strategy + 'a>> = vec![Box::new(Equilibrium(theta))];
    for action in 0..spec.n_actions(agent) {
        lib.push(Box::new(OneStepDeviation { action, policy: theta }));
    }
    lib.push(Box::new(UniformRandom {
        n_actions: spec.n_actions(agent),
    }));
    lib.push(Box::new(MyopicGreedy { spec, policy: theta }));
    lib
}

/// Run the library at sampled grid points.
pub fn deviation_suite(
    spec: &GameSpec,
    v: &ValueTable,
    theta: &PolicyGrid,
    config: &SuiteConfig,
) -> Result<DeviationReport, VerifyError> {
    let horizon = config.horizon.unwrap_or_else(|| auto_horizon(spec, v, config.eps_dev));
    let grid = theta.grid();
    let mut entries = Vec::new();
    for (k, (p, i, x)) in sample_test_points(spec, theta, config.points, config.seed).into_iter().enumerate() {
        let belief = grid.point(p);
        for (s, strategy) in strategy_library(spec, theta, i).iter().enumerate() {
            // distinct seed per (point, strategy)
            let seed = config
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((k as u64) << 8 | s as u64);
            let e = deviation_gap_mc(
                spec,
                v,
                theta,
                i,
                &belief,
                x,
                strategy.as_ref(),
                horizon,
                config.samples,
                seed,
                config.eps_dev,
            )?;
            debug!("{} at {:?} agent {i} type {x}: gap {:.2e}", e.strategy, e.belief, e.gap);
            entries.push(e);
        }
    }
    let failures = entries.iter().filter(|e| !e.pass).count();
    let max_gap = entries.iter().map(|e| e.gap).fold(f64::NEG_INFINITY, f64::max);
    Ok(DeviationReport {
        config: config.clone(),
        horizon,
        entries,
        failures,
        max_gap,
        passed: failures == 0,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Lemma4Report {
    pub horizon: usize,
    /// `max |V_t - V|` per stage `t = 1..=T`.
    pub per_stage: Vec<f64>,
    pub max_discrepancy: f64,
    pub normalized: f64,
}

/// Solve the `T`-stage game with terminal reward `V` and compare every stage
/// value with `V`.
pub fn lemma4_check(
    spec: &GameSpec,
    v: &ValueTable,
    warm: Option<&PolicyGrid>,
    horizon: usize,
    config: &FiniteHorizonConfig,
) -> Result<Lemma4Report, VerifyError> {
    let sol = backward_solve(spec, horizon, v, config, warm)?;
    let per_stage: Vec<f64> = sol.values[..horizon].iter().map(|vt| vt.sup_distance(v)).collect();
    let max_discrepancy = per_stage.iter().cloned().fold(0.0, f64::max);
    Ok(Lemma4Report {
        horizon,
        per_stage,
        max_discrepancy,
        normalized: (1.0 - spec.discount()) * max_discrepancy,
    })
}
