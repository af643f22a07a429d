//! Forward simulation of equilibrium play and of the induced belief chain.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{update_joint, ProductBelief};
use crate::game_model::GameSpec;
use crate::grid::PolicyGrid;

pub const DEFAULT_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based time index.
    pub t: usize,
    pub types: Vec<usize>,
    pub actions: Vec<usize>,
    /// Public belief before this step's actions.
    pub belief: ProductBelief,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub policy_id: String,
    pub steps: Vec<Step>,
    /// Belief after the last step's actions.
    pub final_belief: ProductBelief,
}

impl Trajectory {
    /// Beliefs `pi_1, ..., pi_{T+1}`.
    pub fn beliefs(&self) -> Vec<&ProductBelief> {
        self.steps
            .iter()
            .map(|s| &s.belief)
            .chain(std::iter::once(&self.final_belief))
            .collect()
    }

    /// First 1-based `t` at which every agent puts at least `threshold` on
    /// its true current type (belief `t` is the one held before step `t`'s
    /// actions; `T + 1` is the final belief).
    pub fn time_to_concentration(&self, threshold: f64) -> Option<usize> {
        let beliefs = self.beliefs();
        (0..beliefs.len()).find_map(|k| {
            // type in force when belief k is held
            let types = match self.steps.get(k) {
                Some(s) => &s.types,
                None => &self.steps.last()?.types,
            };
            let ok = types
                .iter()
                .enumerate()
                .all(|(i, &x)| beliefs[k].marginals[i][x] >= threshold);
            ok.then_some(k + 1)
        })
    }

    /// Mean over agents of the final belief on the true type.
    pub fn terminal_accuracy(&self) -> f64 {
        let Some(last) = self.steps.last() else {
            return f64::NAN;
        };
        let n = last.types.len();
        last.types
            .iter()
            .enumerate()
            .map(|(i, &x)| self.final_belief.marginals[i][x])
            .sum::<f64>()
            / n as f64
    }

    pub fn discounted_reward(&self, agent: usize, delta: f64) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(k, s)| delta.powi(k as i32) * s.rewards[agent])
            .sum()
    }

    /// CSV with columns `t`, `x^i`, `a^i`, `pi{i}_{first type}`, `r^i`.
    pub fn write_csv<W: Write>(&self, spec: &GameSpec, out: W) -> csv::Result<()> {
        let n = spec.n_agents();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x^{i}")));
        header.extend((1..=n).map(|i| format!("a^{i}")));
        header.extend((0..n).map(|i| format!("pi{}_{}", i + 1, spec.type_labels(i)[0])));
        header.extend((1..=n).map(|i| format!("r^{i}")));
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend((0..n).map(|i| spec.type_labels(i)[s.types[i]].clone()));
            row.extend((0..n).map(|i| spec.action_labels(i)[s.actions[i]].clone()));
            row.extend((0..n).map(|i| format!("{}", s.belief.marginals[i][0])));
            row.extend((0..n).map(|i| format!("{}", s.rewards[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn draw(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    WeightedIndex::new(dist)
        .expect("valid probability vector")
        .sample(rng)
}

fn simulate(
    spec: &GameSpec,
    theta: &PolicyGrid,
    pi_1: &ProductBelief,
    x_1: Option<&[usize]>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Step>, ProductBelief) {
    let n = spec.n_agents();
    let ja = spec.joint_actions();
    let jt = spec.joint_types();
    let mut types: Vec<usize> = match x_1 {
        Some(x) => x.to_vec(),
        None => (0..n).map(|i| draw(spec.initial(i), rng)).collect(),
    };
    let mut pi = pi_1.clone();
    let mut steps = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let gamma = theta.nearest(&pi).clone();
        let actions: Vec<usize> = (0..n).map(|i| draw(&gamma.gamma[i][types[i]], rng)).collect();
        let a = ja.flatten(&actions);
        let x = jt.flatten(&types);
        let rewards = (0..n).map(|i| spec.reward(i, x, a)).collect();
        let next = update_joint(&pi, &gamma, a, spec);
        steps.push(Step {
            t,
            types: types.clone(),
            actions,
            belief: pi,
            rewards,
        });
        for (i, x) in types.iter_mut().enumerate() {
            *x = draw(spec.kernel(i).row(*x, a), rng);
        }
        pi = next;
    }
    (steps, pi)
}

/// Simulate `horizon` steps of equilibrium play. Types are drawn from the
/// initial kernels unless `x_1` is given; prescriptions are taken at the grid
/// point nearest to the current belief.
pub fn sample_trajectory(
    spec: &GameSpec,
    theta: &PolicyGrid,
    pi_1: &ProductBelief,
    x_1: Option<&[usize]>,
    horizon: usize,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, final_belief) = simulate(spec, theta, pi_1, x_1, horizon, &mut rng);
    Trajectory {
        seed,
        policy_id: String::new(),
        steps,
        final_belief,
    }
}

/// Run `k` of an ensemble: seed `base_seed`, ChaCha stream `k`.
fn ensemble_run(
    spec: &GameSpec,
    theta: &PolicyGrid,
    pi_1: &ProductBelief,
    horizon: usize,
    base_seed: u64,
    k: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(k);
    let (steps, final_belief) = simulate(spec, theta, pi_1, None, horizon, &mut rng);
    Trajectory {
        seed: base_seed,
        policy_id: format!("stream {k}"),
        steps,
        final_belief,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningStats {
    pub initial_belief: ProductBelief,
    /// Per run; `None` when the threshold was never reached.
    pub time_to_concentration: Vec<Option<usize>>,
    pub median_time_to_concentration: Option<usize>,
    pub fraction_concentrated: f64,
    pub mean_terminal_accuracy: f64,
    pub mean_discounted_reward: Vec<f64>,
    pub discounted_reward_se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub threshold: f64,
    pub horizon: usize,
    pub seeds: usize,
    pub per_initial: Vec<LearningStats>,
    pub median_time_to_concentration: Option<usize>,
    pub fraction_concentrated: f64,
}

impl EnsembleSummary {
    /// Fraction of all runs concentrated after at most `rounds` belief updates.
    pub fn fraction_within(&self, rounds: usize) -> f64 {
        let all: Vec<&Option<usize>> = self.per_initial.iter().flat_map(|s| &s.time_to_concentration).collect();
        let hit = all.iter().filter(|t| t.is_some_and(|t| t <= rounds + 1)).count();
        hit as f64 / all.len().max(1) as f64
    }
}

/// Median with unreached runs counted as infinitely late.
fn median(times: &[Option<usize>]) -> Option<usize> {
    let mut sorted: Vec<usize> = times.iter().map(|t| t.unwrap_or(usize::MAX)).collect();
    sorted.sort_unstable();
    sorted.get(sorted.len() / 2).copied().filter(|&t| t != usize::MAX)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Simulate `n_seeds` runs from each initial belief (true types drawn from the
/// initial kernels) and summarise learning.
pub fn markov_chain_ensemble(
    spec: &GameSpec,
    theta: &PolicyGrid,
    initial_beliefs: &[ProductBelief],
    n_seeds: usize,
    horizon: usize,
    threshold: f64,
    base_seed: u64,
) -> (EnsembleSummary, Vec<Vec<Trajectory>>) {
    let runs: Vec<Vec<Trajectory>> = initial_beliefs
        .iter()
        .enumerate()
        .map(|(b, pi)| {
            (0..n_seeds)
                .into_par_iter()
                .map(|s| ensemble_run(spec, theta, pi, horizon, base_seed, (b * n_seeds + s) as u64))
                .collect()
        })
        .collect();
    let delta = spec.discount();
    let per_initial: Vec<LearningStats> = initial_beliefs
        .iter()
        .zip(&runs)
        .map(|(pi, trajs)| {
            let ttc: Vec<Option<usize>> = trajs.iter().map(|t| t.time_to_concentration(threshold)).collect();
            let (mean_acc, _) = mean_se(&trajs.iter().map(Trajectory::terminal_accuracy).collect::<Vec<_>>());
            let (means, ses): (Vec<f64>, Vec<f64>) = (0..spec.n_agents())
                .map(|i| mean_se(&trajs.iter().map(|t| t.discounted_reward(i, delta)).collect::<Vec<_>>()))
                .unzip();
            LearningStats {
                initial_belief: pi.clone(),
                median_time_to_concentration: median(&ttc),
                fraction_concentrated: ttc.iter().filter(|t| t.is_some()).count() as f64 / ttc.len().max(1) as f64,
                time_to_concentration: ttc,
                mean_terminal_accuracy: mean_acc,
                mean_discounted_reward: means,
                discounted_reward_se: ses,
            }
        })
        .collect();
    let all: Vec<Option<usize>> = per_initial.iter().flat_map(|s| s.time_to_concentration.clone()).collect();
    let summary = EnsembleSummary {
        threshold,
        horizon,
        seeds: n_seeds,
        median_time_to_concentration: median(&all),
        fraction_concentrated: all.iter().filter(|t| t.is_some()).count() as f64 / all.len().max(1) as f64,
        per_initial,
    };
    (summary, runs)
}

/// Per-round reward of a type with cost `x` under perfectly coordinated
/// alternation, and under the best uncoordinated symmetric mixing.
pub fn coordination_benchmarks(x: f64) -> (f64, f64) {
    let full = 1.0 - x / 2.0;
    (full, full * full)
}

/// Lattice `{a_1, ..., a_k}^2` of two-agent beliefs given by the probability
/// of each agent's first type.
pub fn belief_lattice(levels: &[f64]) -> Vec<ProductBelief> {
    levels
        .iter()
        .flat_map(|&a| levels.iter().map(move |&b| ProductBelief::from_first_type_probs(&[a, b])))
        .collect()
}
