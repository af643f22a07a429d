//! Common public beliefs and their update from observed action profiles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game_model::{GameSpec, Kernel};

/// Bayes denominators at or below this are treated as zero-probability
/// observations, and the update falls back to the plain push-forward.
pub const ZERO_DENOMINATOR: f64 = 1e-12;

/// Product of per-agent marginals over own types. The joint belief is never
/// materialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductBelief {
    pub marginals: Vec<Vec<f64>>,
}

impl ProductBelief {
    pub fn new(marginals: Vec<Vec<f64>>) -> Self {
        Self { marginals }
    }

    /// Prior built from the initial kernels.
    pub fn initial(spec: &GameSpec) -> Self {
        Self::new(
            (0..spec.n_agents())
                .map(|i| spec.initial(i).to_vec())
                .collect(),
        )
    }

    /// Two-type agents described by the probability of their first type.
    pub fn from_first_type_probs(probs: &[f64]) -> Self {
        Self::new(probs.iter().map(|&p| vec![p, 1.0 - p]).collect())
    }

    pub fn n_agents(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginal(&self, agent: usize) -> &[f64] {
        &self.marginals[agent]
    }

    /// Probability of the joint type profile `joint_type`.
    pub fn joint_prob(&self, spec: &GameSpec, joint_type: usize) -> f64 {
        let jt = spec.joint_types();
        (0..self.n_agents())
            .map(|i| self.marginals[i][jt.component(joint_type, i)])
            .product()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.marginals.iter().all(|m| is_distribution(m, tol))
    }
}

/// Per-agent, per-own-type action distributions: `gamma[i][x][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    pub gamma: Vec<Vec<Vec<f64>>>,
}

impl Prescription {
    pub fn new(gamma: Vec<Vec<Vec<f64>>>) -> Self {
        Self { gamma }
    }

    pub fn uniform(spec: &GameSpec) -> Self {
        Self::new(
            (0..spec.n_agents())
                .map(|i| {
                    let m = spec.n_actions(i);
                    vec![vec![1.0 / m as f64; m]; spec.n_types(i)]
                })
                .collect(),
        )
    }

    /// Every type of every agent plays `actions[i]` with certainty.
    pub fn pure(spec: &GameSpec, actions: &[Vec<usize>]) -> Self {
        Self::new(
            (0..spec.n_agents())
                .map(|i| {
                    actions[i]
                        .iter()
                        .map(|&a| {
                            let mut v = vec![0.0; spec.n_actions(i)];
                            v[a] = 1.0;
                            v
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn agent(&self, agent: usize) -> &[Vec<f64>] {
        &self.gamma[agent]
    }

    #[inline]
    pub fn prob(&self, agent: usize, own_type: usize, action: usize) -> f64 {
        self.gamma[agent][own_type][action]
    }

    /// Same prescription with agents 0 and 1 exchanged.
    pub fn swapped(&self) -> Self {
        let mut g = self.gamma.clone();
        g.swap(0, 1);
        Self::new(g)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.gamma.iter().flatten().all(|d| is_distribution(d, tol))
    }

    /// Largest absolute difference between entries.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.gamma
            .iter()
            .flatten()
            .flatten()
            .zip(other.gamma.iter().flatten().flatten())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub fn is_distribution(v: &[f64], tol: f64) -> bool {
    v.iter().all(|p| p.is_finite() && *p >= -tol) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Unconditional push-forward `sum_x pi(x) Q(. | x, a)`.
pub fn push_forward(pi_i: &[f64], joint_action: usize, kernel: &Kernel<'_>) -> Vec<f64> {
    let mut out = vec![0.0; kernel.n_types()];
    for (x, &p) in pi_i.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, q) in out.iter_mut().zip(kernel.row(x, joint_action)) {
            *o += p * q;
        }
    }
    out
}

/// Bayes update of agent `i`'s marginal after observing `joint_action`, given
/// the prescription `gamma_i` it was expected to follow, followed by the type
/// transition. Zero-probability observations fall back to [`push_forward`].
pub fn update_marginal(
    pi_i: &[f64],
    gamma_i: &[Vec<f64>],
    joint_action: usize,
    kernel: &Kernel<'_>,
) -> Vec<f64> {
    let own = kernel.own_action(joint_action);
    let den: f64 = pi_i
        .iter()
        .zip(gamma_i)
        .map(|(p, g)| p * g[own])
        .sum();
    if den <= ZERO_DENOMINATOR {
        return push_forward(pi_i, joint_action, kernel);
    }
    let mut out = vec![0.0; kernel.n_types()];
    for (x, (&p, g)) in pi_i.iter().zip(gamma_i).enumerate() {
        let w = p * g[own] / den;
        if w == 0.0 {
            continue;
        }
        for (o, q) in out.iter_mut().zip(kernel.row(x, joint_action)) {
            *o += w * q;
        }
    }
    out
}

/// Per-agent update of a product belief. Only `gamma` is consulted, never any
/// other strategy.
pub fn update_joint(
    pi: &ProductBelief,
    gamma: &Prescription,
    joint_action: usize,
    spec: &GameSpec,
) -> ProductBelief {
    ProductBelief::new(
        (0..spec.n_agents())
            .map(|j| update_marginal(&pi.marginals[j], &gamma.gamma[j], joint_action, &spec.kernel(j)))
            .collect(),
    )
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no prescription available at step {step} for belief {belief:?}")]
    Undefined { step: usize, belief: Vec<Vec<f64>> },
    #[error("history of length {len} exceeds horizon {horizon}")]
    HistoryTooLong { len: usize, horizon: usize },
}

/// Anything that maps (step, public belief) to a prescription profile: a
/// stationary policy grid, or a time-indexed sequence of them.
pub trait PolicyLookup: Sync {
    fn prescription(&self, step: usize, belief: &ProductBelief) -> Result<Prescription, PolicyError>;
}

impl<F> PolicyLookup for F
where
    F: Fn(usize, &ProductBelief) -> Result<Prescription, PolicyError> + Sync,
{
    fn prescription(&self, step: usize, belief: &ProductBelief) -> Result<Prescription, PolicyError> {
        self(step, belief)
    }
}

/// Forward belief recursion under a policy. Returns `actions.len() + 1`
/// beliefs starting at `pi_1`; step indices are zero-based.
pub fn forward_beliefs(
    spec: &GameSpec,
    policy: &dyn PolicyLookup,
    actions: &[usize],
    pi_1: &ProductBelief,
) -> Result<Vec<ProductBelief>, PolicyError> {
    let mut out = Vec::with_capacity(actions.len() + 1);
    out.push(pi_1.clone());
    for (t, &a) in actions.iter().enumerate() {
        let current = &out[t];
        let gamma = policy.prescription(t, current)?;
        let next = update_joint(current, &gamma, a, spec);
        out.push(next);
    }
    Ok(out)
}
