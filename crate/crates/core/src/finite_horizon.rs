//! Backward recursion for the finite-horizon game with a belief-based
//! terminal reward.

use std::sync::Arc;

use log::debug;
use thiserror::Error;

use crate::belief::{forward_beliefs, PolicyError, PolicyLookup, Prescription, ProductBelief};
use crate::game_model::GameSpec;
pub use crate::grid::{PolicyGrid, ValueTable};
use crate::stage_game::{StageConfig, StageSolver};
use crate::sweep::sweep;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("{fraction:.4} of grid points failed to reach a stage equilibrium at {stage} (cap {cap})")]
    TooManyUnconverged {
        stage: String,
        fraction: f64,
        cap: f64,
    },
    #[error("discount must be < 1")]
    BadDiscount,
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonConfig {
    pub stage: StageConfig,
    /// Abort when more than this fraction of grid points fail at one stage.
    pub max_unconverged_fraction: f64,
}

impl Default for FiniteHorizonConfig {
    fn default() -> Self {
        Self {
            stage: StageConfig::default(),
            max_unconverged_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    /// `values[t - 1]` is `V_t` for `t = 1..=T+1`; the last entry is the terminal reward.
    pub values: Vec<ValueTable>,
    /// `policies[t - 1]` is `theta_t` for `t = 1..=T`.
    pub policies: Vec<PolicyGrid>,
}

impl FiniteHorizonSolution {
    pub fn horizon(&self) -> usize {
        self.policies.len()
    }
}

/// Run the recursion `t = T, ..., 1` starting from `V_{T+1} = terminal`.
/// Each stage is warm-started from the stage above it (and stage `T` from
/// `warm`, when given).
pub fn backward_solve(
    spec: &GameSpec,
    horizon: usize,
    terminal: &ValueTable,
    config: &FiniteHorizonConfig,
    warm: Option<&PolicyGrid>,
) -> Result<FiniteHorizonSolution, SolveError> {
    if horizon == 0 {
        return Err(SolveError::ZeroHorizon);
    }
    let grid = terminal.grid().clone();
    let solver = StageSolver::new(spec, config.stage.clone());
    let mut values = vec![terminal.clone()];
    let mut policies: Vec<PolicyGrid> = Vec::with_capacity(horizon);
    for t in (1..=horizon).rev() {
        let next = values.last().expect("nonempty");
        let warm_start = policies.last().or(warm);
        let out = sweep(spec, &grid, next, &solver, warm_start);
        let fraction = out.policy.unconverged_fraction();
        debug!("stage {t}: unconverged fraction {fraction:.4}, branch switches {}", out.branch_switches);
        if fraction > config.max_unconverged_fraction {
            return Err(SolveError::TooManyUnconverged {
                stage: format!("stage {t}"),
                fraction,
                cap: config.max_unconverged_fraction,
            });
        }
        values.push(out.values);
        policies.push(out.policy);
    }
    values.reverse();
    policies.reverse();
    Ok(FiniteHorizonSolution { values, policies })
}

/// Equilibrium strategy of the finite-horizon game, evaluated from public
/// action histories: beliefs are recomputed forward from `mu_initial` with
/// the stage policies, then the current stage policy is applied.
#[derive(Debug, Clone)]
pub struct FinitePolicy {
    thetas: Vec<PolicyGrid>,
    mu_initial: ProductBelief,
}

/// Time-indexed nearest-point lookup into a sequence of stage policies.
struct StagedLookup<'a>(&'a [PolicyGrid]);

impl PolicyLookup for StagedLookup<'_> {
    fn prescription(&self, step: usize, belief: &ProductBelief) -> Result<Prescription, PolicyError> {
        match self.0.get(step) {
            Some(theta) => Ok(theta.nearest(belief).clone()),
            None => Err(PolicyError::Undefined {
                step,
                belief: belief.marginals.clone(),
            }),
        }
    }
}

impl FinitePolicy {
    pub fn horizon(&self) -> usize {
        self.thetas.len()
    }

    /// Public belief after `history` (a sequence of joint actions).
    pub fn belief_after(&self, spec: &GameSpec, history: &[usize]) -> Result<ProductBelief, PolicyError> {
        if history.len() >= self.thetas.len() {
            return Err(PolicyError::HistoryTooLong {
                len: history.len(),
                horizon: self.thetas.len(),
            });
        }
        let beliefs = forward_beliefs(spec, &StagedLookup(&self.thetas), history, &self.mu_initial)?;
        Ok(beliefs.into_iter().last().expect("nonempty"))
    }

    /// `beta_t^i(. | h_t^i)` at `t = history.len() + 1`.
    pub fn action_distribution(
        &self,
        spec: &GameSpec,
        history: &[usize],
        agent: usize,
        own_type: usize,
    ) -> Result<Vec<f64>, PolicyError> {
        let belief = self.belief_after(spec, history)?;
        let theta = &self.thetas[history.len()];
        Ok(theta.nearest(&belief).gamma[agent][own_type].clone())
    }
}

impl PolicyLookup for FinitePolicy {
    fn prescription(&self, step: usize, belief: &ProductBelief) -> Result<Prescription, PolicyError> {
        StagedLookup(&self.thetas).prescription(step, belief)
    }
}

pub fn finite_policy(theta_seq: Vec<PolicyGrid>, mu_initial: ProductBelief) -> FinitePolicy {
    FinitePolicy {
        thetas: theta_seq,
        mu_initial,
    }
}

/// Helper: zero terminal reward on `grid`.
pub fn zero_terminal(spec: &GameSpec, grid: Arc<crate::grid::BeliefGrid>) -> ValueTable {
    ValueTable::zeros(spec, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game_model::{public_goods_spec, GameSpec, SpecFile};
    use crate::grid::BeliefGrid;

    fn sym() -> FiniteHorizonConfig {
        FiniteHorizonConfig {
            stage: StageConfig {
                symmetric: true,
                ..StageConfig::default()
            },
            ..FiniteHorizonConfig::default()
        }
    }

    #[test]
    fn zero_horizon_rejected() {
        let s = public_goods_spec(1.2, 0.2, 0.5).unwrap();
        let g = Arc::new(BeliefGrid::new(&s, 0.25).unwrap());
        assert!(matches!(
            backward_solve(&s, 0, &zero_terminal(&s, g), &sym(), None),
            Err(SolveError::ZeroHorizon)
        ));
    }

    #[test]
    fn zero_game_has_zero_values() {
        let mut f = public_goods_spec(1.2, 0.2, 0.7).unwrap().to_file();
        for r in f.reward.iter_mut().flatten().flatten() {
            *r = 0.0;
        }
        let s = GameSpec::from_file(f).unwrap();
        let g = Arc::new(BeliefGrid::new(&s, 0.25).unwrap());
        let sol = backward_solve(&s, 3, &zero_terminal(&s, g), &sym(), None).unwrap();
        assert_eq!(sol.values.len(), 4);
        for v in &sol.values {
            assert_eq!(v.max_abs(), 0.0);
        }
        for p in &sol.policies {
            assert_eq!(p.unconverged_fraction(), 0.0);
        }
    }

    #[test]
    fn values_bounded_by_discounted_sum() {
        let s = public_goods_spec(1.2, 0.2, 0.8).unwrap();
        let g = Arc::new(BeliefGrid::new(&s, 0.1).unwrap());
        let terminal = ValueTable::from_fn(&s, g, |b, _, x| 2.0 * b.marginals[0][x] - 1.0);
        let t_max = 4;
        let sol = backward_solve(&s, t_max, &terminal, &sym(), None).unwrap();
        let r = s.max_abs_reward();
        let gmax = terminal.max_abs();
        let d = s.discount();
        for t in 1..=t_max {
            let k = (t_max + 1 - t) as i32;
            let bound = r * (1.0 - d.powi(k)) / (1.0 - d) + d.powi(k) * gmax + 1e-6;
            assert!(sol.values[t - 1].max_abs() <= bound, "t={t}");
        }
    }

    #[test]
    fn single_agent_chain_matches_dynamic_programming() {
        // One agent, one type: a deterministic two-armed choice repeated T times.
        let s = GameSpec::from_file(SpecFile {
            agents: 1,
            types: vec![vec!["t".into()]],
            actions: vec![vec!["a".into(), "b".into()]],
            q0: None,
            q: vec![vec![vec![vec![1.0], vec![1.0]]]],
            reward: vec![vec![vec![0.25, 1.0]]],
            delta: 0.5,
        })
        .unwrap();
        let g = Arc::new(BeliefGrid::new(&s, 0.5).unwrap());
        let sol = backward_solve(&s, 3, &zero_terminal(&s, g), &FiniteHorizonConfig::default(), None).unwrap();
        assert!((sol.values[0].get(0, 0, 0) - (1.0 + 0.5 + 0.25)).abs() < 1e-12);
        assert_eq!(sol.policies[0].at(0).gamma[0][0], vec![0.0, 1.0]);
    }

    #[test]
    fn finite_policy_lookups() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let g = Arc::new(BeliefGrid::new(&s, 0.1).unwrap());
        let sol = backward_solve(&s, 2, &zero_terminal(&s, g), &sym(), None).unwrap();
        let mu = ProductBelief::from_first_type_probs(&[0.5, 0.5]);
        let pol = finite_policy(sol.policies.clone(), mu.clone());
        let d = pol.action_distribution(&s, &[], 0, 1).unwrap();
        assert_eq!(d, sol.policies[0].nearest(&mu).gamma[0][1]);
        // both low types contribute, high types never: (1, 1) reveals both as low
        let a = s.joint_actions().flatten(&[1, 1]);
        let b = pol.belief_after(&s, &[a]).unwrap();
        assert_eq!(b.marginals, vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        // high types never contribute, so (1, 1) is off path for nobody; (0, 0)
        // reveals both as high
        let a0 = s.joint_actions().flatten(&[0, 0]);
        let b = pol.belief_after(&s, &[a0]).unwrap();
        assert_eq!(b.marginals, vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(pol.action_distribution(&s, &[a, a], 0, 0).is_err());
    }
}
