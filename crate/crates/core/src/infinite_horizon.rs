//! Stationary equilibrium generator for the discounted infinite-horizon game:
//! the joint fixed point in `(V, theta)`, approached by repeated backward
//! sweeps from `V = 0`.
//!
//! Sweep `k` is exactly one finite-horizon backward step with terminal reward
//! `V_k`, so intermediate iterates are the values of `k`-stage games. No
//! contraction is assumed: the stage prescriptions are re-solved each sweep
//! and convergence is monitored. With strong discounting the iteration can
//! cycle between stage equilibrium branches; the report then says
//! `converged: false` and carries the last iterate.

use std::sync::Arc;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::game_model::GameSpec;
pub use crate::grid::interpolate_value;
use crate::grid::{BeliefGrid, PolicyGrid, ValueTable};
use crate::stage_game::{all_action_values, StageConfig, StageSolver};
use crate::sweep::sweep;

pub use crate::finite_horizon::SolveError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolveConfig {
    /// Stop when the sup-norm change of `(1 - delta) V` falls below this.
    pub tol_v: f64,
    /// Certificate threshold on the `(1 - delta)`-normalised residual.
    pub tol_res: f64,
    pub max_sweeps: usize,
    pub stage: StageConfig,
    pub max_unconverged_fraction: f64,
    /// Consecutive increasing sweeps that flag oscillation.
    pub oscillation_window: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tol_v: 1e-5,
            tol_res: 1e-4,
            max_sweeps: 2000,
            stage: StageConfig::default(),
            max_unconverged_fraction: 0.05,
            oscillation_window: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub values: ValueTable,
    pub policy: PolicyGrid,
    pub sweeps: usize,
    /// Normalised sup-norm change per sweep.
    pub history: Vec<f64>,
    /// Grid points that changed support pattern, per sweep.
    pub branch_switches: Vec<usize>,
    /// Raw residual (value identity and best-response gaps).
    pub residual: f64,
    /// `(1 - delta) * residual`.
    pub normalized_residual: f64,
    pub converged: bool,
    pub oscillation_flagged: bool,
}

impl SolveReport {
    pub fn last_change(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Iterate sweeps until the normalised value change is at most `tol_v`.
pub fn solve_fixed_point(
    spec: &GameSpec,
    grid: Arc<BeliefGrid>,
    config: &SolveConfig,
) -> Result<SolveReport, SolveError> {
    let delta = spec.discount();
    if !(0.0..1.0).contains(&delta) {
        return Err(SolveError::BadDiscount);
    }
    let scale = 1.0 - delta;
    let solver = StageSolver::new(spec, config.stage.clone());
    let mut values = ValueTable::zeros(spec, grid.clone());
    let mut policy: Option<PolicyGrid> = None;
    let mut history = Vec::new();
    let mut switches = Vec::new();
    let mut rising = 0usize;
    let mut oscillation_flagged = false;
    let mut converged_values = false;

    for k in 1..=config.max_sweeps.max(1) {
        let out = sweep(spec, &grid, &values, &solver, policy.as_ref());
        let fraction = out.policy.unconverged_fraction();
        if fraction > config.max_unconverged_fraction {
            return Err(SolveError::TooManyUnconverged {
                stage: format!("sweep {k}"),
                fraction,
                cap: config.max_unconverged_fraction,
            });
        }
        let change = scale * out.values.sup_distance(&values);
        if let Some(&prev) = history.last() {
            if change > prev {
                rising += 1;
                if rising >= config.oscillation_window {
                    oscillation_flagged = true;
                }
            } else {
                rising = 0;
            }
        }
        debug!("sweep {k}: change {change:.3e}, switches {}", out.branch_switches);
        history.push(change);
        switches.push(out.branch_switches);
        values = out.values;
        policy = Some(out.policy);
        // with no discounting the sweep does not depend on its input
        if delta == 0.0 || change <= config.tol_v {
            converged_values = true;
            break;
        }
    }
    let policy = policy.expect("at least one sweep");
    let residual = residual(spec, &values, &policy);
    let normalized_residual = scale * residual;
    let converged = converged_values && normalized_residual <= config.tol_res;
    info!(
        "fixed point: {} sweeps, last change {:.3e}, residual {:.3e}, converged {converged}",
        history.len(),
        history.last().copied().unwrap_or(0.0),
        normalized_residual
    );
    Ok(SolveReport {
        values,
        policy,
        sweeps: history.len(),
        history,
        branch_switches: switches,
        residual,
        normalized_residual,
        converged,
        oscillation_flagged,
    })
}

/// Sup over grid points, agents and types of the identity defect
/// `|V - E^theta[R + delta V(F(pi, theta, A), X')]|` and of the best-response
/// gaps of `theta` against `V`.
pub fn residual(spec: &GameSpec, v: &ValueTable, theta: &PolicyGrid) -> f64 {
    let grid = v.grid();
    (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let belief = grid.point(p);
            let gamma = theta.at(p);
            let av = all_action_values(spec, &belief, gamma, v);
            let mut worst = av.max_gap(gamma);
            for i in 0..spec.n_agents() {
                for x in 0..spec.n_types(i) {
                    worst = worst.max((v.get(p, i, x) - av.achieved(gamma, i, x)).abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}
