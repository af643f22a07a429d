//! One-stage objective, best responses and the per-belief fixed point in the
//! prescription profile.
//!
//! For agent `i` of type `x` at public belief `pi`, the value of own action
//! `a_i` against prescription profile `gamma` and continuation value `V` is
//!
//! ```text
//! q(a_i) = sum_{x_-i, a_-i, x'_i} pi_-i(x_-i) gamma_-i(a_-i | x_-i) Q_i(x'_i | x, a)
//!          [ R_i(x, a) + delta V_i(F(pi, gamma, a), x'_i) ]
//! ```
//!
//! The continuation belief is always updated with the equilibrium `gamma`,
//! so the objective is linear in agent `i`'s own mixing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{update_joint, Prescription, ProductBelief};
use crate::game_model::GameSpec;

/// Types with belief mass at or below this do not influence anybody else and
/// are assigned a best response after the rest of the profile is solved.
const INACTIVE_MASS: f64 = 1e-12;

/// Continuation value `V^i(pi, x^i)` for every (agent, own type).
pub trait ContinuationValue: Sync {
    /// Write `V^i(belief, x)` into `out[spec.type_offset(i) + x]`.
    fn evaluate(&self, belief: &ProductBelief, out: &mut [f64]);
}

/// `V = 0` everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroValue;

impl ContinuationValue for ZeroValue {
    fn evaluate(&self, _belief: &ProductBelief, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `V = c` everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantValue(pub f64);

impl ContinuationValue for ConstantValue {
    fn evaluate(&self, _belief: &ProductBelief, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.0);
    }
}

/// `q[i][x][a]` for every agent, own type and own action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionValues {
    pub q: Vec<Vec<Vec<f64>>>,
}

impl ActionValues {
    pub fn of(&self, agent: usize, own_type: usize) -> &[f64] {
        &self.q[agent][own_type]
    }

    /// Expected value of following `gamma[i](. | x)`.
    pub fn achieved(&self, gamma: &Prescription, agent: usize, own_type: usize) -> f64 {
        dot(&gamma.gamma[agent][own_type], &self.q[agent][own_type])
    }

    /// Best-response gap `max_a q(a) - gamma . q` for one (agent, type).
    pub fn gap(&self, gamma: &Prescription, agent: usize, own_type: usize) -> f64 {
        let q = &self.q[agent][own_type];
        let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (best - dot(&gamma.gamma[agent][own_type], q)).max(0.0)
    }

    /// Largest best-response gap over all agents and types.
    pub fn max_gap(&self, gamma: &Prescription) -> f64 {
        let mut m = 0.0_f64;
        for (i, per_type) in self.q.iter().enumerate() {
            for x in 0..per_type.len() {
                m = m.max(self.gap(gamma, i, x));
            }
        }
        m
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact-enumeration action values for all agents and types. When the
/// discount is zero the continuation value is never evaluated.
pub fn all_action_values(
    spec: &GameSpec,
    pi: &ProductBelief,
    gamma: &Prescription,
    v: &dyn ContinuationValue,
) -> ActionValues {
    let n = spec.n_agents();
    let jt = spec.joint_types();
    let ja = spec.joint_actions();
    let delta = spec.discount();
    let total = spec.total_types();

    // expected continuation C_i(x, a) = sum_x' Q_i(x' | x, a) V_i(F(pi, gamma, a), x')
    let mut expected_cont: Vec<Vec<Vec<f64>>> = Vec::new();
    if delta != 0.0 {
        expected_cont = (0..n)
            .map(|i| vec![vec![0.0; ja.len()]; spec.n_types(i)])
            .collect();
        let mut buf = vec![0.0; total];
        for a in 0..ja.len() {
            let next = update_joint(pi, gamma, a, spec);
            v.evaluate(&next, &mut buf);
            for (i, per_type) in expected_cont.iter_mut().enumerate() {
                let kernel = spec.kernel(i);
                let off = spec.type_offset(i);
                for (x, row) in per_type.iter_mut().enumerate() {
                    row[a] = dot(kernel.row(x, a), &buf[off..off + spec.n_types(i)]);
                }
            }
        }
    }

    let mut q: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| vec![vec![0.0; spec.n_actions(i)]; spec.n_types(i)])
        .collect();
    let mut factor = vec![0.0; n];
    let mut prefix = vec![1.0; n + 1];
    let mut suffix = vec![1.0; n + 1];
    let mut xs = vec![0usize; n];
    let mut acts = vec![0usize; n];
    for xf in 0..jt.len() {
        for (i, x) in xs.iter_mut().enumerate() {
            *x = jt.component(xf, i);
        }
        for af in 0..ja.len() {
            for j in 0..n {
                acts[j] = ja.component(af, j);
                factor[j] = pi.marginals[j][xs[j]] * gamma.gamma[j][xs[j]][acts[j]];
            }
            for j in 0..n {
                prefix[j + 1] = prefix[j] * factor[j];
            }
            for j in (0..n).rev() {
                suffix[j] = suffix[j + 1] * factor[j];
            }
            for i in 0..n {
                let w = prefix[i] * suffix[i + 1];
                if w == 0.0 {
                    continue;
                }
                let mut payoff = spec.reward(i, xf, af);
                if delta != 0.0 {
                    payoff += delta * expected_cont[i][xs[i]][af];
                }
                q[i][xs[i]][acts[i]] += w * payoff;
            }
        }
    }
    ActionValues { q }
}

/// Action values of one agent and own type.
pub fn action_values(
    spec: &GameSpec,
    pi: &ProductBelief,
    gamma: &Prescription,
    v: &dyn ContinuationValue,
    agent: usize,
    own_type: usize,
) -> Vec<f64> {
    all_action_values(spec, pi, gamma, v).q[agent][own_type].clone()
}

/// Actions whose value is within `tie_tol` of the maximum, and the maximum.
pub fn best_response(q: &[f64], tie_tol: f64) -> (Vec<usize>, f64) {
    let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let set = q
        .iter()
        .enumerate()
        .filter(|(_, v)| **v >= best - tie_tol)
        .map(|(a, _)| a)
        .collect();
    (set, best)
}

/// Uniform distribution over the best-response set.
fn uniform_best_response(q: &[f64], tie_tol: f64) -> Vec<f64> {
    let (set, _) = best_response(q, tie_tol);
    let mut out = vec![0.0; q.len()];
    let w = 1.0 / set.len() as f64;
    for a in set {
        out[a] = w;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    pub damping: f64,
    pub max_iterations: usize,
    pub eps_eq: f64,
    pub tie_tol: f64,
    /// Prefer agent-symmetric solutions in two-agent symmetric games.
    pub symmetric: bool,
    /// Smallest probability a mixed component may put on either action.
    pub min_mix: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iterations: 500,
            eps_eq: 1e-6,
            tie_tol: 1e-9,
            symmetric: false,
            min_mix: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageFixedPointReport {
    pub prescription: Prescription,
    /// Max best-response gap over (agent, type).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// Achieved stage value `gamma . q` per (agent, type), flat by type offset.
    pub values: Vec<f64>,
}

/// Per-belief solver. Games where every agent has exactly two actions are
/// solved by support enumeration with Newton solves of the (nonlinear)
/// indifference conditions; otherwise, or if that fails, by damped
/// best-response iteration from a deterministic start set.
pub struct StageSolver<'a> {
    spec: &'a GameSpec,
    config: StageConfig,
    binary: bool,
    symmetric_game: bool,
}

/// Support state of one (agent, type) in a two-action game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Support {
    Zero,
    One,
    Mixed,
}

struct Candidate {
    gamma: Prescription,
    residual: f64,
}

impl<'a> StageSolver<'a> {
    pub fn new(spec: &'a GameSpec, config: StageConfig) -> Self {
        let binary = (0..spec.n_agents()).all(|i| spec.n_actions(i) == 2);
        let symmetric_game = config.symmetric && spec.is_two_agent_symmetric();
        Self {
            spec,
            config,
            binary,
            symmetric_game,
        }
    }

    pub fn config(&self) -> &StageConfig {
        &self.config
    }

    /// Whether symmetric selection is active for this game.
    pub fn symmetric(&self) -> bool {
        self.symmetric_game
    }

    pub fn solve(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        warm: Option<&Prescription>,
    ) -> StageFixedPointReport {
        let diagonal = self.symmetric_game && pi.marginals[0] == pi.marginals[1];
        let mut restarts = 0;
        let mut iterations = 0;
        let mut best: Option<Candidate> = None;

        if self.binary {
            if let Some(c) = self.solve_binary(pi, v, warm, diagonal, &mut restarts, &mut iterations) {
                if c.residual <= self.config.eps_eq {
                    return self.finish(pi, v, c.gamma, iterations, restarts);
                }
                best = Some(c);
            }
        }

        for start in self.start_set(warm, diagonal) {
            restarts += 1;
            let (c, used) = self.damped_best_response(pi, v, start);
            iterations += used;
            if c.residual <= self.config.eps_eq {
                return self.finish(pi, v, c.gamma, iterations, restarts);
            }
            if best.as_ref().is_none_or(|b| c.residual < b.residual) {
                best = Some(c);
            }
        }
        let best = best.expect("start set is nonempty");
        self.finish(pi, v, best.gamma, iterations, restarts)
    }

    fn finish(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        gamma: Prescription,
        iterations: usize,
        restarts: usize,
    ) -> StageFixedPointReport {
        let av = all_action_values(self.spec, pi, &gamma, v);
        let residual = av.max_gap(&gamma);
        let mut values = vec![0.0; self.spec.total_types()];
        for i in 0..self.spec.n_agents() {
            for x in 0..self.spec.n_types(i) {
                values[self.spec.type_offset(i) + x] = av.achieved(&gamma, i, x);
            }
        }
        StageFixedPointReport {
            converged: residual <= self.config.eps_eq,
            prescription: gamma,
            residual,
            iterations,
            restarts,
            values,
        }
    }

    fn start_set(&self, warm: Option<&Prescription>, diagonal: bool) -> Vec<Prescription> {
        const MAX_PURE_STARTS: usize = 256;
        let spec = self.spec;
        let mut starts = Vec::new();
        if let Some(w) = warm {
            starts.push(w.clone());
        }
        // pure prescriptions, enumerated over (agent, type) slots
        let slots: Vec<(usize, usize)> = (0..spec.n_agents())
            .flat_map(|i| (0..spec.n_types(i)).map(move |x| (i, x)))
            .filter(|&(i, _)| !diagonal || i == 0)
            .collect();
        let sizes: Vec<usize> = slots.iter().map(|&(i, _)| spec.n_actions(i)).collect();
        let count = sizes.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
        if let Some(count) = count.filter(|&c| c <= MAX_PURE_STARTS) {
            for k in 0..count {
                let mut rem = k;
                let mut choice: Vec<Vec<usize>> =
                    (0..spec.n_agents()).map(|i| vec![0; spec.n_types(i)]).collect();
                for (s, &(i, x)) in slots.iter().enumerate().rev() {
                    choice[i][x] = rem % sizes[s];
                    rem /= sizes[s];
                }
                if diagonal {
                    choice[1] = choice[0].clone();
                }
                starts.push(Prescription::pure(spec, &choice));
            }
        }
        starts.push(Prescription::uniform(spec));
        starts
    }

    fn damped_best_response(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        start: Prescription,
    ) -> (Candidate, usize) {
        let lambda = self.config.damping;
        let mut gamma = start;
        let mut best = Candidate {
            gamma: gamma.clone(),
            residual: f64::INFINITY,
        };
        for it in 0..self.config.max_iterations {
            let av = all_action_values(self.spec, pi, &gamma, v);
            let residual = av.max_gap(&gamma);
            if residual < best.residual {
                best = Candidate {
                    gamma: gamma.clone(),
                    residual,
                };
            }
            if residual <= self.config.eps_eq {
                if let Some(c) = self.purify(pi, v, &gamma, &av) {
                    return (c, it + 1);
                }
                return (best, it + 1);
            }
            for (i, per_type) in gamma.gamma.iter_mut().enumerate() {
                for (x, dist) in per_type.iter_mut().enumerate() {
                    let br = uniform_best_response(&av.q[i][x], self.config.tie_tol);
                    for (p, b) in dist.iter_mut().zip(&br) {
                        *p = (1.0 - lambda) * *p + lambda * b;
                    }
                }
            }
        }
        (best, self.config.max_iterations)
    }

    /// Snap components with a unique best response to that pure action; kept
    /// only if the result is still an equilibrium.
    fn purify(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        gamma: &Prescription,
        av: &ActionValues,
    ) -> Option<Candidate> {
        let mut snapped = gamma.clone();
        for (i, per_type) in snapped.gamma.iter_mut().enumerate() {
            for (x, dist) in per_type.iter_mut().enumerate() {
                let (set, _) = best_response(&av.q[i][x], self.config.tie_tol);
                if set.len() == 1 {
                    dist.iter_mut().for_each(|p| *p = 0.0);
                    dist[set[0]] = 1.0;
                }
            }
        }
        let residual = all_action_values(self.spec, pi, &snapped, v).max_gap(&snapped);
        (residual <= self.config.eps_eq).then_some(Candidate {
            gamma: snapped,
            residual,
        })
    }

    // ---- two-action games: support enumeration ----

    /// Free (agent, type) components: all active slots, or only agent 0's on
    /// a symmetric diagonal.
    fn components(&self, pi: &ProductBelief, diagonal: bool) -> Vec<(usize, usize)> {
        let spec = self.spec;
        (0..spec.n_agents())
            .filter(|&i| !diagonal || i == 0)
            .flat_map(|i| (0..spec.n_types(i)).map(move |x| (i, x)))
            .filter(|&(i, x)| pi.marginals[i][x] > INACTIVE_MASS)
            .collect()
    }

    fn assemble(
        &self,
        comps: &[(usize, usize)],
        support: &[Support],
        mixed: &[f64],
        diagonal: bool,
    ) -> Prescription {
        let mut gamma = Prescription::uniform(self.spec);
        let mut m = 0;
        for (&(i, x), s) in comps.iter().zip(support) {
            let p = match s {
                Support::Zero => 0.0,
                Support::One => 1.0,
                Support::Mixed => {
                    m += 1;
                    mixed[m - 1]
                }
            };
            gamma.gamma[i][x] = vec![1.0 - p, p];
        }
        if diagonal {
            gamma.gamma[1] = gamma.gamma[0].clone();
        }
        gamma
    }

    /// Assign best responses to inactive types (they influence nobody).
    fn fill_inactive(&self, pi: &ProductBelief, v: &dyn ContinuationValue, gamma: &mut Prescription, diagonal: bool) {
        let spec = self.spec;
        let inactive: Vec<(usize, usize)> = (0..spec.n_agents())
            .flat_map(|i| (0..spec.n_types(i)).map(move |x| (i, x)))
            .filter(|&(i, x)| pi.marginals[i][x] <= INACTIVE_MASS)
            .collect();
        if inactive.is_empty() {
            return;
        }
        let av = all_action_values(spec, pi, gamma, v);
        for (i, x) in inactive {
            gamma.gamma[i][x] = uniform_best_response(&av.q[i][x], self.config.tie_tol);
        }
        if diagonal {
            gamma.gamma[1] = gamma.gamma[0].clone();
        }
    }

    fn indifference(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        comps: &[(usize, usize)],
        support: &[Support],
        mixed: &[f64],
        diagonal: bool,
    ) -> Vec<f64> {
        let gamma = self.assemble(comps, support, mixed, diagonal);
        let av = all_action_values(self.spec, pi, &gamma, v);
        comps
            .iter()
            .zip(support)
            .filter(|(_, s)| **s == Support::Mixed)
            .map(|(&(i, x), _)| av.q[i][x][1] - av.q[i][x][0])
            .collect()
    }

    /// Damped Newton on the indifference conditions of the mixed components.
    #[allow(clippy::too_many_arguments)]
    fn newton(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        comps: &[(usize, usize)],
        support: &[Support],
        start: &[f64],
        diagonal: bool,
        iterations: &mut usize,
    ) -> Option<Vec<f64>> {
        let lo = self.config.min_mix;
        let hi = 1.0 - self.config.min_mix;
        const TOL: f64 = 1e-12;
        const FD: f64 = 1e-7;
        let m = start.len();
        let mut u: Vec<f64> = start.iter().map(|p| p.clamp(lo, hi)).collect();
        let mut f = self.indifference(pi, v, comps, support, &u, diagonal);
        let norm = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut fn_ = norm(&f);
        let mut stalls = 0;
        for _ in 0..60 {
            *iterations += 1;
            if fn_ <= TOL {
                return Some(u);
            }
            let mut jac = DMatrix::<f64>::zeros(m, m);
            for c in 0..m {
                let h = if u[c] + FD <= hi { FD } else { -FD };
                let mut up = u.clone();
                up[c] += h;
                let fp = self.indifference(pi, v, comps, support, &up, diagonal);
                for r in 0..m {
                    jac[(r, c)] = (fp[r] - f[r]) / h;
                }
            }
            let rhs = DVector::from_iterator(m, f.iter().map(|v| -v));
            let step = jac.lu().solve(&rhs)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1.0 / 64.0 {
                let trial: Vec<f64> = u
                    .iter()
                    .zip(step.iter())
                    .map(|(x, d)| (x + alpha * d).clamp(lo, hi))
                    .collect();
                let ft = self.indifference(pi, v, comps, support, &trial, diagonal);
                let nt = norm(&ft);
                if nt < fn_ {
                    u = trial;
                    f = ft;
                    fn_ = nt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                stalls += 1;
                if stalls >= 2 {
                    break;
                }
            } else {
                stalls = 0;
            }
        }
        (fn_ <= TOL).then_some(u)
    }

    /// Check a support profile's solution and turn it into a candidate.
    fn candidate(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        comps: &[(usize, usize)],
        support: &[Support],
        mixed: &[f64],
        diagonal: bool,
    ) -> Option<Candidate> {
        let mut gamma = self.assemble(comps, support, mixed, diagonal);
        self.fill_inactive(pi, v, &mut gamma, diagonal);
        let av = all_action_values(self.spec, pi, &gamma, v);
        let residual = av.max_gap(&gamma);
        (residual <= self.config.eps_eq).then_some(Candidate { gamma, residual })
    }

    fn classify(&self, warm: &Prescription, comps: &[(usize, usize)]) -> (Vec<Support>, Vec<f64>) {
        let mut support = Vec::with_capacity(comps.len());
        let mut mixed = Vec::new();
        for &(i, x) in comps {
            let p = warm.gamma[i][x][1];
            if p < self.config.min_mix {
                support.push(Support::Zero);
            } else if p > 1.0 - self.config.min_mix {
                support.push(Support::One);
            } else {
                support.push(Support::Mixed);
                mixed.push(p);
            }
        }
        (support, mixed)
    }

    fn asymmetry(gamma: &Prescription) -> f64 {
        gamma.gamma[0]
            .iter()
            .flatten()
            .zip(gamma.gamma[1].iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    fn solve_binary(
        &self,
        pi: &ProductBelief,
        v: &dyn ContinuationValue,
        warm: Option<&Prescription>,
        diagonal: bool,
        restarts: &mut usize,
        iterations: &mut usize,
    ) -> Option<Candidate> {
        let comps = self.components(pi, diagonal);

        // stay on the warm-start branch when it still solves the equations
        if let Some(w) = warm {
            *restarts += 1;
            let (support, mixed) = self.classify(w, &comps);
            let solved = if mixed.is_empty() {
                Some(mixed.clone())
            } else {
                self.newton(pi, v, &comps, &support, &mixed, diagonal, iterations)
            };
            if let Some(c) = solved.and_then(|u| self.candidate(pi, v, &comps, &support, &u, diagonal)) {
                return Some(c);
            }
            // no exact solution on this support, but the warm start may still be an
            // eps-equilibrium (e.g. a mixing weight drifting towards zero)
            let mut snapped = self.assemble(&comps, &support, &mixed, diagonal);
            self.fill_inactive(pi, v, &mut snapped, diagonal);
            let residual = all_action_values(self.spec, pi, &snapped, v).max_gap(&snapped);
            if residual <= self.config.eps_eq {
                return Some(Candidate {
                    gamma: snapped,
                    residual,
                });
            }
        }

        // all support profiles, fewest mixed components first
        let k = comps.len();
        let mut profiles: Vec<Vec<Support>> = (0..3usize.pow(k as u32))
            .map(|mut code| {
                (0..k)
                    .map(|_| {
                        let s = [Support::Zero, Support::One, Support::Mixed][code % 3];
                        code /= 3;
                        s
                    })
                    .collect()
            })
            .collect();
        profiles.sort_by_key(|p| p.iter().filter(|s| **s == Support::Mixed).count());

        let mut found: Vec<Candidate> = Vec::new();
        for support in profiles {
            let m = support.iter().filter(|s| **s == Support::Mixed).count();
            *restarts += 1;
            if m == 0 {
                if let Some(c) = self.candidate(pi, v, &comps, &support, &[], diagonal) {
                    push_distinct(&mut found, c);
                }
                continue;
            }
            let mut starts: Vec<Vec<f64>> = Vec::new();
            if let Some(w) = warm {
                starts.push(
                    comps
                        .iter()
                        .zip(&support)
                        .filter(|(_, s)| **s == Support::Mixed)
                        .map(|(&(i, x), _)| w.gamma[i][x][1])
                        .collect(),
                );
            }
            for s in [0.5, 0.2, 0.8] {
                starts.push(vec![s; m]);
            }
            for start in starts {
                if let Some(u) = self.newton(pi, v, &comps, &support, &start, diagonal, iterations) {
                    if let Some(c) = self.candidate(pi, v, &comps, &support, &u, diagonal) {
                        push_distinct(&mut found, c);
                        break;
                    }
                }
            }
        }
        if found.is_empty() {
            return None;
        }
        let pick = if let Some(w) = warm {
            argmin(&found, |c| c.gamma.max_abs_diff(w))
        } else if self.symmetric_game {
            argmin(&found, |c| Self::asymmetry(&c.gamma))
        } else {
            0
        };
        Some(found.swap_remove(pick))
    }
}

fn push_distinct(found: &mut Vec<Candidate>, c: Candidate) {
    if found.iter().all(|f| f.gamma.max_abs_diff(&c.gamma) > 1e-7) {
        found.push(c);
    }
}

/// Index of the first minimiser, with ties (within 1e-12) resolved by order.
fn argmin(items: &[Candidate], key: impl Fn(&Candidate) -> f64) -> usize {
    let mut best = 0;
    let mut best_key = key(&items[0]);
    for (k, c) in items.iter().enumerate().skip(1) {
        let v = key(c);
        if v < best_key - 1e-12 {
            best = k;
            best_key = v;
        }
    }
    best
}

/// Solve the stage fixed point at `pi` against continuation `v`.
pub fn stage_fixed_point(
    spec: &GameSpec,
    pi: &ProductBelief,
    v: &dyn ContinuationValue,
    config: &StageConfig,
) -> StageFixedPointReport {
    StageSolver::new(spec, config.clone()).solve(pi, v, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game_model::public_goods_spec;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn gamma_pg(h1: f64, l1: f64, h2: f64, l2: f64) -> Prescription {
        Prescription::new(vec![
            vec![vec![1.0 - h1, h1], vec![1.0 - l1, l1]],
            vec![vec![1.0 - h2, h2], vec![1.0 - l2, l2]],
        ])
    }

    #[test]
    fn dominated_contribution_for_high_cost() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let pi = ProductBelief::from_first_type_probs(&[0.5, 0.5]);
        let g = gamma_pg(0.0, 0.0, 0.0, 0.0);
        let q = action_values(&s, &pi, &g, &ZeroValue, 0, 0);
        assert_eq!(q, vec![0.0, 1.0 - 1.2]);
        let q = action_values(&s, &pi, &g, &ZeroValue, 0, 1);
        assert!((q[1] - 0.8).abs() < 1e-15 && q[0] == 0.0);
    }

    #[test]
    fn difference_tracks_opponent_contribution() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let pi = ProductBelief::from_first_type_probs(&[0.4, 0.3]);
        let g = gamma_pg(0.1, 0.5, 0.2, 0.7);
        let p2 = 0.3 * 0.2 + 0.7 * 0.7;
        let q = action_values(&s, &pi, &g, &ZeroValue, 0, 0);
        assert!((q[1] - q[0] - ((1.0 - 1.2) - p2)).abs() < 1e-12);
    }

    #[test]
    fn constant_continuation_shifts_all_actions() {
        let s0 = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let s = public_goods_spec(1.2, 0.2, 0.5).unwrap();
        let pi = ProductBelief::from_first_type_probs(&[0.4, 0.3]);
        let g = gamma_pg(0.1, 0.5, 0.2, 0.7);
        let base = all_action_values(&s0, &pi, &g, &ZeroValue);
        let shifted = all_action_values(&s, &pi, &g, &ConstantValue(3.0));
        for i in 0..2 {
            for x in 0..2 {
                for a in 0..2 {
                    assert!((shifted.q[i][x][a] - base.q[i][x][a] - 1.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn best_response_sets() {
        assert_eq!(best_response(&[0.0, -0.2], 1e-9), (vec![0], 0.0));
        assert_eq!(best_response(&[0.8, 0.8], 1e-9).0, vec![0, 1]);
        assert_eq!(best_response(&[0.3, 0.3 + 5e-10], 1e-9).0, vec![0, 1]);
    }

    #[test]
    fn objective_linear_in_own_mixing() {
        let s = public_goods_spec(1.2, 0.2, 0.9).unwrap();
        let pi = ProductBelief::from_first_type_probs(&[0.35, 0.55]);
        let g = gamma_pg(0.3, 0.6, 0.25, 0.9);
        let v = ConstantValueFn;
        let av = all_action_values(&s, &pi, &g, &v);
        // direct evaluation: expected payoff with agent 0 of type L mixing with
        // its own prescribed distribution
        let direct = brute_force_value(&s, &pi, &g, &v, 0, 1);
        assert!((av.achieved(&g, 0, 1) - direct).abs() < 1e-12);
    }

    // A non-constant continuation used to exercise the belief-dependent term.
    struct ConstantValueFn;
    impl ContinuationValue for ConstantValueFn {
        fn evaluate(&self, b: &ProductBelief, out: &mut [f64]) {
            for (k, o) in out.iter_mut().enumerate() {
                *o = (k as f64 + 1.0) * b.marginals[0][0] - b.marginals[1][0] * b.marginals[1][0];
            }
        }
    }

    fn brute_force_value(
        s: &GameSpec,
        pi: &ProductBelief,
        g: &Prescription,
        v: &dyn ContinuationValue,
        i: usize,
        xi: usize,
    ) -> f64 {
        let jt = s.joint_types();
        let ja = s.joint_actions();
        let mut total = 0.0;
        let mut buf = vec![0.0; s.total_types()];
        for xf in 0..jt.len() {
            let x = jt.unflatten(xf);
            if x[i] != xi {
                continue;
            }
            let px: f64 = (0..2).filter(|&j| j != i).map(|j| pi.marginals[j][x[j]]).product();
            for af in 0..ja.len() {
                let a = ja.unflatten(af);
                let pa: f64 = (0..2).map(|j| g.gamma[j][x[j]][a[j]]).product();
                let next = update_joint(pi, g, af, s);
                v.evaluate(&next, &mut buf);
                let mut cont = 0.0;
                for xn in 0..2 {
                    cont += s.kernel(i).row(xi, af)[xn] * buf[s.type_offset(i) + xn];
                }
                total += px * pa * (s.reward(i, xf, af) + s.discount() * cont);
            }
        }
        total
    }

    struct Trap(AtomicUsize);
    impl ContinuationValue for Trap {
        fn evaluate(&self, _b: &ProductBelief, out: &mut [f64]) {
            self.0.fetch_add(1, Ordering::SeqCst);
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_discount_never_reads_continuation() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let trap = Trap(AtomicUsize::new(0));
        let cfg = StageConfig {
            symmetric: true,
            ..StageConfig::default()
        };
        for (a, b) in [(0.1, 0.15), (0.5, 0.5), (0.9, 0.05)] {
            let pi = ProductBelief::from_first_type_probs(&[a, b]);
            let r = stage_fixed_point(&s, &pi, &trap, &cfg);
            assert!(r.converged);
        }
        assert_eq!(trap.0.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn zero_discount_high_type_never_contributes() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let cfg = StageConfig {
            symmetric: true,
            ..StageConfig::default()
        };
        for a in [0.0, 0.1, 0.3, 0.7, 1.0] {
            for b in [0.0, 0.05, 0.2, 0.6, 1.0] {
                let pi = ProductBelief::from_first_type_probs(&[a, b]);
                let r = stage_fixed_point(&s, &pi, &ZeroValue, &cfg);
                assert!(r.converged);
                assert_eq!(r.prescription.gamma[0][0][1], 0.0, "{a} {b}");
                assert_eq!(r.prescription.gamma[1][0][1], 0.0);
            }
        }
    }

    #[test]
    fn free_ride_on_likely_low_cost_opponent() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let cfg = StageConfig {
            symmetric: true,
            ..StageConfig::default()
        };
        let pi = ProductBelief::from_first_type_probs(&[0.7, 0.04]);
        let r = stage_fixed_point(&s, &pi, &ZeroValue, &cfg);
        assert_eq!(r.prescription.gamma[0][1][1], 0.0);
        assert_eq!(r.prescription.gamma[1][1][1], 1.0);
    }

    #[test]
    fn symmetric_mixed_branch_at_low_beliefs() {
        let s = public_goods_spec(1.2, 0.2, 0.0).unwrap();
        let cfg = StageConfig {
            symmetric: true,
            ..StageConfig::default()
        };
        let (p1, p2) = (0.1, 0.15);
        let pi = ProductBelief::from_first_type_probs(&[p1, p2]);
        let r = stage_fixed_point(&s, &pi, &ZeroValue, &cfg);
        // indifference of the other agent's low type pins each mixing rate
        assert!((r.prescription.gamma[0][1][1] - 0.8 / (1.0 - p1)).abs() < 1e-9);
        assert!((r.prescription.gamma[1][1][1] - 0.8 / (1.0 - p2)).abs() < 1e-9);
    }

    #[test]
    fn damped_iteration_for_three_actions() {
        // three-action coordination-free game: action 2 strictly dominant
        use crate::game_model::{GameSpec, SpecFile};
        let spec = GameSpec::from_file(SpecFile {
            agents: 2,
            types: vec![vec!["t".into()], vec!["t".into()]],
            actions: vec![vec!["a".into(), "b".into(), "c".into()]; 2],
            q0: None,
            q: vec![vec![vec![vec![1.0]; 9]]; 2],
            reward: vec![
                vec![(0..9).map(|a| (a / 3) as f64).collect()],
                vec![(0..9).map(|a| (a % 3) as f64).collect()],
            ],
            delta: 0.0,
        })
        .unwrap();
        let pi = ProductBelief::initial(&spec);
        let r = stage_fixed_point(&spec, &pi, &ZeroValue, &StageConfig::default());
        // joint action a = 3 * a0 + a1; each agent is paid its own action index
        assert!(r.converged);
        assert_eq!(r.prescription.gamma[0][0], vec![0.0, 0.0, 1.0]);
        assert_eq!(r.prescription.gamma[1][0], vec![0.0, 0.0, 1.0]);
    }
}
