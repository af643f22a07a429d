//! Game specifications: finite private types evolving as controlled Markov
//! chains, publicly observed actions, per-agent rewards and a common discount.
//!
//! All joint profiles (types or actions) are flattened row-major with agent 0
//! varying slowest. Tensors are stored flat in that canonical layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance used when checking that probability vectors are stochastic.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read spec file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed spec file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid game spec:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
}

/// Row-major index space over a product of finite sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointIndex {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl JointIndex {
    pub fn new(sizes: &[usize]) -> Self {
        let mut strides = vec![1; sizes.len()];
        for k in (0..sizes.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * sizes[k + 1];
        }
        let len = sizes.iter().product();
        Self {
            sizes: sizes.to_vec(),
            strides,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn flatten(&self, components: &[usize]) -> usize {
        debug_assert_eq!(components.len(), self.sizes.len());
        components
            .iter()
            .zip(&self.strides)
            .map(|(c, s)| c * s)
            .sum()
    }

    pub fn unflatten(&self, flat: usize) -> Vec<usize> {
        (0..self.sizes.len())
            .map(|k| self.component(flat, k))
            .collect()
    }

    /// The `k`-th component of a flattened index.
    #[inline]
    pub fn component(&self, flat: usize, k: usize) -> usize {
        (flat / self.strides[k]) % self.sizes[k]
    }

    /// Replace component `k` of `flat` by `value`.
    #[inline]
    pub fn with_component(&self, flat: usize, k: usize, value: usize) -> usize {
        flat - self.component(flat, k) * self.strides[k] + value * self.strides[k]
    }
}

/// On-disk representation of a game. Field names are the interchange format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFile {
    pub agents: usize,
    pub types: Vec<Vec<String>>,
    pub actions: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<Vec<f64>>>,
    /// Per agent, indexed `[own_type][joint_action][next_own_type]`.
    pub q: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per agent, indexed `[joint_type][joint_action]`.
    pub reward: Vec<Vec<Vec<f64>>>,
    pub delta: f64,
}

/// A validated, immutable game.
#[derive(Debug, Clone)]
pub struct GameSpec {
    type_labels: Vec<Vec<String>>,
    action_labels: Vec<Vec<String>>,
    initial: Vec<Vec<f64>>,
    /// Per agent, flat `[own_type][joint_action][next_type]`.
    transition: Vec<Vec<f64>>,
    /// Per agent, flat `[joint_type][joint_action]`.
    reward: Vec<Vec<f64>>,
    delta: f64,
    joint_types: JointIndex,
    joint_actions: JointIndex,
    type_offsets: Vec<usize>,
}

/// Read-only view of one agent's transition kernel `Q^i(x' | x, a)`.
#[derive(Debug, Clone, Copy)]
pub struct Kernel<'a> {
    agent: usize,
    n_types: usize,
    n_joint_actions: usize,
    data: &'a [f64],
    joint_actions: &'a JointIndex,
}

impl<'a> Kernel<'a> {
    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    /// Distribution of the next own type given current own type and joint action.
    #[inline]
    pub fn row(&self, own_type: usize, joint_action: usize) -> &'a [f64] {
        let start = (own_type * self.n_joint_actions + joint_action) * self.n_types;
        &self.data[start..start + self.n_types]
    }

    /// This agent's own component of a joint action.
    #[inline]
    pub fn own_action(&self, joint_action: usize) -> usize {
        self.joint_actions.component(joint_action, self.agent)
    }
}

impl GameSpec {
    /// Build a spec from its file representation, validating shapes and
    /// probability/reward invariants, then renormalising all distributions.
    pub fn from_file(file: SpecFile) -> Result<Self, SpecError> {
        let violations = shape_violations(&file);
        if !violations.is_empty() {
            return Err(SpecError::Validation(violations));
        }
        let n = file.agents;
        let n_types: Vec<usize> = file.types.iter().map(Vec::len).collect();
        let initial = match file.q0 {
            Some(q0) => q0,
            None => n_types.iter().map(|&k| vec![1.0 / k as f64; k]).collect(),
        };
        let transition = (0..n)
            .map(|i| {
                file.q[i]
                    .iter()
                    .flat_map(|per_action| per_action.iter().flatten().copied())
                    .collect()
            })
            .collect();
        let reward = (0..n)
            .map(|i| file.reward[i].iter().flatten().copied().collect())
            .collect();
        let spec = Self::assemble(
            file.types,
            file.actions,
            initial,
            transition,
            reward,
            file.delta,
        );
        let violations = validate_spec(&spec);
        if !violations.is_empty() {
            return Err(SpecError::Validation(violations));
        }
        Ok(spec.renormalized())
    }

    fn assemble(
        type_labels: Vec<Vec<String>>,
        action_labels: Vec<Vec<String>>,
        initial: Vec<Vec<f64>>,
        transition: Vec<Vec<f64>>,
        reward: Vec<Vec<f64>>,
        delta: f64,
    ) -> Self {
        let n_types: Vec<usize> = type_labels.iter().map(Vec::len).collect();
        let n_actions: Vec<usize> = action_labels.iter().map(Vec::len).collect();
        let mut type_offsets = Vec::with_capacity(n_types.len() + 1);
        let mut acc = 0;
        for &k in &n_types {
            type_offsets.push(acc);
            acc += k;
        }
        type_offsets.push(acc);
        Self {
            joint_types: JointIndex::new(&n_types),
            joint_actions: JointIndex::new(&n_actions),
            type_labels,
            action_labels,
            initial,
            transition,
            reward,
            delta,
            type_offsets,
        }
    }

    fn renormalized(mut self) -> Self {
        for v in &mut self.initial {
            normalize_in_place(v);
        }
        for i in 0..self.n_agents() {
            let k = self.n_types(i);
            for row in self.transition[i].chunks_mut(k) {
                normalize_in_place(row);
            }
        }
        self
    }

    pub fn to_file(&self) -> SpecFile {
        let n_ja = self.joint_actions.len();
        SpecFile {
            agents: self.n_agents(),
            types: self.type_labels.clone(),
            actions: self.action_labels.clone(),
            q0: Some(self.initial.clone()),
            q: (0..self.n_agents())
                .map(|i| {
                    let k = self.n_types(i);
                    self.transition[i]
                        .chunks(k * n_ja)
                        .map(|per_type| per_type.chunks(k).map(<[f64]>::to_vec).collect())
                        .collect()
                })
                .collect(),
            reward: self
                .reward
                .iter()
                .map(|r| r.chunks(n_ja).map(<[f64]>::to_vec).collect())
                .collect(),
            delta: self.delta,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.type_labels.len()
    }

    pub fn n_types(&self, agent: usize) -> usize {
        self.type_labels[agent].len()
    }

    pub fn n_actions(&self, agent: usize) -> usize {
        self.action_labels[agent].len()
    }

    pub fn type_labels(&self, agent: usize) -> &[String] {
        &self.type_labels[agent]
    }

    pub fn action_labels(&self, agent: usize) -> &[String] {
        &self.action_labels[agent]
    }

    pub fn type_index(&self, agent: usize, label: &str) -> Option<usize> {
        self.type_labels[agent].iter().position(|l| l == label)
    }

    pub fn action_index(&self, agent: usize, label: &str) -> Option<usize> {
        self.action_labels[agent].iter().position(|l| l == label)
    }

    pub fn joint_types(&self) -> &JointIndex {
        &self.joint_types
    }

    pub fn joint_actions(&self) -> &JointIndex {
        &self.joint_actions
    }

    pub fn discount(&self) -> f64 {
        self.delta
    }

    pub fn initial(&self, agent: usize) -> &[f64] {
        &self.initial[agent]
    }

    pub fn kernel(&self, agent: usize) -> Kernel<'_> {
        Kernel {
            agent,
            n_types: self.n_types(agent),
            n_joint_actions: self.joint_actions.len(),
            data: &self.transition[agent],
            joint_actions: &self.joint_actions,
        }
    }

    #[inline]
    pub fn reward(&self, agent: usize, joint_type: usize, joint_action: usize) -> f64 {
        self.reward[agent][joint_type * self.joint_actions.len() + joint_action]
    }

    /// Largest absolute reward over all agents and profiles.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward
            .iter()
            .flatten()
            .fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// Offset of agent `i`'s first type in a per-(agent, type) flat layout.
    #[inline]
    pub fn type_offset(&self, agent: usize) -> usize {
        self.type_offsets[agent]
    }

    /// Total number of (agent, own type) pairs.
    pub fn total_types(&self) -> usize {
        self.type_offsets[self.n_agents()]
    }

    /// Copy of this game with a different discount factor.
    pub fn with_discount(&self, delta: f64) -> Result<Self, SpecError> {
        if !(0.0..1.0).contains(&delta) {
            return Err(SpecError::Validation(vec![format!(
                "delta: discount must be < 1 and >= 0 (got {delta})"
            )]));
        }
        let mut out = self.clone();
        out.delta = delta;
        Ok(out)
    }

    /// Content hash over the canonical serialisation.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("spec serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// True when swapping the two agents (types, actions, kernels, rewards)
    /// leaves the game unchanged.
    pub fn is_two_agent_symmetric(&self) -> bool {
        if self.n_agents() != 2
            || self.n_types(0) != self.n_types(1)
            || self.n_actions(0) != self.n_actions(1)
            || self.initial[0] != self.initial[1]
        {
            return false;
        }
        let swap_t = |x: usize| {
            let c = self.joint_types.unflatten(x);
            self.joint_types.flatten(&[c[1], c[0]])
        };
        let swap_a = |a: usize| {
            let c = self.joint_actions.unflatten(a);
            self.joint_actions.flatten(&[c[1], c[0]])
        };
        for x in 0..self.joint_types.len() {
            for a in 0..self.joint_actions.len() {
                if self.reward(0, x, a) != self.reward(1, swap_t(x), swap_a(a)) {
                    return false;
                }
            }
        }
        let (k0, k1) = (self.kernel(0), self.kernel(1));
        for t in 0..self.n_types(0) {
            for a in 0..self.joint_actions.len() {
                if k0.row(t, a) != k1.row(t, swap_a(a)) {
                    return false;
                }
            }
        }
        true
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for p in v.iter_mut() {
            *p /= s;
        }
    }
}

fn shape_violations(file: &SpecFile) -> Vec<String> {
    let mut out = Vec::new();
    let n = file.agents;
    if n == 0 {
        out.push("agents: must be a positive integer".to_string());
        return out;
    }
    for (name, len) in [
        ("types", file.types.len()),
        ("actions", file.actions.len()),
        ("q", file.q.len()),
        ("reward", file.reward.len()),
    ] {
        if len != n {
            out.push(format!("{name}: expected {n} agents, found {len}"));
        }
    }
    if let Some(q0) = &file.q0 {
        if q0.len() != n {
            out.push(format!("q0: expected {n} agents, found {}", q0.len()));
        }
    }
    if !out.is_empty() {
        return out;
    }
    for i in 0..n {
        if file.types[i].is_empty() {
            out.push(format!("types[{i}]: type set must be nonempty"));
        }
        if file.actions[i].is_empty() {
            out.push(format!("actions[{i}]: action set must be nonempty"));
        }
    }
    if !out.is_empty() {
        return out;
    }
    let n_jt: usize = file.types.iter().map(Vec::len).product();
    let n_ja: usize = file.actions.iter().map(Vec::len).product();
    for i in 0..n {
        let k = file.types[i].len();
        if let Some(q0) = &file.q0 {
            if q0[i].len() != k {
                out.push(format!("q0[{i}]: expected {k} entries, found {}", q0[i].len()));
            }
        }
        if file.q[i].len() != k {
            out.push(format!("q[{i}]: expected {k} own types, found {}", file.q[i].len()));
        } else {
            for (x, per_action) in file.q[i].iter().enumerate() {
                if per_action.len() != n_ja {
                    out.push(format!(
                        "q[{i}][{x}]: expected {n_ja} joint actions, found {}",
                        per_action.len()
                    ));
                    continue;
                }
                for (a, row) in per_action.iter().enumerate() {
                    if row.len() != k {
                        out.push(format!(
                            "q[{i}][{x}][{a}]: expected {k} next types, found {}",
                            row.len()
                        ));
                    }
                }
            }
        }
        if file.reward[i].len() != n_jt {
            out.push(format!(
                "reward[{i}]: expected {n_jt} joint types, found {}",
                file.reward[i].len()
            ));
        } else {
            for (x, row) in file.reward[i].iter().enumerate() {
                if row.len() != n_ja {
                    out.push(format!(
                        "reward[{i}][{x}]: expected {n_ja} joint actions, found {}",
                        row.len()
                    ));
                }
            }
        }
    }
    out
}

fn check_distribution(out: &mut Vec<String>, path: &str, v: &[f64]) {
    for (k, p) in v.iter().enumerate() {
        if !p.is_finite() || *p < 0.0 {
            out.push(format!("{path}[{k}]: invalid probability {p}"));
        }
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        out.push(format!("{path}: row sums to {s}, expected 1"));
    }
}

/// All violated invariants of `spec`, each naming the offending field and index.
pub fn validate_spec(spec: &GameSpec) -> Vec<String> {
    let mut out = Vec::new();
    if !(spec.delta >= 0.0 && spec.delta < 1.0) {
        out.push(format!("delta: discount must be < 1 and >= 0 (got {})", spec.delta));
    }
    let n_ja = spec.joint_actions.len();
    for i in 0..spec.n_agents() {
        check_distribution(&mut out, &format!("q0[{i}]"), &spec.initial[i]);
        let kernel = spec.kernel(i);
        for x in 0..spec.n_types(i) {
            for a in 0..n_ja {
                check_distribution(&mut out, &format!("q[{i}][{x}][{a}]"), kernel.row(x, a));
            }
        }
        for x in 0..spec.joint_types.len() {
            for a in 0..n_ja {
                let r = spec.reward(i, x, a);
                if !r.is_finite() {
                    out.push(format!("reward[{i}][{x}][{a}]: non-finite reward {r}"));
                }
            }
        }
    }
    out
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<GameSpec, SpecError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: SpecFile = serde_json::from_str(&text)?;
    GameSpec::from_file(file)
}

pub fn save_spec(spec: &GameSpec, path: impl AsRef<Path>) -> Result<(), SpecError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&spec.to_file())?;
    fs::write(path, text).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Two-agent public goods game with static types `{x_high, x_low}` and
/// actions `{0, 1}` (1 = contribute). A contributor pays its type; everyone
/// gets 1 if anybody contributes.
pub fn public_goods_spec(x_high: f64, x_low: f64, delta: f64) -> Result<GameSpec, SpecError> {
    if !(0.0..1.0).contains(&delta) {
        return Err(SpecError::Validation(vec![format!(
            "delta: discount must be < 1 and >= 0 (got {delta})"
        )]));
    }
    let costs = [x_high, x_low];
    let types = vec![vec!["H".to_string(), "L".to_string()]; 2];
    let actions = vec![vec!["0".to_string(), "1".to_string()]; 2];
    let jt = JointIndex::new(&[2, 2]);
    let ja = JointIndex::new(&[2, 2]);
    let reward = (0..2)
        .map(|i| {
            (0..jt.len())
                .map(|x| {
                    let own_cost = costs[jt.component(x, i)];
                    (0..ja.len())
                        .map(|a| {
                            if ja.component(a, i) == 1 {
                                1.0 - own_cost
                            } else {
                                ja.component(a, 1 - i) as f64
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let identity = |x: usize| -> Vec<f64> { (0..2).map(|y| if y == x { 1.0 } else { 0.0 }).collect() };
    let q = (0..2)
        .map(|_| (0..2).map(|x| (0..ja.len()).map(|_| identity(x)).collect()).collect())
        .collect();
    GameSpec::from_file(SpecFile {
        agents: 2,
        types,
        actions,
        q0: None,
        q,
        reward,
        delta,
    })
}
