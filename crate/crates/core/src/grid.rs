//! Discretised belief space, tabulated value functions and policy tables.
//!
//! Each agent's simplex `Delta(X^i)` is gridded at step `h = 1/m` (all beliefs
//! whose entries are multiples of `h`); the belief grid is the product of
//! these per-agent axes, flattened row-major with agent 0 slowest. Off-grid
//! values are interpolated per axis with the Freudenthal triangulation (plain
//! linear interpolation for two-type agents) and combined multilinearly
//! across agents.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{PolicyError, PolicyLookup, Prescription, ProductBelief};
use crate::game_model::{GameSpec, JointIndex};
use crate::stage_game::ContinuationValue;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid step must lie in (0, 0.5], got {0}")]
    StepOutOfRange(f64),
    #[error("grid step {0} does not divide 1 evenly")]
    StepNotDivisor(f64),
    #[error("belief grid with {0} points is too large")]
    TooLarge(usize),
}

const MAX_GRID_POINTS: usize = 5_000_000;

#[derive(Debug, Clone)]
struct SimplexAxis {
    n_types: usize,
    /// Type counts (summing to `m`) for each axis point.
    points: Vec<Vec<u32>>,
    lookup: HashMap<Vec<u32>, usize>,
}

impl SimplexAxis {
    fn new(n_types: usize, m: u32) -> Self {
        let mut points = Vec::new();
        let mut current = vec![0u32; n_types];
        compositions(&mut points, &mut current, 0, m);
        let lookup = points
            .iter()
            .enumerate()
            .map(|(k, p)| (p.clone(), k))
            .collect();
        Self {
            n_types,
            points,
            lookup,
        }
    }

    #[inline]
    fn index_of(&self, counts: &[u32], m: u32) -> usize {
        match self.n_types {
            1 => 0,
            // enumeration order: first count ascending
            2 => counts[0] as usize,
            _ => {
                debug_assert_eq!(counts.iter().sum::<u32>(), m);
                self.lookup[counts]
            }
        }
    }

    /// Freudenthal interpolation weights of `b` on this axis.
    fn weights(&self, b: &[f64], m: u32, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let k = self.n_types;
        if k == 1 {
            out.push((0, 1.0));
            return;
        }
        let mf = m as f64;
        if k == 2 {
            let x = snap((b[1] * mf).clamp(0.0, mf));
            let base = x.floor().min(mf - 1.0);
            let frac = x - base;
            let c1 = base as u32;
            // counts (m - c1, c1) -> index m - c1
            let lo = (m - c1) as usize;
            if frac < 1.0 {
                out.push((lo, 1.0 - frac));
            }
            if frac > 0.0 {
                out.push((lo - 1, frac));
            }
            return;
        }
        // suffix sums scaled by m: x_0 = m >= x_1 >= ... >= x_{k-1} >= 0
        let mut x = vec![0.0; k];
        let mut acc = 0.0;
        for j in (1..k).rev() {
            acc += b[j];
            x[j] = snap((acc * mf).clamp(0.0, mf));
        }
        x[0] = mf;
        for j in 1..k {
            if x[j] > x[j - 1] {
                x[j] = x[j - 1];
            }
        }
        let base: Vec<u32> = x.iter().map(|v| v.floor() as u32).collect();
        let frac: Vec<f64> = x.iter().zip(&base).map(|(v, f)| v - *f as f64).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&p, &q| frac[q].partial_cmp(&frac[p]).unwrap().then(p.cmp(&q)));
        let mut vertex = base.clone();
        let to_counts = |v: &[u32]| -> Vec<u32> {
            (0..k)
                .map(|j| v[j] - if j + 1 < k { v[j + 1] } else { 0 })
                .collect()
        };
        let w0 = 1.0 - frac[order[0]];
        if w0 > 0.0 {
            out.push((self.index_of(&to_counts(&vertex), m), w0));
        }
        for r in 0..k {
            vertex[order[r]] += 1;
            let next = if r + 1 < k { frac[order[r + 1]] } else { 0.0 };
            let w = frac[order[r]] - next;
            if w > 0.0 {
                out.push((self.index_of(&to_counts(&vertex), m), w));
            }
        }
    }

    fn nearest(&self, b: &[f64], m: u32) -> usize {
        let k = self.n_types;
        let scaled: Vec<f64> = b.iter().map(|p| p.max(0.0) * m as f64).collect();
        let mut counts: Vec<u32> = scaled.iter().map(|v| v.floor() as u32).collect();
        let assigned: u32 = counts.iter().sum();
        let mut rem = m.saturating_sub(assigned);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&p, &q| {
            let fp = scaled[p] - scaled[p].floor();
            let fq = scaled[q] - scaled[q].floor();
            fq.partial_cmp(&fp).unwrap().then(p.cmp(&q))
        });
        for &j in order.iter().cycle() {
            if rem == 0 {
                break;
            }
            counts[j] += 1;
            rem -= 1;
        }
        // guard against rounding overshoot
        while counts.iter().sum::<u32>() > m {
            let j = (0..k).max_by_key(|&j| counts[j]).unwrap();
            counts[j] -= 1;
        }
        self.index_of(&counts, m)
    }
}

/// Round scaled coordinates that are within float noise of a grid line.
#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

fn compositions(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for c in 0..=remaining {
        current[pos] = c;
        compositions(out, current, pos + 1, remaining - c);
    }
}

/// Product grid over per-agent belief simplices.
#[derive(Debug, Clone)]
pub struct BeliefGrid {
    step: f64,
    divisions: u32,
    axes: Vec<SimplexAxis>,
    index: JointIndex,
}

impl BeliefGrid {
    pub fn new(spec: &GameSpec, step: f64) -> Result<Self, GridError> {
        let type_counts: Vec<usize> = (0..spec.n_agents()).map(|i| spec.n_types(i)).collect();
        Self::with_type_counts(&type_counts, step)
    }

    pub fn with_type_counts(type_counts: &[usize], step: f64) -> Result<Self, GridError> {
        if !(step > 0.0 && step <= 0.5) {
            return Err(GridError::StepOutOfRange(step));
        }
        let m = (1.0 / step).round();
        if (m * step - 1.0).abs() > 1e-9 {
            return Err(GridError::StepNotDivisor(step));
        }
        let m = m as u32;
        let axes: Vec<SimplexAxis> = type_counts.iter().map(|&k| SimplexAxis::new(k, m)).collect();
        let sizes: Vec<usize> = axes.iter().map(|a| a.points.len()).collect();
        let total = sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
        match total {
            Some(t) if t <= MAX_GRID_POINTS => {}
            Some(t) => return Err(GridError::TooLarge(t)),
            None => return Err(GridError::TooLarge(usize::MAX)),
        }
        Ok(Self {
            step,
            divisions: m,
            axes,
            index: JointIndex::new(&sizes),
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn divisions(&self) -> u32 {
        self.divisions
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.axes.len()
    }

    pub fn axis_len(&self, agent: usize) -> usize {
        self.axes[agent].points.len()
    }

    pub fn axis_index(&self, point: usize, agent: usize) -> usize {
        self.index.component(point, agent)
    }

    pub fn point_index(&self, axis_indices: &[usize]) -> usize {
        self.index.flatten(axis_indices)
    }

    /// Belief at a grid point.
    pub fn point(&self, point: usize) -> ProductBelief {
        let m = self.divisions as f64;
        ProductBelief::new(
            self.axes
                .iter()
                .enumerate()
                .map(|(i, axis)| {
                    axis.points[self.index.component(point, i)]
                        .iter()
                        .map(|&c| c as f64 / m)
                        .collect()
                })
                .collect(),
        )
    }

    /// Interpolation stencil of `belief`: grid points and their weights.
    pub fn stencil(&self, belief: &ProductBelief) -> Vec<(usize, f64)> {
        let mut per_axis: Vec<Vec<(usize, f64)>> = Vec::with_capacity(self.axes.len());
        let mut buf = Vec::new();
        for (i, axis) in self.axes.iter().enumerate() {
            axis.weights(belief.marginal(i), self.divisions, &mut buf);
            per_axis.push(buf.clone());
        }
        let mut out = vec![(0usize, 1.0f64)];
        for (i, w) in per_axis.iter().enumerate() {
            let stride = self.index.with_component(0, i, 1);
            let mut next = Vec::with_capacity(out.len() * w.len());
            for &(p, pw) in &out {
                for &(k, kw) in w {
                    next.push((p + k * stride, pw * kw));
                }
            }
            out = next;
        }
        out
    }

    /// Nearest grid point (largest-remainder rounding per axis).
    pub fn nearest(&self, belief: &ProductBelief) -> usize {
        let idx: Vec<usize> = self
            .axes
            .iter()
            .enumerate()
            .map(|(i, axis)| axis.nearest(belief.marginal(i), self.divisions))
            .collect();
        self.index.flatten(&idx)
    }

    /// Point with the two agents' beliefs exchanged (two-agent grids with
    /// identical axes only).
    pub fn mirror(&self, point: usize) -> usize {
        debug_assert_eq!(self.axes.len(), 2);
        let a = self.index.component(point, 0);
        let b = self.index.component(point, 1);
        self.index.flatten(&[b, a])
    }

    pub fn is_canonical(&self, point: usize) -> bool {
        self.index.component(point, 0) <= self.index.component(point, 1)
    }

    pub fn is_diagonal(&self, point: usize) -> bool {
        self.index.component(point, 0) == self.index.component(point, 1)
    }

    pub fn supports_mirroring(&self) -> bool {
        self.axes.len() == 2 && self.axes[0].n_types == self.axes[1].n_types
    }
}

/// Values `V^i(pi, x^i)` at every grid point, agent and own type.
#[derive(Debug, Clone)]
pub struct ValueTable {
    grid: Arc<BeliefGrid>,
    /// Layout per point: all types of agent 0, then agent 1, ...
    offsets: Vec<usize>,
    stride: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(spec: &GameSpec, grid: Arc<BeliefGrid>) -> Self {
        let offsets: Vec<usize> = (0..=spec.n_agents())
            .map(|i| if i < spec.n_agents() { spec.type_offset(i) } else { spec.total_types() })
            .collect();
        let stride = spec.total_types();
        let values = vec![0.0; grid.len() * stride];
        Self {
            grid,
            offsets,
            stride,
            values,
        }
    }

    /// Table filled by evaluating `f(belief, agent, type)` at every grid point.
    pub fn from_fn(
        spec: &GameSpec,
        grid: Arc<BeliefGrid>,
        f: impl Fn(&ProductBelief, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(spec, grid);
        for p in 0..t.grid.len() {
            let b = t.grid.point(p);
            for i in 0..spec.n_agents() {
                for x in 0..spec.n_types(i) {
                    t.set(p, i, x, f(&b, i, x));
                }
            }
        }
        t
    }

    pub fn from_raw(spec: &GameSpec, grid: Arc<BeliefGrid>, values: Vec<f64>) -> Option<Self> {
        let mut t = Self::zeros(spec, grid);
        if values.len() != t.values.len() {
            return None;
        }
        t.values = values;
        Some(t)
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn point_slice(&self, point: usize) -> &[f64] {
        &self.values[point * self.stride..(point + 1) * self.stride]
    }

    pub fn point_slice_mut(&mut self, point: usize) -> &mut [f64] {
        &mut self.values[point * self.stride..(point + 1) * self.stride]
    }

    #[inline]
    pub fn get(&self, point: usize, agent: usize, own_type: usize) -> f64 {
        self.values[point * self.stride + self.offsets[agent] + own_type]
    }

    pub fn set(&mut self, point: usize, agent: usize, own_type: usize, v: f64) {
        self.values[point * self.stride + self.offsets[agent] + own_type] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Sup-norm distance to another table on the same grid.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// First non-finite entry as (point, agent, type).
    pub fn first_non_finite(&self) -> Option<(usize, usize, usize)> {
        let k = self.values.iter().position(|v| !v.is_finite())?;
        let point = k / self.stride;
        let within = k % self.stride;
        let agent = (0..self.offsets.len() - 1)
            .rev()
            .find(|&i| self.offsets[i] <= within)
            .unwrap_or(0);
        Some((point, agent, within - self.offsets[agent]))
    }

    /// Interpolated value at an arbitrary belief.
    pub fn interpolate(&self, belief: &ProductBelief, agent: usize, own_type: usize) -> f64 {
        self.grid
            .stencil(belief)
            .iter()
            .map(|&(p, w)| w * self.get(p, agent, own_type))
            .sum()
    }
}

impl ContinuationValue for ValueTable {
    fn evaluate(&self, belief: &ProductBelief, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (p, w) in self.grid.stencil(belief) {
            for (o, v) in out.iter_mut().zip(self.point_slice(p)) {
                *o += w * v;
            }
        }
    }
}

/// Multilinear interpolation of a value table; exact at grid points.
pub fn interpolate_value(v: &ValueTable, pi: &ProductBelief, agent: usize, own_type: usize) -> f64 {
    v.interpolate(pi, agent, own_type)
}

/// Per-point solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDiagnostics {
    pub residual: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
}

/// Prescription profile at every grid point: the map from belief to
/// equilibrium prescriptions.
#[derive(Debug, Clone)]
pub struct PolicyGrid {
    grid: Arc<BeliefGrid>,
    pub prescriptions: Vec<Prescription>,
    pub diagnostics: Vec<PointDiagnostics>,
}

impl PolicyGrid {
    pub fn new(
        grid: Arc<BeliefGrid>,
        prescriptions: Vec<Prescription>,
        diagnostics: Vec<PointDiagnostics>,
    ) -> Self {
        assert_eq!(prescriptions.len(), grid.len());
        assert_eq!(diagnostics.len(), grid.len());
        Self {
            grid,
            prescriptions,
            diagnostics,
        }
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    pub fn at(&self, point: usize) -> &Prescription {
        &self.prescriptions[point]
    }

    /// Prescription at the grid point nearest to `belief`.
    pub fn nearest(&self, belief: &ProductBelief) -> &Prescription {
        &self.prescriptions[self.grid.nearest(belief)]
    }

    pub fn unconverged_fraction(&self) -> f64 {
        let bad = self.diagnostics.iter().filter(|d| !d.converged).count();
        bad as f64 / self.diagnostics.len().max(1) as f64
    }

    pub fn max_residual(&self) -> f64 {
        self.diagnostics.iter().fold(0.0_f64, |m, d| m.max(d.residual))
    }
}

impl PolicyLookup for PolicyGrid {
    fn prescription(&self, _step: usize, belief: &ProductBelief) -> Result<Prescription, PolicyError> {
        Ok(self.nearest(belief).clone())
    }
}
