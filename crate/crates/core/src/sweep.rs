//! One backward step over the whole belief grid: solve the stage fixed point
//! at every grid point against a fixed continuation value.

use std::sync::Arc;

use rayon::prelude::*;

use crate::belief::Prescription;
use crate::game_model::GameSpec;
use crate::grid::{BeliefGrid, PointDiagnostics, PolicyGrid, ValueTable};
use crate::stage_game::{ContinuationValue, StageFixedPointReport, StageSolver};

pub(crate) struct SweepOutput {
    pub values: ValueTable,
    pub policy: PolicyGrid,
    /// Grid points whose support pattern differs from the warm start.
    pub branch_switches: usize,
}

fn support_signature(p: &Prescription) -> Vec<u8> {
    p.gamma
        .iter()
        .flatten()
        .flatten()
        .map(|&v| {
            if v <= 1e-9 {
                0
            } else if v >= 1.0 - 1e-9 {
                2
            } else {
                1
            }
        })
        .collect()
}

pub(crate) fn sweep(
    spec: &GameSpec,
    grid: &Arc<BeliefGrid>,
    continuation: &dyn ContinuationValue,
    solver: &StageSolver<'_>,
    warm: Option<&PolicyGrid>,
) -> SweepOutput {
    let mirrored = solver.symmetric() && grid.supports_mirroring();
    let points: Vec<usize> = (0..grid.len())
        .filter(|&p| !mirrored || grid.is_canonical(p))
        .collect();

    let reports: Vec<StageFixedPointReport> = points
        .par_iter()
        .map(|&p| {
            let belief = grid.point(p);
            solver.solve(&belief, continuation, warm.map(|w| w.at(p)))
        })
        .collect();

    let mut values = ValueTable::zeros(spec, grid.clone());
    let mut prescriptions: Vec<Option<Prescription>> = vec![None; grid.len()];
    let mut diagnostics: Vec<Option<PointDiagnostics>> = vec![None; grid.len()];
    for (&p, r) in points.iter().zip(&reports) {
        values.point_slice_mut(p).copy_from_slice(&r.values);
        let diag = PointDiagnostics {
            residual: r.residual,
            iterations: r.iterations,
            restarts: r.restarts,
            converged: r.converged,
        };
        if mirrored && !grid.is_diagonal(p) {
            let m = grid.mirror(p);
            let k = spec.n_types(0);
            for x in 0..k {
                values.set(m, 0, x, r.values[spec.type_offset(1) + x]);
                values.set(m, 1, x, r.values[spec.type_offset(0) + x]);
            }
            prescriptions[m] = Some(r.prescription.swapped());
            diagnostics[m] = Some(diag.clone());
        }
        prescriptions[p] = Some(r.prescription.clone());
        diagnostics[p] = Some(diag);
    }
    let prescriptions: Vec<Prescription> = prescriptions.into_iter().map(|p| p.expect("filled")).collect();
    let diagnostics: Vec<PointDiagnostics> = diagnostics.into_iter().map(|d| d.expect("filled")).collect();

    let branch_switches = match warm {
        Some(w) => prescriptions
            .iter()
            .zip(&w.prescriptions)
            .filter(|(a, b)| support_signature(a) != support_signature(b))
            .count(),
        None => 0,
    };
    SweepOutput {
        values,
        policy: PolicyGrid::new(grid.clone(), prescriptions, diagnostics),
        branch_switches,
    }
}
