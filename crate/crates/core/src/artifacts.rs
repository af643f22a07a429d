//! JSON artifacts written by the CLI. Tables are flat arrays with a declared
//! index order, and every artifact carries the spec hash and the run config
//! that produced it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::Prescription;
use crate::game_model::GameSpec;
use crate::grid::{BeliefGrid, GridError, PointDiagnostics, PolicyGrid, ValueTable};

pub const VALUES_FILE: &str = "values.json";
pub const POLICY_FILE: &str = "policy.json";
pub const REPORT_FILE: &str = "report.json";

pub const VALUE_ORDER: &str = "point, agent, own type";
pub const POLICY_ORDER: &str = "point, agent, own type, own action";
pub const POINT_ORDER: &str = "row-major over agents (agent 1 slowest); on each agent's axis, simplex points in lexicographic order of type counts";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("artifact {path} does not match: {reason}")]
    Mismatch { path: String, reason: String },
    #[error("artifact {path}: {reason}")]
    Invalid { path: String, reason: String },
}

/// Settings that determine the numbers in an artifact. The output directory
/// and thread count are deliberately absent: they never change results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub spec_path: String,
    pub grid_step: f64,
    pub tol_v: f64,
    pub tol_res: f64,
    pub max_sweeps: usize,
    pub seed: u64,
    pub symmetric: bool,
    pub format: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridInfo {
    pub step: f64,
    pub type_counts: Vec<usize>,
    pub points: usize,
    pub point_order: String,
}

impl GridInfo {
    pub fn of(grid: &BeliefGrid, spec: &GameSpec) -> Self {
        Self {
            step: grid.step(),
            type_counts: (0..spec.n_agents()).map(|i| spec.n_types(i)).collect(),
            points: grid.len(),
            point_order: POINT_ORDER.into(),
        }
    }

    pub fn build(&self) -> Result<BeliefGrid, GridError> {
        BeliefGrid::with_type_counts(&self.type_counts, self.step)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValuesArtifact {
    pub spec_hash: String,
    pub config: RunConfig,
    pub grid: GridInfo,
    pub discount: f64,
    pub index_order: String,
    /// Non-finite entries are written as `null` and read back as NaN.
    #[serde(deserialize_with = "nullable_floats")]
    pub values: Vec<f64>,
}

fn nullable_floats<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Deserialize::deserialize(d)?;
    Ok(raw.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyArtifact {
    pub spec_hash: String,
    pub config: RunConfig,
    pub grid: GridInfo,
    pub index_order: String,
    pub gamma: Vec<f64>,
    pub diagnostics: Vec<PointDiagnostics>,
}

impl ValuesArtifact {
    pub fn new(spec: &GameSpec, config: &RunConfig, v: &ValueTable) -> Self {
        Self {
            spec_hash: spec.content_hash(),
            config: config.clone(),
            grid: GridInfo::of(v.grid(), spec),
            discount: spec.discount(),
            index_order: VALUE_ORDER.into(),
            values: v.raw().to_vec(),
        }
    }

    pub fn table(&self, spec: &GameSpec, grid: Arc<BeliefGrid>, path: &Path) -> Result<ValueTable, ArtifactError> {
        ValueTable::from_raw(spec, grid, self.values.clone()).ok_or_else(|| ArtifactError::Invalid {
            path: path.display().to_string(),
            reason: format!("{} values do not fit the declared grid", self.values.len()),
        })
    }
}

impl PolicyArtifact {
    pub fn new(spec: &GameSpec, config: &RunConfig, theta: &PolicyGrid) -> Self {
        let gamma = theta
            .prescriptions
            .iter()
            .flat_map(|p| p.gamma.iter().flatten().flatten().copied())
            .collect();
        Self {
            spec_hash: spec.content_hash(),
            config: config.clone(),
            grid: GridInfo::of(theta.grid(), spec),
            index_order: POLICY_ORDER.into(),
            gamma,
            diagnostics: theta.diagnostics.clone(),
        }
    }

    pub fn policy(&self, spec: &GameSpec, grid: Arc<BeliefGrid>, path: &Path) -> Result<PolicyGrid, ArtifactError> {
        let per_point: usize = (0..spec.n_agents()).map(|i| spec.n_types(i) * spec.n_actions(i)).sum();
        let invalid = |reason: String| ArtifactError::Invalid {
            path: path.display().to_string(),
            reason,
        };
        if self.gamma.len() != per_point * grid.len() || self.diagnostics.len() != grid.len() {
            return Err(invalid(format!(
                "{} probabilities do not fit the declared grid",
                self.gamma.len()
            )));
        }
        if let Some(k) = self.gamma.iter().position(|g| !g.is_finite()) {
            return Err(invalid(format!("non-finite probability at flat index {k}")));
        }
        let mut it = self.gamma.iter().copied();
        let prescriptions = (0..grid.len())
            .map(|_| {
                Prescription::new(
                    (0..spec.n_agents())
                        .map(|i| {
                            (0..spec.n_types(i))
                                .map(|_| it.by_ref().take(spec.n_actions(i)).collect())
                                .collect()
                        })
                        .collect(),
                )
            })
            .collect();
        Ok(PolicyGrid::new(grid, prescriptions, self.diagnostics.clone()))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serialises");
    fs::write(path, text + "\n").map_err(|source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ArtifactError::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// A solved `(V, theta)` pair read back from a directory.
pub struct Solved {
    pub values: ValueTable,
    pub policy: PolicyGrid,
    pub config: RunConfig,
}

fn check_hash(spec: &GameSpec, found: &str, path: &Path) -> Result<(), ArtifactError> {
    let expected = spec.content_hash();
    if found != expected {
        return Err(ArtifactError::Mismatch {
            path: path.display().to_string(),
            reason: format!("spec hash {found} differs from {expected}"),
        });
    }
    Ok(())
}

/// Load `values.json` and `policy.json` from `dir`, refusing artifacts made
/// from another spec or on differing grids. Non-finite values are reported
/// with their location.
pub fn load_solved(spec: &GameSpec, dir: &Path) -> Result<Solved, ArtifactError> {
    let vpath: PathBuf = dir.join(VALUES_FILE);
    let ppath: PathBuf = dir.join(POLICY_FILE);
    let va: ValuesArtifact = read_json(&vpath)?;
    let pa: PolicyArtifact = read_json(&ppath)?;
    check_hash(spec, &va.spec_hash, &vpath)?;
    check_hash(spec, &pa.spec_hash, &ppath)?;
    if va.grid != pa.grid {
        return Err(ArtifactError::Mismatch {
            path: ppath.display().to_string(),
            reason: "grid differs from the value table's".into(),
        });
    }
    let grid = Arc::new(va.grid.build().map_err(|e| ArtifactError::Invalid {
        path: vpath.display().to_string(),
        reason: e.to_string(),
    })?);
    let values = va.table(spec, grid.clone(), &vpath)?;
    if let Some((p, i, x)) = values.first_non_finite() {
        return Err(ArtifactError::Invalid {
            path: vpath.display().to_string(),
            reason: format!(
                "non-finite value at grid point {p} (belief {:?}), agent {}, type {}",
                grid.point(p).marginals,
                i + 1,
                spec.type_labels(i)[x]
            ),
        });
    }
    let policy = pa.policy(spec, grid, &ppath)?;
    Ok(Solved {
        values,
        policy,
        config: va.config,
    })
}
