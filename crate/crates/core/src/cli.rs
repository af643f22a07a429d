//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::artifacts::{
    load_solved, read_json, write_json, ArtifactError, GridInfo, PolicyArtifact, RunConfig, ValuesArtifact,
    POLICY_FILE, REPORT_FILE, VALUES_FILE,
};
use crate::finite_horizon::{backward_solve, FiniteHorizonConfig, SolveError};
use crate::game_model::{load_spec, public_goods_spec, save_spec, GameSpec, SpecError};
use crate::grid::{BeliefGrid, ValueTable};
use crate::infinite_horizon::{residual, solve_fixed_point, SolveConfig};
use crate::simulator::{belief_lattice, markov_chain_ensemble, EnsembleSummary};
use crate::stage_game::StageConfig;
use crate::verifier::{deviation_suite, lemma4_check, DeviationReport, Lemma4Report, SuiteConfig, VerifyError};

#[derive(Debug, Parser)]
#[command(name = "spbe", version, about = "Structured perfect Bayesian equilibria of finite-type dynamic games")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the infinite-horizon fixed point for (V, theta).
    Solve(Common),
    /// Backward recursion over a finite horizon.
    SolveFinite(FiniteArgs),
    /// Residual, finite-horizon consistency and deviation checks on solved artifacts.
    Verify(VerifyArgs),
    /// Simulate the belief Markov chain under solved artifacts.
    Simulate(SimulateArgs),
    /// Write one prescription surface as CSV.
    ExportSurface(ExportArgs),
    /// Write the two-agent public goods spec.
    PublicGoods(PublicGoodsArgs),
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Game spec (JSON).
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    pub grid_step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol_v: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol_res: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prefer agent-symmetric stage equilibria (two-agent symmetric games).
    #[arg(long)]
    pub symmetric: bool,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FiniteArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub horizon: usize,
    /// Terminal reward: a values.json artifact or `zero`.
    #[arg(long, default_value = "zero")]
    pub terminal: String,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Test points of the deviation suite.
    #[arg(long, default_value_t = 64)]
    pub points: usize,
    /// Monte Carlo rollouts per (point, strategy).
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = crate::verifier::DEFAULT_EPS_DEV)]
    pub eps_dev: f64,
    /// Rollout horizon (default: from the tail bound).
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Horizon of the finite-horizon consistency check.
    #[arg(long, default_value_t = 5)]
    pub lemma_horizon: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 30)]
    pub horizon: usize,
    #[arg(long, default_value_t = 40)]
    pub seeds: usize,
    /// Initial beliefs: every pair of these first-type probabilities.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    pub lattice: Vec<f64>,
    #[arg(long, default_value_t = crate::simulator::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Trajectory CSVs written per initial belief.
    #[arg(long, default_value_t = 1)]
    pub dump: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Agent, counted from 1.
    #[arg(long)]
    pub agent: usize,
    /// Own type label.
    #[arg(long = "type")]
    pub type_label: String,
    /// Action whose probability is exported (default: the last one).
    #[arg(long)]
    pub action: Option<String>,
}

#[derive(Debug, Args)]
pub struct PublicGoodsArgs {
    #[arg(long, default_value_t = 1.2)]
    pub x_high: f64,
    #[arg(long, default_value_t = 0.2)]
    pub x_low: f64,
    #[arg(long)]
    pub delta: f64,
    /// Output spec path.
    pub path: PathBuf,
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    NotConverged(String),
    Io(String),
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Validation(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io(_) => 4,
            CliError::Mismatch(_) => 5,
        })
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::NotConverged(m) | CliError::Io(m) | CliError::Mismatch(m) => m,
        }
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        match e {
            SpecError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Io { .. } => CliError::Io(e.to_string()),
            ArtifactError::Mismatch { .. } => CliError::Mismatch(e.to_string()),
            ArtifactError::Parse { .. } | ArtifactError::Invalid { .. } => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::TooManyUnconverged { .. } => CliError::NotConverged(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Solve(s) => s.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// Parse, run and map the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Solve(c) => cmd_solve(c),
        Command::SolveFinite(a) => cmd_solve_finite(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::ExportSurface(a) => cmd_export_surface(a),
        Command::PublicGoods(a) => {
            let spec = public_goods_spec(a.x_high, a.x_low, a.delta)?;
            save_spec(&spec, &a.path)?;
            Ok(())
        }
    }
}

impl Common {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.grid_step > 0.0 && self.grid_step <= 0.5) {
            return Err(CliError::Validation(format!(
                "--grid-step must lie in (0, 0.5] (got {})",
                self.grid_step
            )));
        }
        for (name, v) in [("--tol-v", self.tol_v), ("--tol-res", self.tol_res)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Validation(format!("{name} must be positive (got {v})")));
            }
        }
        if self.max_sweeps == 0 {
            return Err(CliError::Validation("--max-sweeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run_config(&self, command: &str) -> RunConfig {
        RunConfig {
            command: command.into(),
            spec_path: self.spec.display().to_string(),
            grid_step: self.grid_step,
            tol_v: self.tol_v,
            tol_res: self.tol_res,
            max_sweeps: self.max_sweeps,
            seed: self.seed,
            symmetric: self.symmetric,
            format: "json".into(),
        }
    }

    fn stage(&self) -> StageConfig {
        StageConfig {
            symmetric: self.symmetric,
            ..StageConfig::default()
        }
    }

    fn load(&self) -> Result<GameSpec, CliError> {
        self.validate()?;
        Ok(load_spec(&self.spec)?)
    }

    fn grid(&self, spec: &GameSpec) -> Result<Arc<BeliefGrid>, CliError> {
        BeliefGrid::new(spec, self.grid_step)
            .map(Arc::new)
            .map_err(|e| CliError::Validation(format!("--grid-step: {e}")))
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

#[derive(Debug, Serialize)]
struct SolveArtifact<'a> {
    spec_hash: String,
    config: &'a RunConfig,
    grid: GridInfo,
    sweeps: usize,
    history: &'a [f64],
    branch_switches: &'a [usize],
    residual: f64,
    normalized_residual: f64,
    converged: bool,
    oscillation_flagged: bool,
    unconverged_points: usize,
    max_stage_residual: f64,
}

pub fn cmd_solve(c: &Common) -> Result<(), CliError> {
    let spec = c.load()?;
    let grid = c.grid(&spec)?;
    let config = c.run_config("solve");
    let solve = SolveConfig {
        tol_v: c.tol_v,
        tol_res: c.tol_res,
        max_sweeps: c.max_sweeps,
        stage: c.stage(),
        ..SolveConfig::default()
    };
    let r = solve_fixed_point(&spec, grid.clone(), &solve)?;
    let out = c.out_dir()?;
    write_json(&out.join(VALUES_FILE), &ValuesArtifact::new(&spec, &config, &r.values))?;
    write_json(&out.join(POLICY_FILE), &PolicyArtifact::new(&spec, &config, &r.policy))?;
    let report = SolveArtifact {
        spec_hash: spec.content_hash(),
        config: &config,
        grid: GridInfo::of(&grid, &spec),
        sweeps: r.sweeps,
        history: &r.history,
        branch_switches: &r.branch_switches,
        residual: r.residual,
        normalized_residual: r.normalized_residual,
        converged: r.converged,
        oscillation_flagged: r.oscillation_flagged,
        unconverged_points: r.policy.diagnostics.iter().filter(|d| !d.converged).count(),
        max_stage_residual: r.policy.max_residual(),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    println!(
        "sweeps {}, last change {:.3e}, normalized residual {:.3e}, converged {}",
        r.sweeps,
        r.last_change(),
        r.normalized_residual,
        r.converged
    );
    if r.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "no fixed point within {} sweeps (last change {:.3e}, normalized residual {:.3e}); artifacts hold the last iterate",
            r.sweeps,
            r.last_change(),
            r.normalized_residual
        )))
    }
}

#[derive(Debug, Serialize)]
struct FiniteArtifact<'a> {
    spec_hash: String,
    config: &'a RunConfig,
    horizon: usize,
    terminal: &'a str,
    grid: GridInfo,
    value_index_order: &'static str,
    policy_index_order: &'static str,
    /// `values[t - 1]` for `t = 1..=T+1`; the last entry is the terminal reward.
    values: Vec<Vec<f64>>,
    /// `policies[t - 1]` for `t = 1..=T`.
    policies: Vec<Vec<f64>>,
}

pub fn cmd_solve_finite(a: &FiniteArgs) -> Result<(), CliError> {
    let c = &a.common;
    let spec = c.load()?;
    if a.horizon == 0 {
        return Err(CliError::Validation("--horizon must be at least 1".into()));
    }
    let grid = c.grid(&spec)?;
    let terminal = if a.terminal == "zero" {
        ValueTable::zeros(&spec, grid.clone())
    } else {
        let path = Path::new(&a.terminal);
        let va: ValuesArtifact = read_json(path)?;
        if va.grid != GridInfo::of(&grid, &spec) {
            return Err(CliError::Mismatch(format!(
                "{}: terminal grid differs from --grid-step {}",
                path.display(),
                c.grid_step
            )));
        }
        let t = va.table(&spec, grid.clone(), path)?;
        if let Some((p, i, x)) = t.first_non_finite() {
            return Err(CliError::Validation(format!(
                "{}: non-finite value at grid point {p}, agent {}, type {}",
                path.display(),
                i + 1,
                spec.type_labels(i)[x]
            )));
        }
        t
    };
    let finite = FiniteHorizonConfig {
        stage: c.stage(),
        ..FiniteHorizonConfig::default()
    };
    let sol = backward_solve(&spec, a.horizon, &terminal, &finite, None)?;
    let config = c.run_config("solve-finite");
    let artifact = FiniteArtifact {
        spec_hash: spec.content_hash(),
        config: &config,
        horizon: a.horizon,
        terminal: &a.terminal,
        grid: GridInfo::of(&grid, &spec),
        value_index_order: crate::artifacts::VALUE_ORDER,
        policy_index_order: crate::artifacts::POLICY_ORDER,
        values: sol.values.iter().map(|v| v.raw().to_vec()).collect(),
        policies: sol
            .policies
            .iter()
            .map(|p| PolicyArtifact::new(&spec, &config, p).gamma)
            .collect(),
    };
    write_json(&c.out_dir()?.join("finite.json"), &artifact)?;
    println!("solved {} stages", a.horizon);
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerifyArtifact<'a> {
    spec_hash: String,
    config: &'a RunConfig,
    solve_config: &'a RunConfig,
    normalized_residual: f64,
    residual_passed: bool,
    lemma4: Lemma4Report,
    /// Normalised residual of the solve, used as the interpolation slack.
    interpolation_slack: f64,
    lemma4_passed: bool,
    deviations: DeviationReport,
    passed: bool,
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<(), CliError> {
    let c = &a.common;
    let spec = c.load()?;
    let solved = load_solved(&spec, &c.out)?;
    let delta = spec.discount();
    let normalized_residual = (1.0 - delta) * residual(&spec, &solved.values, &solved.policy);
    let residual_passed = normalized_residual <= c.tol_res;
    let finite = FiniteHorizonConfig {
        stage: c.stage(),
        ..FiniteHorizonConfig::default()
    };
    let lemma4 = lemma4_check(&spec, &solved.values, Some(&solved.policy), a.lemma_horizon, &finite)?;
    let lemma4_passed = lemma4.normalized <= c.tol_v + 10.0 * normalized_residual;
    let suite = SuiteConfig {
        points: a.points,
        samples: a.samples,
        seed: c.seed,
        eps_dev: a.eps_dev,
        horizon: a.horizon,
    };
    let deviations = deviation_suite(&spec, &solved.values, &solved.policy, &suite)?;
    let passed = residual_passed && lemma4_passed && deviations.passed;
    let config = c.run_config("verify");
    info!("residual {normalized_residual:.3e}, lemma 4 {:.3e}", lemma4.normalized);
    println!(
        "residual {normalized_residual:.3e} ({}), finite-horizon consistency {:.3e} ({}), deviations {} of {} failed",
        verdict(residual_passed),
        lemma4.normalized,
        verdict(lemma4_passed),
        deviations.failures,
        deviations.entries.len()
    );
    let artifact = VerifyArtifact {
        spec_hash: spec.content_hash(),
        config: &config,
        solve_config: &solved.config,
        normalized_residual,
        residual_passed,
        lemma4,
        interpolation_slack: normalized_residual,
        lemma4_passed,
        deviations,
        passed,
    };
    write_json(&c.out.join("verify.json"), &artifact)?;
    if passed {
        Ok(())
    } else {
        Err(CliError::NotConverged("verification failed; see verify.json".into()))
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

#[derive(Debug, Serialize)]
struct SimulateArtifact<'a> {
    spec_hash: String,
    config: &'a RunConfig,
    solve_config: &'a RunConfig,
    summary: EnsembleSummary,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let c = &a.common;
    let spec = c.load()?;
    if spec.n_agents() != 2 {
        return Err(CliError::Validation("simulate uses a two-agent belief lattice".into()));
    }
    if a.horizon == 0 || a.seeds == 0 || a.lattice.is_empty() {
        return Err(CliError::Validation("--horizon, --seeds and --lattice must be nonempty".into()));
    }
    if let Some(p) = a.lattice.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CliError::Validation(format!("--lattice entry {p} is not a probability")));
    }
    let solved = load_solved(&spec, &c.out)?;
    let beliefs = belief_lattice(&a.lattice);
    let (summary, runs) = markov_chain_ensemble(
        &spec,
        &solved.policy,
        &beliefs,
        a.seeds,
        a.horizon,
        a.threshold,
        c.seed,
    );
    let dir = c.out.join("trajectories");
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    for (b, trajs) in runs.iter().enumerate() {
        for (s, t) in trajs.iter().take(a.dump).enumerate() {
            let path = dir.join(format!("belief{b:02}_seed{s:03}.csv"));
            let file =
                fs::File::create(&path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
            t.write_csv(&spec, file)
                .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    println!(
        "median time to concentration {}, fraction concentrated {:.3}",
        summary
            .median_time_to_concentration
            .map_or("never".to_string(), |t| t.to_string()),
        summary.fraction_concentrated
    );
    let config = c.run_config("simulate");
    let artifact = SimulateArtifact {
        spec_hash: spec.content_hash(),
        config: &config,
        solve_config: &solved.config,
        summary,
    };
    write_json(&c.out.join("learning.json"), &artifact)?;
    Ok(())
}

pub fn cmd_export_surface(a: &ExportArgs) -> Result<(), CliError> {
    let c = &a.common;
    let spec = c.load()?;
    if a.agent == 0 || a.agent > spec.n_agents() {
        return Err(CliError::Validation(format!(
            "--agent must be in 1..={} (got {})",
            spec.n_agents(),
            a.agent
        )));
    }
    let i = a.agent - 1;
    let x = spec.type_index(i, &a.type_label).ok_or_else(|| {
        CliError::Validation(format!(
            "--type {} is not a type of agent {} ({:?})",
            a.type_label,
            a.agent,
            spec.type_labels(i)
        ))
    })?;
    let action = match &a.action {
        Some(label) => spec
            .action_index(i, label)
            .ok_or_else(|| CliError::Validation(format!("--action {label} is not an action of agent {}", a.agent)))?,
        None => spec.n_actions(i) - 1,
    };
    let solved = load_solved(&spec, &c.out)?;
    let grid = solved.policy.grid().clone();
    let path = c.out.join(format!(
        "surface_agent{}_{}_delta{}.csv",
        a.agent,
        a.type_label,
        spec.discount()
    ));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let mut header: Vec<String> = (0..spec.n_agents())
        .map(|j| format!("pi{}_{}", j + 1, spec.type_labels(j)[0]))
        .collect();
    header.push(format!("gamma{}_{}_{}", a.agent, spec.action_labels(i)[action], a.type_label));
    w.write_record(&header).map_err(io)?;
    for p in 0..grid.len() {
        let belief = grid.point(p);
        let mut row: Vec<String> = belief.marginals.iter().map(|m| m[0].to_string()).collect();
        row.push(solved.policy.at(p).gamma[i][x][action].to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}
