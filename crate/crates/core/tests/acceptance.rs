//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs as a plain binary (no libtest harness) so that the verdict lines are
//! always printed. Expensive solves are shared between criteria.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spbe::belief::{update_marginal, ProductBelief};
use spbe::finite_horizon::FiniteHorizonConfig;
use spbe::game_model::{public_goods_spec, GameSpec, SpecFile};
use spbe::grid::{BeliefGrid, PolicyGrid};
use spbe::infinite_horizon::{solve_fixed_point, SolveConfig, SolveReport};
use spbe::simulator::{belief_lattice, coordination_benchmarks, markov_chain_ensemble, DEFAULT_THRESHOLD};
use spbe::stage_game::StageConfig;
use spbe::verifier::{deviation_suite, lemma4_check, SuiteConfig};

const X_HIGH: f64 = 1.2;
const X_LOW: f64 = 0.2;
const H: f64 = 0.02;
/// Sweep budget of the strongly discounted solve. At this grid a sweep costs
/// about two seconds on one core, so this keeps the solve near the runtime
/// target; the report states whether it converged.
const STRONG_SWEEPS: usize = 200;
const HIGH: usize = 0;
const LOW: usize = 1;
const CONTRIBUTE: usize = 1;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(max_sweeps: usize) -> SolveConfig {
    SolveConfig {
        max_sweeps,
        stage: StageConfig {
            symmetric: true,
            ..StageConfig::default()
        },
        ..SolveConfig::default()
    }
}

fn solve(delta: f64, max_sweeps: usize) -> (GameSpec, SolveReport, f64) {
    let spec = public_goods_spec(X_HIGH, X_LOW, delta).unwrap();
    let grid = Arc::new(BeliefGrid::new(&spec, H).unwrap());
    let t = Instant::now();
    let report = solve_fixed_point(&spec, grid, &config(max_sweeps)).expect("stage solves within cap");
    (spec, report, t.elapsed().as_secs_f64())
}

fn describe(r: &SolveReport) -> String {
    format!(
        "{} sweeps, converged {}, last change {:.2e}, normalized residual {:.2e}",
        r.sweeps,
        r.converged,
        r.last_change(),
        r.normalized_residual
    )
}

// ---- criterion 1

fn dominant_action(theta: &PolicyGrid, seconds: f64) -> Verdict {
    let nonzero = theta
        .prescriptions
        .iter()
        .filter(|p| (0..2).any(|i| p.gamma[i][HIGH][CONTRIBUTE] != 0.0))
        .count();
    Verdict {
        id: 1,
        name: "no contribution by the high type at zero discount",
        pass: nonzero == 0 && seconds < 5.0,
        detail: format!("{nonzero} offending points of {}, solve {seconds:.2} s (limit 5 s)", theta.prescriptions.len()),
    }
}

// ---- criterion 2: one-shot Bayesian Nash oracle

/// One-shot payoff of agent `i` with cost `c` contributing, minus not
/// contributing, when the other contributes with probability `q`:
/// `(1 - c) - q`.
fn contribution_gain(cost: f64, q: f64) -> f64 {
    (1.0 - cost) - q
}

/// Probability that agent `j` contributes, under belief `pi_j` on its types
/// and prescriptions `p[j][type]`.
fn contribution_prob(pi_j: &[f64], p_j: &[f64; 2]) -> f64 {
    pi_j[HIGH] * p_j[HIGH] + pi_j[LOW] * p_j[LOW]
}

/// Largest best-response gap of profile `p` in the one-shot game.
fn oracle_gap(pi: &ProductBelief, p: &[[f64; 2]; 2]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        let q = contribution_prob(&pi.marginals[1 - i], &p[1 - i]);
        for (x, cost) in [(HIGH, X_HIGH), (LOW, X_LOW)] {
            let d = contribution_gain(cost, q);
            let best = d.max(0.0);
            let got = p[i][x] * d;
            worst = worst.max(best - got);
        }
    }
    worst
}

/// All isolated equilibria found by enumerating supports {0, 1, mixed} of the
/// four (agent, type) components. Indifference of agent `i`'s type pins the
/// other agent's contribution probability, which is affine in its two
/// components, so each support reduces to a small linear system.
fn oracle_equilibria(pi: &ProductBelief) -> Vec<[[f64; 2]; 2]> {
    let costs = [X_HIGH, X_LOW];
    let mut found: Vec<[[f64; 2]; 2]> = Vec::new();
    for code in 0..81usize {
        let mut support = [[0u8; 2]; 2];
        let mut c = code;
        for s in support.iter_mut().flatten() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        // unknowns: mixed components of each agent; equations: each mixed
        // component of agent i needs q_{-i} = 1 - cost
        let mut p = [[0.0f64; 2]; 2];
        let mut ok = true;
        for i in 0..2 {
            let j = 1 - i;
            let targets: Vec<f64> = (0..2).filter(|&x| support[i][x] == 2).map(|x| 1.0 - costs[x]).collect();
            let mixed_j: Vec<usize> = (0..2).filter(|&x| support[j][x] == 2).collect();
            let fixed: f64 = (0..2)
                .filter(|&x| support[j][x] == 1)
                .map(|x| pi.marginals[j][x])
                .sum();
            if targets.is_empty() {
                continue;
            }
            if targets.len() == 2 && (targets[0] - targets[1]).abs() > 0.0 {
                ok = false;
                break;
            }
            let need = targets[0] - fixed;
            match mixed_j.len() {
                1 => {
                    let w = pi.marginals[j][mixed_j[0]];
                    if w <= 0.0 {
                        ok = false;
                        break;
                    }
                    p[j][mixed_j[0]] = need / w;
                }
                // a continuum (or none): not isolated
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        for i in 0..2 {
            for x in 0..2 {
                match support[i][x] {
                    0 => p[i][x] = 0.0,
                    1 => p[i][x] = 1.0,
                    _ => {
                        if !(p[i][x] > 0.0 && p[i][x] < 1.0) {
                            ok = false;
                        }
                    }
                }
            }
        }
        // mixed components of an agent whose opponent has no mixed component
        // are determined only if the indifference holds exactly
        if ok && oracle_gap(pi, &p) <= 1e-12 && !found.iter().any(|f| max_diff(f, &p) <= 1e-9) {
            found.push(p);
        }
    }
    found
}

fn max_diff(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn asymmetry(p: &[[f64; 2]; 2]) -> f64 {
    (0..2).map(|x| (p[0][x] - p[1][x]).abs()).sum()
}

fn oracle_equivalence(theta: &PolicyGrid) -> Verdict {
    let grid = theta.grid();
    let mut matched = 0;
    let mut degenerate = 0;
    let mut failures = Vec::new();
    for pt in 0..grid.len() {
        let pi = grid.point(pt);
        let g = &theta.at(pt).gamma;
        let got = [
            [g[0][HIGH][CONTRIBUTE], g[0][LOW][CONTRIBUTE]],
            [g[1][HIGH][CONTRIBUTE], g[1][LOW][CONTRIBUTE]],
        ];
        let eqs = oracle_equilibria(&pi);
        let min_asym = eqs.iter().map(asymmetry).fold(f64::INFINITY, f64::min);
        let branch: Vec<&[[f64; 2]; 2]> = eqs.iter().filter(|e| asymmetry(e) <= min_asym + 1e-9).collect();
        // types with zero probability affect neither payoffs nor beliefs; they
        // only have to best-respond
        let active_diff = |e: &[[f64; 2]; 2]| {
            (0..2)
                .flat_map(|i| (0..2).map(move |x| (i, x)))
                .filter(|&(i, x)| pi.marginals[i][x] > 0.0)
                .map(|(i, x)| (e[i][x] - got[i][x]).abs())
                .fold(0.0, f64::max)
        };
        if oracle_gap(&pi, &got) <= 1e-9 && branch.iter().any(|e| active_diff(e) <= 1e-6) {
            matched += 1;
        } else if oracle_gap(&pi, &got) <= 1e-9 && asymmetry(&got) <= min_asym + 1e-6 {
            // the symmetric branch is not isolated here (a continuum of
            // equilibria); the solver's point is an equilibrium on it
            degenerate += 1;
        } else {
            failures.push(format!("{:?}: got {got:?}, oracle {branch:?}", pi.marginals));
        }
    }
    Verdict {
        id: 2,
        name: "zero-discount policy equals the one-shot Bayesian Nash oracle",
        pass: failures.is_empty(),
        detail: format!(
            "{matched} matched within 1e-6, {degenerate} on a non-isolated symmetric branch, {} mismatched{}",
            failures.len(),
            failures.first().map(|f| format!("; first {f}")).unwrap_or_default()
        ),
    }
}

// ---- criteria 3 and 4

fn normalized_range(spec: &GameSpec, r: &SolveReport, x: usize) -> (f64, f64) {
    let scale = 1.0 - spec.discount();
    let g = r.values.grid();
    (0..g.len())
        .map(|p| scale * r.values.get(p, 0, x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn value_ranges(spec: &GameSpec, r: &SolveReport, seconds: f64) -> Verdict {
    let (l_lo, l_hi) = normalized_range(spec, r, LOW);
    let (h_lo, h_hi) = normalized_range(spec, r, HIGH);
    let near = |v: f64, target: f64| (v - target).abs() <= 0.02;
    let pass = near(l_lo, 0.865) && near(l_hi, 0.894) && near(h_lo, 0.3) && near(h_hi, 0.395);
    Verdict {
        id: 3,
        name: "normalized value ranges at discount 0.95",
        pass,
        detail: format!(
            "low type [{l_lo:.4}, {l_hi:.4}] vs [0.865, 0.894], high type [{h_lo:.4}, {h_hi:.4}] vs [0.3, 0.395], tolerance 0.02; {}; {seconds:.0} s",
            describe(r)
        ),
    }
}

fn coordination(spec: &GameSpec, r: &SolveReport) -> Verdict {
    let exact = |x: f64, full: f64, none: f64| {
        let (f, n) = coordination_benchmarks(x);
        // (1 - x/2)^2 is not exactly representable for x = 1.2
        (f - full).abs() <= 1e-15 && (n - none).abs() <= 1e-15
    };
    let benchmarks = exact(X_LOW, 0.9, 0.81) && exact(X_HIGH, 0.4, 0.16);
    let (_, l_hi) = normalized_range(spec, r, LOW);
    let (_, h_hi) = normalized_range(spec, r, HIGH);
    let (l_full, _) = coordination_benchmarks(X_LOW);
    let (h_full, _) = coordination_benchmarks(X_HIGH);
    let bounded = l_hi <= l_full + 0.01 && h_hi <= h_full + 0.01;
    Verdict {
        id: 4,
        name: "coordination benchmarks bound the equilibrium values",
        pass: benchmarks && bounded,
        detail: format!(
            "benchmarks {}; max low {l_hi:.4} vs {:.2}, max high {h_hi:.4} vs {:.2}",
            if benchmarks { "exact" } else { "wrong" },
            l_full + 0.01,
            h_full + 0.01
        ),
    }
}

// ---- criterion 5

/// Fraction of grid points with agent 1's high-type probability at least 0.5
/// where its low type never contributes.
fn free_riding_region(theta: &PolicyGrid) -> f64 {
    let grid = theta.grid();
    let high: Vec<usize> = (0..grid.len()).filter(|&p| grid.point(p).marginals[0][HIGH] >= 0.5).collect();
    let zero = high
        .iter()
        .filter(|&&p| theta.at(p).gamma[0][LOW][CONTRIBUTE] <= 1e-9)
        .count();
    zero as f64 / high.len() as f64
}

fn signaling(thetas: [&PolicyGrid; 3]) -> Verdict {
    let m: Vec<f64> = thetas.iter().map(|t| free_riding_region(t)).collect();
    Verdict {
        id: 5,
        name: "free-riding region at high beliefs grows with the discount",
        pass: m[0] <= m[1] && m[1] <= m[2],
        detail: format!("fractions {:.4}, {:.4}, {:.4} at discount 0, 0.5, 0.95", m[0], m[1], m[2]),
    }
}

// ---- criterion 6

fn lemma4(spec: &GameSpec, r: &SolveReport) -> Verdict {
    let finite = FiniteHorizonConfig {
        stage: config(1).stage,
        ..FiniteHorizonConfig::default()
    };
    let rep = lemma4_check(spec, &r.values, Some(&r.policy), 5, &finite).unwrap();
    let slack = r.normalized_residual;
    let bound = config(1).tol_v + 10.0 * slack;
    Verdict {
        id: 6,
        name: "finite-horizon game with terminal V reproduces V",
        pass: r.converged && rep.normalized <= bound,
        detail: format!(
            "normalized discrepancy {:.3e} vs {:.3e} (slack {slack:.3e}); {}",
            rep.normalized,
            bound,
            describe(r)
        ),
    }
}

// ---- criterion 7

fn deviations(spec: &GameSpec, r: &SolveReport) -> Verdict {
    let t = Instant::now();
    let rep = deviation_suite(spec, &r.values, &r.policy, &SuiteConfig::default()).unwrap();
    let worst = rep
        .entries
        .iter()
        .max_by(|a, b| (a.gap - a.threshold()).partial_cmp(&(b.gap - b.threshold())).unwrap());
    Verdict {
        id: 7,
        name: "no profitable deviation at discount 0.95",
        pass: rep.passed,
        detail: format!(
            "{} of {} tests failed, horizon {}, max gap {:.3e}{}; {:.0} s; solve: {}",
            rep.failures,
            rep.entries.len(),
            rep.horizon,
            rep.max_gap,
            worst
                .map(|w| format!(" (worst margin: {} gap {:.3e} threshold {:.3e})", w.strategy, w.gap, w.threshold()))
                .unwrap_or_default(),
            t.elapsed().as_secs_f64(),
            describe(r)
        ),
    }
}

// ---- criterion 8

fn random_distribution(rng: &mut ChaCha8Rng, n: usize, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| if zeros && rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if v.iter().all(|&p| p == 0.0) {
        v[rng.gen_range(0..n)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= s);
    v
}

/// Random two-agent game with 1..=3 types and 2..=3 actions per agent.
fn random_game(rng: &mut ChaCha8Rng) -> GameSpec {
    let nt = [rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let na = [rng.gen_range(2..=3), rng.gen_range(2..=3)];
    let joint_t = nt[0] * nt[1];
    let joint_a = na[0] * na[1];
    let q = (0..2)
        .map(|i| {
            (0..nt[i])
                .map(|_| (0..joint_a).map(|_| random_distribution(rng, nt[i], true)).collect())
                .collect()
        })
        .collect();
    GameSpec::from_file(SpecFile {
        agents: 2,
        types: (0..2).map(|i| (0..nt[i]).map(|x| format!("t{x}")).collect()).collect(),
        actions: (0..2).map(|i| (0..na[i]).map(|a| format!("a{a}")).collect()).collect(),
        q0: None,
        q,
        reward: vec![vec![vec![0.0; joint_a]; joint_t]; 2],
        delta: 0.5,
    })
    .unwrap()
}

/// Posterior on agent `i`'s next type by enumerating joint types and
/// conditioning on the whole joint action. `None` when the other agent's
/// action has probability zero, where joint conditioning is undefined.
fn brute_force_posterior(
    spec: &GameSpec,
    pi: &[Vec<f64>],
    gamma: &[Vec<Vec<f64>>],
    joint_action: usize,
    agent: usize,
) -> Option<Vec<f64>> {
    let acts = spec.joint_actions().unflatten(joint_action);
    let kernel = spec.kernel(agent);
    let n = spec.n_types(agent);
    let mut num = vec![0.0; n];
    let mut den = 0.0;
    let mut pushed = vec![0.0; n];
    let mut other = 0.0;
    let mut own = 0.0;
    for xf in 0..spec.joint_types().len() {
        let xs = spec.joint_types().unflatten(xf);
        let p_types: f64 = (0..2).map(|j| pi[j][xs[j]]).product();
        let p_act: f64 = (0..2).map(|j| gamma[j][xs[j]][acts[j]]).product();
        let row = kernel.row(xs[agent], joint_action);
        for y in 0..n {
            num[y] += p_types * p_act * row[y];
            pushed[y] += p_types * row[y];
        }
        den += p_types * p_act;
        other += p_types * gamma[1 - agent][xs[1 - agent]][acts[1 - agent]];
        own += p_types * gamma[agent][xs[agent]][acts[agent]];
    }
    if own <= 1e-12 {
        // unexpected own action: unconditional push-forward
        return Some(pushed);
    }
    if other == 0.0 {
        return None;
    }
    Some(num.iter().map(|v| v / den).collect())
}

fn bayes_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut calls = 0;
    while calls < 10_000 {
        let spec = random_game(&mut rng);
        for _ in 0..50 {
            if calls == 10_000 {
                break;
            }
            let pi: Vec<Vec<f64>> = (0..2).map(|j| random_distribution(&mut rng, spec.n_types(j), true)).collect();
            let gamma: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|j| {
                    (0..spec.n_types(j))
                        .map(|_| random_distribution(&mut rng, spec.n_actions(j), true))
                        .collect()
                })
                .collect();
            let a = rng.gen_range(0..spec.joint_actions().len());
            let agent = rng.gen_range(0..2);
            let Some(want) = brute_force_posterior(&spec, &pi, &gamma, a, agent) else {
                continue;
            };
            let got = update_marginal(&pi[agent], &gamma[agent], a, &spec.kernel(agent));
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
            worst_norm = worst_norm.max((got.iter().sum::<f64>() - 1.0).abs());
            calls += 1;
        }
    }
    Verdict {
        id: 8,
        name: "belief update equals brute-force Bayes",
        pass: worst <= 1e-12 && worst_norm <= 1e-9,
        detail: format!("{calls} updates, max error {worst:.2e} (limit 1e-12), max normalization error {worst_norm:.2e}"),
    }
}

// ---- criterion 9

fn learning(spec: &GameSpec, r: &SolveReport) -> Verdict {
    let lattice = belief_lattice(&[0.1, 0.3, 0.5, 0.7, 0.9]);
    let (summary, _) = markov_chain_ensemble(spec, &r.policy, &lattice, 40, 30, DEFAULT_THRESHOLD, 9);
    let within = summary.fraction_within(10);
    Verdict {
        id: 9,
        name: "types learned within 10 rounds at discount 0.95",
        pass: within >= 0.8,
        detail: format!(
            "{:.3} of {} runs concentrated (threshold {}) within 10 updates, limit 0.8; median time {}; {}",
            within,
            lattice.len() * 40,
            DEFAULT_THRESHOLD,
            summary
                .median_time_to_concentration
                .map_or("never".to_string(), |t| t.to_string()),
            describe(r)
        ),
    }
}

// ---- criterion 10

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spbe")).args(args).output().expect("binary runs")
}

fn determinism(dir: &Path) -> Verdict {
    let spec = dir.join("pg.json");
    let spec_s = spec.to_str().unwrap();
    let made = run_cli(&["public-goods", "--delta", "0.5", spec_s]);
    assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));
    let mut outputs = Vec::new();
    let mut codes = Vec::new();
    for (k, threads) in ["1", "2", "4", "1"].iter().enumerate() {
        let out = dir.join(format!("run{k}"));
        let o = run_cli(&[
            "--threads",
            threads,
            "solve",
            spec_s,
            "--grid-step",
            "0.05",
            "--symmetric",
            "--out",
            out.to_str().unwrap(),
        ]);
        codes.push(o.status.code());
        let files: Vec<Vec<u8>> = ["values.json", "policy.json", "report.json"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap_or_default())
            .collect();
        outputs.push(files);
    }
    let identical = outputs.iter().all(|o| o == &outputs[0] && o.iter().all(|f| !f.is_empty()));
    Verdict {
        id: 10,
        name: "solve artifacts byte-identical across runs and thread counts",
        pass: identical && codes.iter().all(|c| *c == Some(0)),
        detail: format!("threads 1, 2, 4, 1: identical {identical}, exit codes {codes:?}"),
    }
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        println!(
            "criterion {:>2} {}: {} ({})",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
        verdicts.push(v.pass);
    };

    let (_, r0, t0) = solve(0.0, 1);
    report(dominant_action(&r0.policy, t0));
    report(oracle_equivalence(&r0.policy));

    let (spec95, r95, t95) = solve(0.95, STRONG_SWEEPS);
    report(value_ranges(&spec95, &r95, t95));
    report(coordination(&spec95, &r95));

    let (spec5, r5, _) = solve(0.5, SolveConfig::default().max_sweeps);
    report(signaling([&r0.policy, &r5.policy, &r95.policy]));
    report(lemma4(&spec5, &r5));
    report(deviations(&spec95, &r95));
    report(bayes_oracle());
    report(learning(&spec95, &r95));

    let dir = tempfile::tempdir().unwrap();
    report(determinism(dir.path()));

    let passed = verdicts.iter().filter(|p| **p).count();
    println!("acceptance: {passed} of {} criteria passed", verdicts.len());
    if passed == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
