//! Command-line front end: graph loading, subcommand dispatch, artifact
//! output.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure
//! (prefixed with the failing module error), 4 out-of-regime refusal.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gnls::bifurcation::{bifurcation_verdict, branch_csv, geometric_grid, sweep};
use gnls::cones::{default_nu, separation_delta};
use gnls::error::Error as CoreError;
use gnls::flow::{descend, trajectory_csv, ConeRestriction, FlowParams};
use gnls::functional::{
    compute_thresholds, estimate_k_constant, KEstimate, ProblemParams, ThresholdReport,
};
use gnls::graph_core::{build_graph, Discretization, GraphSpec, MetricGraph};
use gnls::lab::{
    convexity_check, flow_invariance_check, limit_check, mirror_g_cone_checks,
    mirror_pde_scenario, scaling_check, LabScenario,
};
use gnls::minmax::{solve_ladder, Ladder};
use gnls::spectrum::{eigenpairs_seeded, spectral_gap_indices, SpectralData};

use config::{ArtifactMeta, RunConfig};

#[derive(Parser)]
#[command(
    name = "gnls",
    version,
    about = "Prescribed-mass NLS bound states on compact metric graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Graph description JSON file.
    #[arg(long)]
    graph: PathBuf,
    /// Cells per edge (edges may override via their "cells" field).
    #[arg(long, default_value_t = 96)]
    cells: usize,
    /// Gauss quadrature points per cell.
    #[arg(long, default_value_t = 5)]
    quad_order: usize,
    /// Number of eigenpairs to compute.
    #[arg(short = 'k', long, default_value_t = 6)]
    eigen_count: usize,
    /// Eigensolver stagnation tolerance.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Base RNG seed (start vectors, samplers, multistarts).
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalue ladder of the Kirchhoff Laplacian.
    Spectrum {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Mass thresholds of the variational regime.
    Thresholds {
        #[command(flatten)]
        common: CommonArgs,
        /// Nonlinearity exponent (> 6).
        #[arg(long)]
        p: f64,
        /// Mass, or "auto" for half the aggregate threshold.
        #[arg(long, default_value = "auto")]
        mu: String,
        /// Linking indices, comma separated; "auto" takes every admissible
        /// index in range.
        #[arg(long, default_value = "auto")]
        indices: String,
        /// Sample count for the Gagliardo-Nirenberg constant estimator.
        #[arg(long, default_value_t = 24)]
        samples: usize,
    },
    /// Ladder of bound states: sign-changing per index plus the positive one.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value = "auto")]
        mu: String,
        /// Linking indices, e.g. "2,3".
        #[arg(long, default_value = "2")]
        indices: String,
        #[arg(long, default_value_t = 24)]
        samples: usize,
        /// Cap grid density per angular dimension.
        #[arg(long, default_value_t = 16)]
        grid_density: usize,
        /// Base starts per index in the multistart.
        #[arg(long, default_value_t = 4)]
        multistart: usize,
        /// Refuse masses above the computed thresholds (exit code 4).
        #[arg(long)]
        strict: bool,
    },
    /// Continue a sign-changing branch toward vanishing mass.
    Bifurcate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        p: f64,
        /// Branch index.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Starting mass, or "auto" for half the index threshold.
        #[arg(long, default_value = "auto")]
        mu_start: String,
        /// Number of geometric grid points.
        #[arg(long, default_value_t = 8)]
        points: usize,
        /// Geometric grid ratio.
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        /// Verdict tolerance (relative to lambda_k).
        #[arg(long, default_value_t = 0.05)]
        verdict_tol: f64,
        #[arg(long, default_value_t = 24)]
        samples: usize,
        #[arg(long)]
        strict: bool,
    },
    /// Finite-dimensional invariance lab.
    Lab {
        /// Scenario: all, orthant, halfspaces, counterexample, quarter, mirror.
        #[arg(long, default_value = "all")]
        scenario: String,
        /// Starts for the flow invariance check.
        #[arg(long, default_value_t = 100)]
        starts: usize,
        /// Flow horizon.
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Convert artifacts from a prior run into gnuplot-ready .dat files.
    Plots {
        /// Directory holding the run artifacts.
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Numerical(CoreError),
    OutOfRegime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::OutOfRegime(_) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("configuration error: {m}"),
            CliError::Numerical(e) => format!("numerical failure: {e}"),
            CliError::OutOfRegime(m) => format!("out-of-regime refusal: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::OutOfRegime(m) => CliError::OutOfRegime(m),
            other => CliError::Numerical(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gnls: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Spectrum { common } => cmd_spectrum(common),
        Command::Thresholds {
            common,
            p,
            mu,
            indices,
            samples,
        } => cmd_thresholds(common, p, mu, indices, samples),
        Command::Solve {
            common,
            p,
            mu,
            indices,
            samples,
            grid_density,
            multistart,
            strict,
        } => cmd_solve(common, p, mu, indices, samples, grid_density, multistart, strict),
        Command::Bifurcate {
            common,
            p,
            k,
            mu_start,
            points,
            ratio,
            verdict_tol,
            samples,
            strict,
        } => cmd_bifurcate(common, p, k, mu_start, points, ratio, verdict_tol, samples, strict),
        Command::Lab {
            scenario,
            starts,
            horizon,
            dim,
            seed,
            out,
        } => cmd_lab(scenario, starts, horizon, dim, seed, out),
        Command::Plots { artifacts, out } => cmd_plots(artifacts, out),
    }
}

struct Workspace {
    graph: MetricGraph,
    d: Discretization,
    spectral: SpectralData,
    graph_bytes: Vec<u8>,
}

fn load_workspace(common: &CommonArgs) -> Result<Workspace, CliError> {
    let graph_bytes = fs::read(&common.graph)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", common.graph.display())))?;
    let spec: GraphSpec = serde_json::from_slice(&graph_bytes)
        .map_err(|e| CliError::Config(format!("invalid graph JSON: {e}")))?;
    let graph = build_graph(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    if common.quad_order < 2 {
        return Err(CliError::Config("quad order must be at least 2".into()));
    }
    let d = Discretization::assemble_uniform(&graph, common.cells, common.quad_order)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let spectral = eigenpairs_seeded(&d, common.eigen_count, common.tol, common.seed)?;
    Ok(Workspace {
        graph,
        d,
        spectral,
        graph_bytes,
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(&path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn base_config(sub: &str, common: &CommonArgs) -> RunConfig {
    RunConfig {
        subcommand: sub.to_string(),
        graph: String::new(),
        p: None,
        mu: None,
        indices: Vec::new(),
        cells: common.cells,
        quad_order: common.quad_order,
        eigen_count: common.eigen_count,
        tol: common.tol,
        seed: common.seed,
        samples: 0,
        grid_density: 0,
        multistart: 0,
        points: 0,
        ratio: 0.0,
        strict: false,
        scenario: None,
        starts: 0,
        horizon: 0.0,
    }
}

fn parse_indices(
    arg: &str,
    spectral: &SpectralData,
    eigen_count: usize,
) -> Result<Vec<usize>, CliError> {
    if arg == "auto" {
        let mut idx = spectral_gap_indices(spectral);
        idx.retain(|&k| k < eigen_count);
        if idx.is_empty() {
            return Err(CliError::Config(
                "no admissible indices in the computed spectrum".into(),
            ));
        }
        return Ok(idx);
    }
    let mut out = Vec::new();
    for part in arg.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad index '{part}'")))?;
        if k < 2 {
            return Err(CliError::Config(format!("index {k} must be at least 2")));
        }
        out.push(k);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// K estimation plus the threshold report at the given mass; the per-index
/// roots are mass-free, so a provisional mass yields the same thresholds.
fn thresholds_pipeline(
    ws: &Workspace,
    p: f64,
    mu: f64,
    indices: &[usize],
    samples: usize,
    seed: u64,
) -> Result<(KEstimate, ThresholdReport), CliError> {
    let params = ProblemParams::new(p, mu).map_err(CliError::from)?;
    let k_est = estimate_k_constant(&ws.d, p, samples, seed)?;
    let report = compute_thresholds(&ws.d, params, &k_est, &ws.spectral, indices)?;
    Ok((k_est, report))
}

fn resolve_mu(arg: &str, auto_value: f64) -> Result<f64, CliError> {
    if arg == "auto" {
        return Ok(auto_value);
    }
    let v: f64 = arg
        .parse()
        .map_err(|_| CliError::Config(format!("bad mass '{arg}'")))?;
    if !(v > 0.0) {
        return Err(CliError::Config("mass must be positive".into()));
    }
    Ok(v)
}

#[derive(Serialize)]
struct SpectrumArtifact {
    meta: ArtifactMeta,
    graph_hash: String,
    total_length: f64,
    eigenvalues: Vec<f64>,
    gap_indices: Vec<usize>,
    eigensolver_seed: u64,
    iterations: usize,
    max_residual: f64,
    /// Basis convention: first DOF with |phi| > tol is positive; the basis
    /// inside multiple eigenspaces is fixed by the seed.
    sign_convention: String,
}

fn cmd_spectrum(common: CommonArgs) -> Result<(), CliError> {
    let ws = load_workspace(&common)?;
    let mut cfg = base_config("spectrum", &common);
    cfg.graph = common.graph.display().to_string();
    let meta = ArtifactMeta::new(cfg.fingerprint(&ws.graph_bytes), common.seed);
    let artifact = SpectrumArtifact {
        meta,
        graph_hash: gnls::util::hex64(ws.graph.fingerprint()),
        total_length: ws.graph.total_length(),
        eigenvalues: ws.spectral.eigenvalues.clone(),
        gap_indices: spectral_gap_indices(&ws.spectral),
        eigensolver_seed: ws.spectral.seed,
        iterations: ws.spectral.iterations,
        max_residual: ws.spectral.max_residual,
        sign_convention: "first DOF with |phi| > tol positive".into(),
    };
    let path = write_json(&common.out, "spectrum.json", &artifact)?;
    println!("  k    lambda_k");
    for (i, l) in ws.spectral.eigenvalues.iter().enumerate() {
        println!("{:>3}    {l:.12e}", i + 1);
    }
    println!("artifact: {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ThresholdsArtifact {
    meta: ArtifactMeta,
    graph_hash: String,
    report: ThresholdReport,
}

fn cmd_thresholds(
    common: CommonArgs,
    p: f64,
    mu_arg: String,
    indices_arg: String,
    samples: usize,
) -> Result<(), CliError> {
    if !(p > 6.0) {
        return Err(CliError::Config(format!("p = {p} must exceed 6")));
    }
    let ws = load_workspace(&common)?;
    let indices = parse_indices(&indices_arg, &ws.spectral, common.eigen_count)?;
    let (_, provisional) = thresholds_pipeline(&ws, p, 1.0, &indices, samples, common.seed)?;
    let mu = resolve_mu(&mu_arg, 0.5 * provisional.mu_j)?;
    let (_, report) = thresholds_pipeline(&ws, p, mu, &indices, samples, common.seed)?;

    let mut cfg = base_config("thresholds", &common);
    cfg.graph = common.graph.display().to_string();
    cfg.p = Some(p);
    cfg.mu = Some(mu_arg);
    cfg.indices = indices;
    cfg.samples = samples;
    let meta = ArtifactMeta::new(cfg.fingerprint(&ws.graph_bytes), common.seed);
    let artifact = ThresholdsArtifact {
        meta,
        graph_hash: gnls::util::hex64(ws.graph.fingerprint()),
        report,
    };
    let path = write_json(&common.out, "thresholds.json", &artifact)?;
    let r = &artifact.report;
    println!("p = {}, mu = {:.6e}, l = {:.6e}", r.p, r.mu, r.ell);
    println!(
        "K = {:.6e} (raw {:.6e}, {} samples, seed {})",
        r.k_constant, r.k_provenance.raw_max, r.k_provenance.samples, r.k_provenance.seed
    );
    println!(
        "b = {:.6e}  rho* = {:.6e}  M1 = {:.6e}  M2 = {:.6e}",
        r.b, r.rho_star, r.m1, r.m2
    );
    println!(
        "mu_1 = {:.6e}  mu_tilde = {:.6e}  mu_j = {:.6e}",
        r.mu_1, r.mu_tilde, r.mu_j
    );
    for e in &r.indices {
        println!(
            "k = {}: mu_hat = {:.6e}  mu_bar = {:.6e}  mu_star = {:.6e}  mu_check = {:.6e}",
            e.k, e.mu_hat, e.mu_bar, e.mu_star, e.mu_check
        );
    }
    println!("note: {}", r.caveat);
    println!("artifact: {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SolveArtifact {
    meta: ArtifactMeta,
    graph_hash: String,
    mu: f64,
    p: f64,
    nu: f64,
    separation_delta: f64,
    thresholds: ThresholdReport,
    ladder: Ladder,
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    common: CommonArgs,
    p: f64,
    mu_arg: String,
    indices_arg: String,
    samples: usize,
    grid_density: usize,
    multistart: usize,
    strict: bool,
) -> Result<(), CliError> {
    if !(p > 6.0) {
        return Err(CliError::Config(format!("p = {p} must exceed 6")));
    }
    let ws = load_workspace(&common)?;
    let indices = parse_indices(&indices_arg, &ws.spectral, common.eigen_count)?;
    let (_, provisional) = thresholds_pipeline(&ws, p, 1.0, &indices, samples, common.seed)?;
    let mu = resolve_mu(&mu_arg, 0.5 * provisional.mu_j)?;
    if strict {
        for e in &provisional.indices {
            if mu >= e.mu_check {
                return Err(CliError::OutOfRegime(format!(
                    "mu = {mu:.6e} >= mu_check(k={}) = {:.6e} \
                     (min of mu_hat_{k}, mu_bar_{k}, mu_star_{k}, mu_tilde)",
                    e.k,
                    e.mu_check,
                    k = e.k
                )));
            }
        }
        if mu >= provisional.mu_j {
            return Err(CliError::OutOfRegime(format!(
                "mu = {mu:.6e} >= mu_j = {:.6e}",
                provisional.mu_j
            )));
        }
    }
    let (_, report) = thresholds_pipeline(&ws, p, mu, &indices, samples, common.seed)?;
    let est = separation_delta(
        &ws.d,
        &ws.spectral,
        indices[0],
        mu,
        report.rho_star,
        16,
        common.seed,
    )?;
    let nu = default_nu(&est, None);
    let flow = FlowParams::solver(1e-9).with_barrier(report.rho_star, report.m2);
    let ladder = solve_ladder(
        &ws.d,
        &ws.spectral,
        &report,
        &indices,
        nu,
        &flow,
        grid_density,
        multistart,
        common.seed,
    )?;

    // Recorded trajectory artifact: the positive-state cone descent.
    let mut traj_flow = FlowParams::solver(1e-9).with_barrier(report.rho_star, report.m2);
    traj_flow.cone_restrict = Some(ConeRestriction::Positive);
    traj_flow.nu = Some(nu);
    traj_flow.record_every = 1;
    let mut rng = gnls::util::rng_for(common.seed, 0xC0DE);
    let noise = gnls::graph_core::FieldOnGraph::from_fn(ws.d.n_dofs(), |_, _| {
        use rand::Rng;
        rng.random::<f64>() * 2.0 - 1.0
    });
    let u0 = &ws.d.kappa(mu)
        + ws.d.s_solve(&ws.d.m_apply(&noise)) * (0.05 * (mu / ws.graph.total_length()).sqrt());
    let traj = descend(&ws.d, &u0, p, mu, &traj_flow)?;
    write_text(&common.out, "trajectory.csv", &trajectory_csv(&traj))?;

    let mut cfg = base_config("solve", &common);
    cfg.graph = common.graph.display().to_string();
    cfg.p = Some(p);
    cfg.mu = Some(mu_arg);
    cfg.indices = indices.clone();
    cfg.samples = samples;
    cfg.grid_density = grid_density;
    cfg.multistart = multistart;
    cfg.strict = strict;
    let meta = ArtifactMeta::new(cfg.fingerprint(&ws.graph_bytes), common.seed);
    let artifact = SolveArtifact {
        meta,
        graph_hash: gnls::util::hex64(ws.graph.fingerprint()),
        mu,
        p,
        nu,
        separation_delta: est.delta,
        thresholds: report,
        ladder,
    };
    let path = write_json(&common.out, "solutions.json", &artifact)?;
    println!("mu = {mu:.6e}, nu = {nu:.6e}");
    for (sol, _) in &artifact.ladder.sign_changing {
        println!(
            "k = {}: E = {:.9e}, lambda = {:.6e}, residual = {:.3e}, sign changes = {}",
            sol.k.unwrap(),
            sol.energy,
            sol.pde_lambda,
            sol.residual,
            sol.sign_changes
        );
    }
    let (pos, _) = &artifact.ladder.positive;
    println!(
        "positive: E = {:.9e}, lambda = {:.6e}, residual = {:.3e}",
        pos.energy, pos.pde_lambda, pos.residual
    );
    println!("artifact: {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BifurcateArtifact {
    meta: ArtifactMeta,
    graph_hash: String,
    k: usize,
    lambda_target: f64,
    mu_grid: Vec<f64>,
    verdict: gnls::bifurcation::BranchVerdict,
}

#[allow(clippy::too_many_arguments)]
fn cmd_bifurcate(
    common: CommonArgs,
    p: f64,
    k: usize,
    mu_start_arg: String,
    points: usize,
    ratio: f64,
    verdict_tol: f64,
    samples: usize,
    strict: bool,
) -> Result<(), CliError> {
    if !(p > 6.0) {
        return Err(CliError::Config(format!("p = {p} must exceed 6")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CliError::Config("ratio must lie in (0, 1)".into()));
    }
    let ws = load_workspace(&common)?;
    let (_, report) = thresholds_pipeline(&ws, p, 1.0, &[k], samples, common.seed)?;
    let entry = report.index(k).expect("requested index present");
    let mu_start = resolve_mu(&mu_start_arg, 0.5 * entry.mu_check)?;
    if strict && mu_start >= entry.mu_check {
        return Err(CliError::OutOfRegime(format!(
            "mu_start = {mu_start:.6e} >= mu_check(k={k}) = {:.6e}",
            entry.mu_check
        )));
    }
    let grid = geometric_grid(mu_start, ratio, points);
    let flow = FlowParams::solver(1e-9);
    let branch = sweep(&ws.d, &ws.spectral, &report, k, &grid, &flow, 16, common.seed)?;
    let verdict = bifurcation_verdict(&branch, ws.spectral.lambda(k), verdict_tol);

    write_text(&common.out, &format!("branch_k{k}.csv"), &branch_csv(&branch))?;
    let mut cfg = base_config("bifurcate", &common);
    cfg.graph = common.graph.display().to_string();
    cfg.p = Some(p);
    cfg.mu = Some(mu_start_arg);
    cfg.indices = vec![k];
    cfg.points = points;
    cfg.ratio = ratio;
    cfg.samples = samples;
    cfg.strict = strict;
    let meta = ArtifactMeta::new(cfg.fingerprint(&ws.graph_bytes), common.seed);
    let artifact = BifurcateArtifact {
        meta,
        graph_hash: gnls::util::hex64(ws.graph.fingerprint()),
        k,
        lambda_target: ws.spectral.lambda(k),
        mu_grid: grid,
        verdict,
    };
    let path = write_json(&common.out, &format!("branch_k{k}.json"), &artifact)?;
    println!(
        "branch k = {k}: {points} points, target lambda = {:.6e}",
        ws.spectral.lambda(k)
    );
    for (name, ok) in &artifact.verdict.checks {
        println!("  [{}] {name}", if *ok { "PASS" } else { "FAIL" });
    }
    println!(
        "verdict: {}",
        if artifact.verdict.pass { "PASS" } else { "FAIL" }
    );
    println!("artifact: {}", path.display());
    if artifact.verdict.pass {
        Ok(())
    } else {
        Err(CliError::Numerical(CoreError::BranchLost {
            mu: *artifact.mu_grid.last().unwrap(),
            reason: "bifurcation verdict failed".into(),
        }))
    }
}

#[derive(Serialize)]
struct LabArtifact {
    meta: ArtifactMeta,
    scenarios: Vec<ScenarioReport>,
}

#[derive(Serialize)]
struct ScenarioReport {
    label: String,
    fingerprint: String,
    decay: Option<gnls::lab::DecayTable>,
    invariance: Option<gnls::lab::InvarianceReport>,
    convexity_violations: usize,
    scaling_violations: usize,
    warnings: Vec<String>,
    expected_failure: bool,
}

fn lab_scenario_report(
    scenario: &LabScenario,
    starts: usize,
    horizon: f64,
    seed: u64,
    expected_failure: bool,
    run_flow: bool,
) -> Result<ScenarioReport, CliError> {
    let s_grid: Vec<f64> = (0..9)
        .map(|i| 1e-1 * 10f64.powf(-(i as f64) / 2.0))
        .collect();
    let mut rng = gnls::util::rng_for(seed, 0);
    let start_raw = scenario.set.sample(&scenario.metrics, &mut rng);
    let decay = if scenario.metrics.h_norm(&start_raw) > 1e-12 {
        let u = match scenario
            .set
            .sphere_witness(&scenario.metrics, scenario.mu, &start_raw)
        {
            Some(w) => w,
            None => scenario.metrics.renormalize(&start_raw, scenario.mu),
        };
        Some(limit_check(scenario, &u, &s_grid)?)
    } else {
        None
    };
    let invariance = if run_flow {
        Some(flow_invariance_check(scenario, starts, horizon, 0.05, 1e-8, seed)?)
    } else {
        // The counterexample map is tangent only at the lone sphere point
        // of its set; a flow from generic starts is ill-posed there.
        None
    };
    Ok(ScenarioReport {
        label: scenario.label.clone(),
        fingerprint: scenario.fingerprint(),
        decay,
        invariance,
        convexity_violations: convexity_check(scenario, 10_000, seed),
        scaling_violations: scaling_check(scenario, 10_000, seed),
        warnings: scenario.warnings.clone(),
        expected_failure,
    })
}

fn cmd_lab(
    scenario: String,
    starts: usize,
    horizon: f64,
    dim: usize,
    seed: u64,
    out: PathBuf,
) -> Result<(), CliError> {
    let mut reports = Vec::new();
    let want = |name: &str| scenario == "all" || scenario == name;
    if want("orthant") {
        let s = LabScenario::orthant(dim, 1.0);
        reports.push(lab_scenario_report(&s, starts, horizon, seed, false, true)?);
    }
    if want("halfspaces") {
        let s = LabScenario::half_spaces(dim, 1.0, seed);
        reports.push(lab_scenario_report(&s, starts, horizon, seed, false, true)?);
    }
    if want("quarter") {
        let s = LabScenario::quarter_circle(1.0);
        reports.push(lab_scenario_report(&s, starts, horizon, seed, false, true)?);
    }
    if want("counterexample") {
        let s = LabScenario::shifted_ball_counterexample(dim, 1.0, seed);
        reports.push(lab_scenario_report(&s, starts, horizon, seed, true, false)?);
    }
    if want("mirror") {
        let g = MetricGraph::interval(std::f64::consts::PI)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let d = Discretization::assemble_uniform(&g, 18, 5)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let spectral = eigenpairs_seeded(&d, 3, 1e-12, seed)?;
        let p = 7.0;
        let k_est = estimate_k_constant(&d, p, 12, seed)?;
        let rep = compute_thresholds(
            &d,
            ProblemParams::new(p, 1.0).map_err(CliError::from)?,
            &k_est,
            &spectral,
            &[2],
        )?;
        let mu = 0.5 * rep.mu_tilde.min(0.8 * rep.b / spectral.lambda(2));
        let (rho_star, _, _) = gnls::functional::barrier_levels(&d, p, mu, rep.k_constant);
        let est = separation_delta(&d, &spectral, 2, mu, rho_star, 8, seed)?;
        let nu = default_nu(&est, None);
        let (scn, _) = mirror_pde_scenario(&d, p, mu, nu, Some(rep.mu_tilde), Some(est.delta))?;
        let checks = mirror_g_cone_checks(&d, p, mu, nu, rho_star, 12, seed)?;
        let all_in = checks.iter().all(|c| c.g_in_half_neighborhood);
        let mut report = lab_scenario_report(&scn, starts.min(20), horizon.min(2.0), seed, false, true)?;
        report
            .warnings
            .extend(checks.iter().filter(|c| c.lambda_u < 0.0).map(|c| {
                format!("negative multiplier observed: lambda_u = {:.3e}", c.lambda_u)
            }));
        if !all_in {
            report
                .warnings
                .push("G-cone half-neighborhood check failed".into());
        }
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(CliError::Config(format!("unknown scenario '{scenario}'")));
    }

    let cfg = RunConfig {
        subcommand: "lab".into(),
        graph: String::new(),
        p: None,
        mu: None,
        indices: vec![],
        cells: 0,
        quad_order: 0,
        eigen_count: 0,
        tol: 0.0,
        seed,
        samples: 0,
        grid_density: 0,
        multistart: 0,
        points: 0,
        ratio: 0.0,
        strict: false,
        scenario: Some(scenario),
        starts,
        horizon,
    };
    let meta = ArtifactMeta::new(cfg.fingerprint(&[]), seed);
    let artifact = LabArtifact {
        meta,
        scenarios: reports,
    };
    let path = write_json(&out, "lab.json", &artifact)?;
    for r in &artifact.scenarios {
        let decay_ok = r.decay.as_ref().map(|t| t.verdict);
        let inv_ok = r.invariance.as_ref().map(|i| i.pass);
        println!(
            "{}: decay {:?}, invariance {:?}, convexity violations {}, scaling violations {}{}",
            r.label,
            decay_ok,
            inv_ok,
            r.convexity_violations,
            r.scaling_violations,
            if r.expected_failure {
                " (failure expected)"
            } else {
                ""
            }
        );
    }
    println!("artifact: {}", path.display());
    Ok(())
}

fn cmd_plots(artifacts: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let mut produced = 0usize;

    // Ladder: k vs energy, sorted ascending by energy.
    let solutions = artifacts.join("solutions.json");
    if solutions.exists() {
        let text = fs::read_to_string(&solutions)
            .map_err(|e| CliError::Config(format!("cannot read solutions.json: {e}")))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Numerical(CoreError::MissingArtifact(e.to_string())))?;
        let mut rows: Vec<(u64, f64)> = Vec::new();
        if let Some(arr) = v["ladder"]["sign_changing"].as_array() {
            for pair in arr {
                let sol = &pair[0];
                if let (Some(k), Some(e)) = (sol["k"].as_u64(), sol["energy"].as_f64()) {
                    rows.push((k, e));
                }
            }
        }
        if let Some(e) = v["ladder"]["positive"][0]["energy"].as_f64() {
            rows.push((1, e));
        }
        rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let mut dat = String::from("# ladder: index k, energy (ascending)\n");
        for (k, e) in rows {
            dat.push_str(&format!("{k} {e}\n"));
        }
        write_text(&out, "ladder.dat", &dat)?;
        produced += 1;
    }

    // Bifurcation diagrams: -lambda vs mu per branch artifact.
    if artifacts.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&artifacts)
            .map_err(|e| CliError::Config(format!("cannot list {}: {e}", artifacts.display())))?
            .filter_map(|e| e.ok().map(|x| x.path()))
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
            if name.starts_with("branch_k") && name.ends_with(".csv") {
                let text = fs::read_to_string(&path)
                    .map_err(|e| CliError::Numerical(CoreError::MissingArtifact(e.to_string())))?;
                let k: String = name
                    .trim_start_matches("branch_k")
                    .trim_end_matches(".csv")
                    .to_string();
                // Pull the verdict target if the JSON sibling exists.
                let target = {
                    let json = artifacts.join(format!("branch_k{k}.json"));
                    fs::read_to_string(&json)
                        .ok()
                        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                        .and_then(|v| v["lambda_target"].as_f64())
                };
                let mut dat = match target {
                    Some(t) => format!("# branch k = {k}: mu, -lambda (target lambda_k = {t})\n"),
                    None => format!("# branch k = {k}: mu, -lambda\n"),
                };
                for line in text.lines().skip(1) {
                    let cols: Vec<&str> = line.split(',').collect();
                    if cols.len() >= 2 {
                        let mu: f64 = cols[0].parse().unwrap_or(f64::NAN);
                        let lam: f64 = cols[1].parse().unwrap_or(f64::NAN);
                        dat.push_str(&format!("{mu} {}\n", -lam));
                    }
                }
                write_text(&out, &format!("bifurcation_k{k}.dat"), &dat)?;
                produced += 1;
            }
        }
    }

    // Trajectory: t vs E.
    let traj = artifacts.join("trajectory.csv");
    if traj.exists() {
        let text = fs::read_to_string(&traj)
            .map_err(|e| CliError::Numerical(CoreError::MissingArtifact(e.to_string())))?;
        let mut dat = String::from("# trajectory: t, E (nonincreasing)\n");
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 2 {
                dat.push_str(&format!("{} {}\n", cols[0], cols[1]));
            }
        }
        write_text(&out, "trajectory.dat", &dat)?;
        produced += 1;
    }

    if produced == 0 {
        return Err(CliError::Numerical(CoreError::MissingArtifact(format!(
            "no artifacts found under {}",
            artifacts.display()
        ))));
    }
    println!("wrote {produced} plot data file(s) to {}", out.display());
    Ok(())
}
