//! Experiment driver: runs the model-based or model-free iteration from a
//! JSON config, writes a reproducible result bundle, and offers residual
//! verification, a standalone stationary-equation oracle, and seed sweeps.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slq_core::vi_engine::{run_model_based, run_model_free};
use slq_core::{
    collect, collection_grid, default_exploration, lyapunov_residual, riccati_map,
    simulate_open_loop, solve_sare_oracle, FeedbackGain, Result, SlqError, SlqModel, SymMatrix,
    ViResult,
};

use config::{load_config, Algorithm, ExperimentConfig, SCHEMA_VERSION};

type ViResultF64 = ViResult<f64>;

#[derive(Parser)]
#[command(
    name = "slq",
    version,
    about = "Solvers for infinite-horizon stochastic linear-quadratic control",
    after_help = "Configs are JSON files; `builtin:reference_example` and \
                  `builtin:scalar_smoke` name the bundled ones.\n\
                  Exit codes: 0 converged, 2 bad config, 3 rank condition not met, \
                  4 no convergence, 1 other errors."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment end to end and write the result bundle
    Solve(SolveArgs),
    /// Recompute residuals for an existing result bundle
    Verify(VerifyArgs),
    /// Solve the stationary equation directly by integrating the matrix flow
    Oracle(OracleArgs),
    /// Run the configured experiment across consecutive seeds
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file path, or builtin:<name>
    #[arg(long)]
    config: String,
    /// Output directory (overrides output.directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// model_based or model_free (overrides algorithm)
    #[arg(long)]
    algorithm: Option<String>,
    /// Monte Carlo path count (overrides sim.paths)
    #[arg(long)]
    paths: Option<usize>,
    /// RNG seed (overrides sim.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Simulation step size (overrides sim.dt)
    #[arg(long)]
    dt: Option<f64>,
    /// Stop tolerance for the iteration (overrides vi.stop_tol)
    #[arg(long)]
    stop_tol: Option<f64>,
    /// Iteration budget (overrides vi.max_iter)
    #[arg(long)]
    max_iter: Option<usize>,
    /// Number of collection intervals (overrides collection.intervals)
    #[arg(long)]
    intervals: Option<usize>,
    /// Length of each collection interval (overrides collection.interval_length)
    #[arg(long)]
    interval_length: Option<f64>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Overrides,
    /// Also write the simulated trajectories as ensemble.csv
    #[arg(long)]
    export_ensemble: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Path to a result.json written by `solve`
    #[arg(long)]
    result: PathBuf,
    /// Flag residual entries with magnitude above this
    #[arg(long, default_value_t = 1e-2)]
    threshold: f64,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// How many consecutive seeds to run
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First seed of the range
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ResultBundle {
    schema_version: u32,
    algorithm: Algorithm,
    converged: bool,
    iterations: usize,
    resets: usize,
    seed: u64,
    p_final: Vec<Vec<f64>>,
    k_final: Option<Vec<Vec<f64>>>,
    /// Frobenius norm of the model Riccati map at p_final
    riccati_residual_norm: f64,
    /// Frobenius norm of the closed-loop residual at (p_final, k_final)
    lyapunov_residual_norm: Option<f64>,
    /// stop quantity at the last accepted iteration
    final_step_residual: Option<f64>,
    history_len: usize,
    config: ExperimentConfig,
}

#[derive(Serialize)]
struct OracleBundle {
    schema_version: u32,
    p_star: Vec<Vec<f64>>,
    gain: Vec<Vec<f64>>,
    riccati_residual_norm: f64,
    config: ExperimentConfig,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn apply_overrides(mut cfg: ExperimentConfig, ov: &Overrides) -> Result<ExperimentConfig> {
    if let Some(dir) = &ov.out {
        cfg.output.directory = dir.clone();
    }
    if let Some(alg) = &ov.algorithm {
        cfg.algorithm = match alg.as_str() {
            "model_based" => Algorithm::ModelBased,
            "model_free" => Algorithm::ModelFree,
            other => {
                return Err(SlqError::InvalidConfig(format!(
                    "unknown algorithm {other:?}, expected model_based or model_free"
                )))
            }
        };
    }
    if let Some(p) = ov.paths {
        cfg.sim.paths = p;
    }
    if let Some(s) = ov.seed {
        cfg.sim.seed = s;
    }
    if let Some(dt) = ov.dt {
        cfg.sim.dt = dt;
    }
    if let Some(t) = ov.stop_tol {
        cfg.vi.stop_tol = t;
    }
    if let Some(n) = ov.max_iter {
        cfg.vi.max_iter = n;
    }
    if let Some(l) = ov.intervals {
        cfg.collection.intervals = l;
    }
    if let Some(h) = ov.interval_length {
        cfg.collection.interval_length = h;
    }
    Ok(cfg)
}

fn load_resolved(ov: &Overrides) -> Result<ExperimentConfig> {
    apply_overrides(load_config(&ov.config)?, ov)?.resolve()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| SlqError::InvalidConfig(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_history(path: &Path, out: &ViResultF64) -> Result<()> {
    let mut text = String::from("k,eps_k,residual,q\n");
    for rec in &out.history {
        text.push_str(&format!(
            "{},{:?},{:?},{}\n",
            rec.k, rec.eps, rec.residual, rec.q
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// run the configured experiment; the ensemble is simulated only in
/// model-free mode and returned for optional export
fn run_pipeline(
    cfg: &ExperimentConfig,
    model: &SlqModel<f64>,
) -> Result<(ViResultF64, Option<slq_core::TrajectoryEnsemble<f64>>)> {
    let vi = cfg.build_vi(model)?;
    match cfg.algorithm {
        Algorithm::ModelBased => Ok((run_model_based(model, &vi)?, None)),
        Algorithm::ModelFree => {
            let grid = collection_grid(cfg.collection.intervals, cfg.collection.interval_length)?;
            let ensemble = simulate_open_loop(model, &default_exploration(), &grid, &cfg.build_sim()?)?;
            let data = collect(&ensemble, &cfg.build_collect())?;
            let out = run_model_free(&data, model.q(), model.r(), &vi)?;
            Ok((out, Some(ensemble)))
        }
    }
}

fn cmd_solve(args: &SolveArgs) -> Result<bool> {
    let mut cfg = load_resolved(&args.common)?;
    if args.export_ensemble {
        cfg.output.ensemble_csv = true;
    }
    let model = cfg.build_model()?;
    let (out, ensemble) = run_pipeline(&cfg, &model)?;

    let r1 = riccati_map(&model, &out.p_final)?;
    let r2_norm = out
        .k_final
        .as_ref()
        .map(|k| lyapunov_residual(&model, &out.p_final, k).norm());
    let bundle = ResultBundle {
        schema_version: SCHEMA_VERSION,
        algorithm: cfg.algorithm,
        converged: out.converged,
        iterations: out.iterations,
        resets: out.resets,
        seed: cfg.sim.seed,
        p_final: rows(out.p_final.as_matrix()),
        k_final: out.k_final.as_ref().map(|k| rows(k.matrix())),
        riccati_residual_norm: r1.norm(),
        lyapunov_residual_norm: r2_norm,
        final_step_residual: out
            .history
            .iter()
            .rev()
            .find(|r| !r.reset)
            .map(|r| r.residual),
        history_len: out.history.len(),
        config: cfg.clone(),
    };

    let dir = &cfg.output.directory;
    std::fs::create_dir_all(dir)?;
    if cfg.wants("json") {
        write_json(&dir.join("result.json"), &bundle)?;
    }
    if cfg.wants("csv") {
        write_history(&dir.join("history.csv"), &out)?;
    }
    if cfg.output.ensemble_csv {
        if let Some(ens) = &ensemble {
            ens.export_csv(std::fs::File::create(dir.join("ensemble.csv"))?)?;
        }
    }
    println!(
        "{} after {} iterations ({} resets), |R1(P)|_F = {:.3e}, artifacts in {}",
        if out.converged { "converged" } else { "stopped without convergence" },
        out.iterations,
        out.resets,
        bundle.riccati_residual_norm,
        dir.display()
    );
    Ok(out.converged)
}

fn print_matrix(label: &str, m: &DMatrix<f64>, threshold: f64, flagged: &mut Vec<String>) {
    println!("{label}:");
    for i in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|j| format!("{:+.6e}", m[(i, j)])).collect();
        println!("  {}", line.join("  "));
        for j in 0..m.ncols() {
            if m[(i, j)].abs() > threshold {
                flagged.push(format!("{label}[{i},{j}] = {:+.3e}", m[(i, j)]));
            }
        }
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.result)?;
    let bundle: ResultBundle = serde_json::from_str(&text)
        .map_err(|e| SlqError::InvalidConfig(format!("result bundle {:?}: {e}", args.result)))?;
    let model = bundle.config.build_model()?;
    let p = SymMatrix::new(to_dmatrix(&bundle.p_final))?;

    let mut flagged = Vec::new();
    let r1 = riccati_map(&model, &p)?;
    print_matrix("R1(P_final)", r1.as_matrix(), args.threshold, &mut flagged);
    println!("|R1|_F = {:.6e}", r1.norm());
    match &bundle.k_final {
        Some(k) => {
            let gain = FeedbackGain::new(to_dmatrix(k));
            let r2 = lyapunov_residual(&model, &p, &gain);
            print_matrix(
                "R2(P_final, K_final)",
                r2.as_matrix(),
                args.threshold,
                &mut flagged,
            );
            println!("|R2|_F = {:.6e}", r2.norm());
        }
        None => println!("no gain in bundle, skipping the closed-loop residual"),
    }
    if flagged.is_empty() {
        println!("entries above {:.1e}: none", args.threshold);
    } else {
        println!("entries above {:.1e}:", args.threshold);
        for f in &flagged {
            println!("  {f}");
        }
    }
    Ok(())
}

fn to_dmatrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    DMatrix::from_row_slice(rows.len(), rows[0].len(), &flat)
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let cfg = load_resolved(&args.common)?;
    let model = cfg.build_model()?;
    let p0 = SymMatrix::zeros(model.state_dim());
    let p_star = solve_sare_oracle(&model, &p0, &cfg.build_oracle())?;
    let gain = slq_core::gain(&model, &p_star)?;
    let bundle = OracleBundle {
        schema_version: SCHEMA_VERSION,
        p_star: rows(p_star.as_matrix()),
        gain: rows(gain.matrix()),
        riccati_residual_norm: riccati_map(&model, &p_star)?.norm(),
        config: cfg.clone(),
    };
    let dir = &cfg.output.directory;
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("oracle.json"), &bundle)?;
    println!(
        "stationary solution found, |R1(P*)|_F = {:.3e}, written to {}",
        bundle.riccati_residual_norm,
        dir.join("oracle.json").display()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<bool> {
    let cfg = load_resolved(&args.common)?;
    let model = cfg.build_model()?;
    let p_star = solve_sare_oracle(
        &model,
        &SymMatrix::zeros(model.state_dim()),
        &cfg.build_oracle(),
    )?;

    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let results: Vec<(u64, Result<ViResultF64>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut run_cfg = cfg.clone();
            run_cfg.sim.seed = seed;
            let r = run_pipeline(&run_cfg, &model).map(|(out, _)| out);
            (seed, r)
        })
        .collect();

    let mut text = String::from("seed,converged,iterations,resets,error_to_oracle,note\n");
    let mut all_converged = true;
    for (seed, r) in &results {
        match r {
            Ok(out) => {
                let err = out.p_final.sub(&p_star).norm();
                text.push_str(&format!(
                    "{},{},{},{},{:?},\n",
                    seed, out.converged, out.iterations, out.resets, err
                ));
                all_converged &= out.converged;
            }
            Err(e) => {
                text.push_str(&format!("{},false,0,0,,{}\n", seed, e.to_string().replace(',', ";")));
                all_converged = false;
            }
        }
    }
    let dir = &cfg.output.directory;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("sweep.csv"), text)?;
    let good = results
        .iter()
        .filter(|(_, r)| r.as_ref().map(|o| o.converged).unwrap_or(false))
        .count();
    println!(
        "{good}/{} runs converged, summary in {}",
        seeds.len(),
        dir.join("sweep.csv").display()
    );
    Ok(all_converged)
}

fn code_for(e: &SlqError) -> u8 {
    match e {
        SlqError::InvalidConfig(_) => 2,
        SlqError::RankCondition(_) => 3,
        SlqError::ConvergenceFailure(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Verify(a) => cmd_verify(a).map(|()| true),
        Cmd::Oracle(a) => cmd_oracle(a).map(|()| true),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}
