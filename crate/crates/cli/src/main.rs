//! `mckean-lab`: runs one experiment from a TOML config, or the self-test.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mckean_core::conditional::{
    conditional_profile, exp_mart_bound_check, picard_iterate, simulate_conditional, weighted_conditional_check, ConditionalRun, Measure,
};
use mckean_core::config::{Experiment, ExperimentConfig};
use mckean_core::fp_solver::{energy_report, solve_nonlinear_fp_with};
use mckean_core::grid::{project_initial, PathField, MASS_TOL};
use mckean_core::metrics::w1_samples_density;
use mckean_core::mild::{choose_gamma, contraction_factor, iterate_mild, symbol_bound_check, HeatKernelOp};
use mckean_core::particles::{martingale_residual, simulate_moderated};
use mckean_core::selftest::{run_selftest, SelftestOptions, CRITERIA, DEFAULT_SEED};
use mckean_core::study::run_convergence_study;
use mckean_core::{Check, VerificationReport};

/// Output root; each run writes into `<root>/<output_dir or subcommand>`.
const OUTPUT_ROOT_VAR: &str = "MCKEAN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "mckean-lab", version, about = "Solvers, particle systems and verification checks for singular McKean SDEs")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single worker thread, so every reduction runs in a fixed order.
    #[arg(long, global = true)]
    strict_deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the root and the config's `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-volume solve of the regularised Fokker-Planck equation.
    FpSolve(RunArgs),
    /// Moderately interacting particles compared against the PDE.
    ParticlesModerated(RunArgs),
    /// Mild-map fixed point, contraction and symbol bound.
    VerifyMild(RunArgs),
    /// Conditional McKean system under P or Q.
    Conditional(RunArgs),
    /// Picard iteration for the conditional system.
    Picard(RunArgs),
    /// Girsanov and exponential-martingale checks.
    GirsanovCheck(RunArgs),
    /// One experiment swept along an axis.
    ConvergenceStudy(RunArgs),
    /// Full acceptance suite.
    Selftest {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Comma-separated criteria to run (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// TOML file with a `[tolerances]` table.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Prints a config with every field at its default.
    DefaultConfig { subcommand: String },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = if cli.strict_deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let (name, args) = match cli.command {
        Command::Selftest { seed, only, output, config } => return selftest(seed, only, output, config),
        Command::DefaultConfig { subcommand } => {
            print!("{}", ExperimentConfig::new(Experiment::default_for(&subcommand)?).to_toml()?);
            return Ok(());
        }
        Command::FpSolve(a) => ("fp-solve", a),
        Command::ParticlesModerated(a) => ("particles-moderated", a),
        Command::VerifyMild(a) => ("verify-mild", a),
        Command::Conditional(a) => ("conditional", a),
        Command::Picard(a) => ("picard", a),
        Command::GirsanovCheck(a) => ("girsanov-check", a),
        Command::ConvergenceStudy(a) => ("convergence-study", a),
    };
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(Experiment::default_for(name)?),
    };
    if cfg.experiment.subcommand() != name {
        bail!("config is for '{}', not '{name}'", cfg.experiment.subcommand());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = output_dir(args.output, cfg.output_dir.as_deref(), name);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out.join("tolerance_overrides.json"), serde_json::to_string_pretty(&cfg.tolerances.overrides())?)?;
    for (k, (def, cur)) in cfg.tolerances.overrides() {
        println!("tolerance override: {k} = {cur} (default {def})");
    }
    let start = Instant::now();
    let report = run(&cfg, &out)?;
    if let Some(rep) = report {
        rep.write_json(&out.join("report.json"))?;
        for c in rep.failures() {
            println!("FAIL {}: value {:e}, bound {:e}", c.name, c.value, c.bound);
        }
        println!("{}: {} of {} checks pass", rep.title, rep.checks.iter().filter(|c| c.pass).count(), rep.checks.len());
    }
    println!("output written to {} ({:.1} s)", out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn output_dir(explicit: Option<PathBuf>, from_config: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p;
    }
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mckean-out"));
    root.join(from_config.unwrap_or(Path::new(name)))
}

/// Writes `t, x, u` rows for every recorded snapshot.
fn write_path_csv(path: &Path, traj: &PathField) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "u"])?;
    let xs = traj.grid.centers();
    for (k, snap) in traj.snapshots.iter().enumerate() {
        let t = format!("{:e}", traj.time(k));
        for (x, u) in xs.iter().zip(snap) {
            w.write_record([t.as_str(), &format!("{x:e}"), &format!("{u:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Option<VerificationReport>> {
    let tol = &cfg.tolerances;
    Ok(Some(match &cfg.experiment {
        Experiment::FpSolve {
            model,
            initial,
            eps,
            grid,
            options,
            snapshot_stride,
        } => {
            let g = grid.spec()?;
            let u0 = project_initial(initial, &g, MASS_TOL)?;
            let traj = solve_nonlinear_fp_with(model, &u0, *eps, &g, options)?;
            write_path_csv(&out.join("snapshots.csv"), &traj.strided(*snapshot_stride))?;
            energy_report(&traj, model, *eps)
        }
        Experiment::ParticlesModerated {
            model,
            initial,
            particles,
            oracle_grid,
            martingale,
        } => {
            let mut pcfg = particles.clone();
            pcfg.seed = cfg.seed;
            let g = oracle_grid.spec()?;
            let pde = mckean_core::fp_solver::solve_nonlinear_fp(model, &project_initial(initial, &g, MASS_TOL)?, 0.0, &g)?;
            let run = simulate_moderated(model, initial, &pcfg, (pcfg.dim == 1).then_some(&g))?;
            let mut rep = VerificationReport::new("particles_moderated");
            if pcfg.dim == 1 {
                let w1 = w1_samples_density(&run.final_ensemble.positions, &pde.last());
                rep.push(Check::one_sided("w1_final_marginal", w1, tol.particle_w1, 0.0, "particle-pde-agreement"));
                if let Some(d) = &run.density {
                    write_path_csv(&out.join("density_snapshots.csv"), d)?;
                }
            }
            rep.diag("bandwidth", run.bandwidth).diag("clamp_fraction", run.clamp_fraction());
            let mut w = csv::Writer::from_path(out.join("final_positions.csv"))?;
            w.write_record((0..pcfg.dim).map(|k| format!("x{k}")))?;
            for p in run.final_ensemble.positions.chunks(pcfg.dim) {
                w.write_record(p.iter().map(|v| format!("{v:e}")))?;
            }
            w.flush()?;
            if let Some(plan) = martingale {
                let times = &run.snapshot_times;
                let lattice = if times.len() > 1 { times[1] - times[0] } else { pcfg.dt };
                let stride = (lattice / g.dt).round() as usize;
                if stride == 0 || ((stride as f64) * g.dt - lattice).abs() > 1e-9 {
                    bail!("particle snapshot spacing {lattice} is not a multiple of the oracle dt {}", g.dt);
                }
                rep.merge(martingale_residual(&run, &pde.strided(stride), model, plan)?);
            }
            rep
        }
        Experiment::VerifyMild {
            model,
            initial,
            eps,
            grid,
            gamma,
            tol: mild_tol,
            max_iter,
        } => {
            let g = grid.spec()?;
            let u0 = project_initial(initial, &g, MASS_TOL)?;
            let gamma = match gamma {
                Some(v) => *v,
                None => choose_gamma(model, u0.max())?,
            };
            let op = HeatKernelOp::new(gamma, g)?;
            let fv = mckean_core::fp_solver::solve_nonlinear_fp(model, &u0, *eps, &g)?;
            let frozen = PathField::constant_in_time(&u0);
            let (fixed, iters, last) = iterate_mild(&op, &frozen, model, &u0.values, *eps, *mild_tol, *max_iter)?;
            write_path_csv(&out.join("mild_fixed_point.csv"), &fixed.strided(10))?;
            let m = contraction_factor(&op, &fv, &frozen, model, *eps)?;
            let mut rep = VerificationReport::new("verify_mild");
            rep.push(Check::one_sided("contraction_factor", m.factor, tol.mild_contraction, 0.0, "mild-map-contraction"));
            rep.push(Check::one_sided("iterations", iters as f64, *max_iter as f64, 0.0, "mild-uniqueness"));
            rep.diag("gamma", gamma)
                .diag("last_increment", last)
                .diag("pointwise_bound", m.pointwise_bound)
                .diag("l2_gap_to_finite_volume", fixed.l2_dist(&fv));
            let mut sym = symbol_bound_check(gamma, 128, 128, 5, cfg.seed)?;
            sym.title = "symbol_bound".into();
            rep.merge(sym);
            rep
        }
        Experiment::Conditional {
            coefficients,
            initial,
            run,
            measure,
            x_points,
        } => {
            let coeffs = coefficients.resolve()?;
            let mut rcfg = run.clone();
            rcfg.seed = cfg.seed;
            let r = simulate_conditional(&coeffs, initial, &rcfg, *measure)?;
            write_profiles(&r, *x_points, out)?;
            let mut rep = VerificationReport::new("conditional");
            rep.merge(mckean_core::conditional::bound_transfer_report(&[("run", r.counters)]));
            rep.merge(coeffs.spot_check(1000, cfg.seed));
            rep
        }
        Experiment::Picard {
            coefficients,
            initial,
            run,
            layers,
            rate_c,
        } => {
            let coeffs = coefficients.resolve()?;
            let mut rcfg = run.clone();
            rcfg.seed = cfg.seed;
            let r = picard_iterate(&coeffs, initial, &rcfg, *layers, *rate_c)?;
            let mut w = csv::Writer::from_path(out.join("distances.csv"))?;
            w.write_record(["k", "distance"])?;
            for (k, d) in r.distances.iter().enumerate() {
                w.write_record([k.to_string(), format!("{d:e}")])?;
            }
            w.flush()?;
            let mut rep = VerificationReport::new("picard");
            let ratio = r.fitted_ratio.unwrap_or(f64::INFINITY);
            rep.push(Check::one_sided("fitted_ratio", ratio, tol.picard_ratio, 0.0, "picard-contraction"));
            rep.push(Check::one_sided("no_contraction_flag", r.no_contraction as u8 as f64, 0.0, 0.0, "picard-contraction"));
            rep.diag("rate_c", r.rate_c);
            rep.merge(mckean_core::conditional::bound_transfer_report(&[("picard", r.counters)]));
            rep
        }
        Experiment::GirsanovCheck {
            coefficients,
            initial,
            run,
            check,
        } => {
            let coeffs = coefficients.resolve()?;
            let p_cfg = mckean_core::conditional::ConditionalConfig { seed: cfg.seed, ..run.clone() };
            let q_cfg = mckean_core::conditional::ConditionalConfig {
                seed: cfg.seed + 1,
                ..run.clone()
            };
            let p = simulate_conditional(&coeffs, initial, &p_cfg, Measure::P)?;
            let q = simulate_conditional(&coeffs, initial, &q_cfg, Measure::Q)?;
            let mut rep = VerificationReport::new("girsanov_check");
            if coeffs.dim == 1 {
                rep.merge(weighted_conditional_check(&p, &q, check, cfg.seed)?);
            }
            rep.merge(exp_mart_bound_check(&p, &q, check, cfg.seed)?);
            rep.merge(mckean_core::conditional::bound_transfer_report(&[("p", p.counters), ("q", q.counters)]));
            rep
        }
        Experiment::ConvergenceStudy(spec) => {
            let table = run_convergence_study(spec)?;
            table.write(out)?;
            println!(
                "{} along {:?}: medians {:?}, slope {:?}",
                table.case, table.axis, table.medians, table.slope
            );
            return Ok(None);
        }
    }))
}

/// One CSV per recorded time with the engine's estimates on an x-grid.
fn write_profiles(run: &ConditionalRun, x_points: usize, out: &Path) -> Result<()> {
    let d = run.coeffs.dim;
    let xs: Vec<f64> = (0..x_points).map(|i| -4.0 + 8.0 * i as f64 / (x_points.max(2) - 1) as f64).collect();
    for (k, snap) in run.snapshots.iter().enumerate() {
        let prof = conditional_profile(run, k, &xs)?;
        let mut w = csv::Writer::from_path(out.join(format!("profile_t{:03}.csv", k)))?;
        let mut header = vec!["t".to_string(), "x".to_string()];
        header.extend((0..d).map(|i| format!("lambda_{i}")));
        header.extend((0..d * d).map(|i| format!("gamma_{}{}", i / d, i % d)));
        header.extend(["rho_x".to_string(), "degenerate".to_string()]);
        w.write_record(&header)?;
        for p in prof {
            let mut row = vec![format!("{:e}", snap.time), format!("{:e}", p.x)];
            row.extend(p.lambda.iter().chain(&p.gamma).map(|v| format!("{v:e}")));
            row.push(format!("{:e}", p.rho_x));
            row.push((p.degenerate as u8).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn selftest(seed: u64, only: Vec<u32>, output: Option<PathBuf>, config: Option<PathBuf>) -> Result<()> {
    let tolerances = match config {
        Some(p) => {
            #[derive(serde::Deserialize)]
            struct TolFile {
                #[serde(default)]
                tolerances: mckean_core::config::Tolerances,
            }
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<TolFile>(&text).with_context(|| format!("parsing {}", p.display()))?.tolerances
        }
        None => Default::default(),
    };
    let out = output_dir(output, None, "selftest");
    let opts = SelftestOptions { seed, tolerances, only };
    for (k, (def, cur)) in opts.tolerances.overrides() {
        println!("tolerance override: {k} = {cur} (default {def})");
    }
    let start = Instant::now();
    let outcome = run_selftest(&opts, &out, &mut |line| println!("[{:7.1} s] {line}", start.elapsed().as_secs_f64()))?;
    for t in &outcome.timings {
        println!(
            "timing criterion={} seconds={:.3} budget={} pass={} ({})",
            t.criterion,
            t.seconds,
            t.budget_s,
            t.pass(),
            t.label
        );
    }
    for (id, name) in CRITERIA {
        if let Some(p) = outcome.pass(id) {
            println!("criterion {id:2} {name:<26} {}", if p { "PASS" } else { "FAIL" });
        }
    }
    println!("criterion 13 reproducibility: compare two output directories written with the same seed under --strict-deterministic");
    println!("output written to {}", out.display());
    Ok(())
}
