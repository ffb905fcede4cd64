use mckean_core::coefficients::DiffusionModel;
use mckean_core::conditional::{conditional_profile, preset, simulate_conditional, ConditionalConfig, InitialLaw, Measure};
use mckean_core::config::{Experiment, ExperimentConfig};
use mckean_core::fp_solver::{energy_report, solve_nonlinear_fp};
use mckean_core::grid::{project_initial, GridSpec, InitialDensity, MASS_TOL};
use mckean_core::metrics::w1_samples_density;
use mckean_core::particles::{simulate_moderated, ModeratedConfig};
use mckean_core::study::{run_convergence_study, StudySpec};

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), cfg.experiment.subcommand());
        if let Experiment::Conditional { coefficients, .. } | Experiment::GirsanovCheck { coefficients, .. } = &cfg.experiment {
            coefficients.resolve().unwrap();
        }
        seen += 1;
    }
    assert_eq!(seen, 7);
}

#[test]
fn constant_kernels_profile_is_exact() {
    let coeffs = preset("constant_kernels", 1).unwrap();
    let cfg = ConditionalConfig {
        n_particles: 5_000,
        t_final: 0.1,
        ..Default::default()
    };
    let run = simulate_conditional(&coeffs, &InitialLaw::standard(), &cfg, Measure::P).unwrap();
    let xs: Vec<f64> = (0..81).map(|i| -8.0 + 0.2 * i as f64).collect();
    let prof = conditional_profile(&run, run.snapshots.len() - 1, &xs).unwrap();
    for p in &prof {
        assert_eq!(p.lambda, vec![0.3]);
        assert_eq!(p.gamma, vec![0.7]);
    }
    // X is a standard Gaussian plus Brownian motion: rho_x integrates to ~1
    let mass: f64 = prof.iter().map(|p| p.rho_x * 0.2).sum();
    assert!((mass - 1.0).abs() < 0.01, "{mass}");
}

#[test]
fn particles_match_free_heat_flow() {
    // sigma = 1: particles are Brownian, the PDE is the heat equation
    let model = DiffusionModel::constant(1.0, 10.0);
    let u0 = InitialDensity::gaussian(0.0, 0.5);
    let grid = GridSpec::with_horizon(8.0, 512, 1e-3, 0.4).unwrap();
    let pde = solve_nonlinear_fp(&model, &project_initial(&u0, &grid, MASS_TOL).unwrap(), 0.0, &grid).unwrap();
    assert!(energy_report(&pde, &model, 0.0).all_pass());
    let cfg = ModeratedConfig {
        n_particles: 20_000,
        dt: 0.02,
        t_final: 0.4,
        seed: 3,
        ..Default::default()
    };
    let run = simulate_moderated(&model, &u0, &cfg, None).unwrap();
    let w1 = w1_samples_density(&run.final_ensemble.positions, &pde.last());
    assert!(w1 < 0.02, "{w1}");
}

#[test]
fn study_writes_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = StudySpec {
        levels: vec![1.0 / 32.0, 1.0 / 64.0],
        ..Default::default()
    };
    let table = run_convergence_study(&spec).unwrap();
    table.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("study_summary.json")).unwrap()).unwrap();
    assert!(summary["slope"].as_f64().unwrap() > 0.9);
}

#[test]
fn conditional_runs_are_bit_reproducible() {
    let coeffs = preset("tanh_drift_modulated", 1).unwrap();
    let cfg = ConditionalConfig {
        n_particles: 2_000,
        t_final: 0.2,
        seed: 11,
        ..Default::default()
    };
    let a = simulate_conditional(&coeffs, &InitialLaw::standard(), &cfg, Measure::Q).unwrap();
    let b = simulate_conditional(&coeffs, &InitialLaw::standard(), &cfg, Measure::Q).unwrap();
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(a.counters, b.counters);
}
