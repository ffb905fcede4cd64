use proptest::prelude::*;

use mckean_core::coefficients::DiffusionModel;
use mckean_core::config::{Experiment, ExperimentConfig, Tolerances};
use mckean_core::fp_solver::{energy_report, solve_nonlinear_fp};
use mckean_core::grid::{project_initial, GridSpec, InitialDensity, MASS_TOL};
use mckean_core::report::Check;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fp_solves_keep_mass_sign_and_sup(
        sep in 0.0f64..1.5,
        std in 0.3f64..1.0,
        m in 1.5f64..3.0,
        eps in 0.0f64..0.1,
        dt in 1e-3f64..2e-2,
    ) {
        let grid = GridSpec::with_horizon(8.0, 128, dt, 0.2).unwrap();
        let u0 = project_initial(&InitialDensity::Bimodal { sep, std }, &grid, MASS_TOL).unwrap();
        let model = DiffusionModel::pme(m, 2.0 * u0.max());
        let traj = solve_nonlinear_fp(&model, &u0, eps, &grid).unwrap();
        let rep = energy_report(&traj, &model, eps);
        for name in ["mass_conservation", "nonnegativity", "maximum_principle", "energy_inequality"] {
            prop_assert!(rep.get(name).unwrap().pass, "{name}: {:?}", rep.get(name));
        }
    }

    #[test]
    fn check_verdicts_match_stored_fields(value in -10.0f64..10.0, bound in 0.0f64..10.0, tol in 0.0f64..1.0) {
        let a = Check::one_sided("a", value, bound, tol, "plumbing");
        prop_assert_eq!(a.pass, value <= bound * (1.0 + tol));
        let r = Check::residual("r", value, tol, bound, "plumbing");
        prop_assert_eq!(r.pass, value.abs() <= tol * bound);
    }

    #[test]
    fn configs_round_trip_bitwise(seed in any::<u64>(), w1 in 1e-6f64..1.0, n_se in 0.5f64..10.0, iters in 1usize..100) {
        let mut cfg = ExperimentConfig::new(Experiment::default_for("particles-moderated").unwrap());
        cfg.seed = seed >> 1; // TOML integers are i64
        cfg.tolerances = Tolerances { particle_w1: w1, n_se, uniqueness_max_iter: iters, ..Default::default() };
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.tolerances.particle_w1.to_bits(), w1.to_bits());
        prop_assert_eq!(back.tolerances.n_se.to_bits(), n_se.to_bits());
        prop_assert_eq!(back, cfg);
    }
}
