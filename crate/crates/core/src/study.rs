//! Convergence studies: one experiment swept along one axis, replicated over
//! seeds, summarised by the per-level median and a log-log slope.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coefficients::DiffusionModel;
use crate::conditional::{max_mean_gap, median, simulate_conditional, ConditionalConfig, EstimatorKind, InitialLaw, Measure};
use crate::config::{CoefficientsConfig, GridConfig};
use crate::error::{Error, Result};
use crate::estimators::KernelShape;
use crate::fp_solver::solve_nonlinear_fp;
use crate::grid::{project_initial, DensityField, GridSpec, InitialDensity, MASS_TOL};
use crate::metrics::w1_samples_density;
use crate::particles::{simulate_moderated, ModeratedConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyAxis {
    /// Particle count.
    N,
    Dt,
    /// Cell width; `dt` is scaled in proportion.
    H,
    Eps,
    Bandwidth,
}

/// Experiment and metric swept by a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudyCase {
    /// `sigma = 1`, `eps = 0`, Gaussian start: L1 error of `u(T)` against the
    /// exact heat solution.
    HeatFp { initial_std: f64, grid: GridConfig },
    /// L1 distance between `u^eps(T)` and the `eps = 0` solve on the same grid.
    FpEps { model: DiffusionModel, initial: InitialDensity, grid: GridConfig },
    /// W1 between the moderated particle marginal at `T` and a PDE solve.
    ModeratedW1 {
        model: DiffusionModel,
        initial: InitialDensity,
        particles: ModeratedConfig,
        oracle_grid: GridConfig,
    },
    /// Max mean gap between kernel and binned conditional regression on
    /// shared noise (pathwise uniqueness under refinement).
    ConditionalGap {
        coefficients: CoefficientsConfig,
        initial: InitialLaw,
        run: ConditionalConfig,
    },
}

impl StudyCase {
    fn name(&self) -> &'static str {
        match self {
            Self::HeatFp { .. } => "heat_fp_l1",
            Self::FpEps { .. } => "fp_eps_l1",
            Self::ModeratedW1 { .. } => "moderated_w1",
            Self::ConditionalGap { .. } => "conditional_gap",
        }
    }

    fn stochastic(&self) -> bool {
        matches!(self, Self::ModeratedW1 { .. } | Self::ConditionalGap { .. })
    }

    fn supports(&self, axis: StudyAxis) -> bool {
        use StudyAxis::*;
        match self {
            Self::HeatFp { .. } => matches!(axis, H | Dt),
            Self::FpEps { .. } => matches!(axis, Eps | H | Dt),
            Self::ModeratedW1 { .. } => matches!(axis, N | Dt | Bandwidth),
            Self::ConditionalGap { .. } => matches!(axis, N | Bandwidth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySpec {
    pub case: StudyCase,
    pub axis: StudyAxis,
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            case: StudyCase::HeatFp {
                initial_std: 0.5,
                grid: GridConfig {
                    half_width: 8.0,
                    n_cells: 1024,
                    dt: 0.01,
                    t_final: 0.5,
                },
            },
            axis: StudyAxis::H,
            levels: vec![1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub level: f64,
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub case: String,
    pub axis: StudyAxis,
    pub rows: Vec<StudyRow>,
    pub levels: Vec<f64>,
    pub medians: Vec<f64>,
    /// Least-squares slope of `log median` against `log level` (two or more levels).
    pub slope: Option<f64>,
    /// Medians never increase along the level order.
    pub monotone_nonincreasing: bool,
}

impl StudyTable {
    /// Writes `study.csv` (every cell) and `study_summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("study.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        std::fs::write(dir.join("study_summary.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn grid_at(base: &GridConfig, axis: StudyAxis, level: f64, h0: f64) -> Result<GridSpec> {
    let mut g = *base;
    match axis {
        StudyAxis::H => {
            g.n_cells = (2.0 * g.half_width / level).round() as usize;
            g.dt = base.dt * level / h0;
        }
        StudyAxis::Dt => g.dt = level,
        _ => {}
    }
    g.spec()
}

/// Runs `spec.case` at every (level, seed) cell. Deterministic cases run once
/// per level; stochastic ones need at least three seeds. Child errors carry
/// their (level, seed).
pub fn run_convergence_study(spec: &StudySpec) -> Result<StudyTable> {
    let case = &spec.case;
    if spec.levels.is_empty() {
        return Err(Error::Config("a study needs at least one level".into()));
    }
    if !case.supports(spec.axis) {
        return Err(Error::Config(format!("axis {:?} is not defined for study case {}", spec.axis, case.name())));
    }
    let seeds: Vec<u64> = if case.stochastic() {
        if spec.seeds.len() < 3 {
            return Err(Error::Config("stochastic studies need at least three seeds".into()));
        }
        spec.seeds.clone()
    } else {
        vec![spec.seeds.first().copied().unwrap_or(0)]
    };
    let h0 = spec.levels[0];
    // PDE oracle shared by every particle cell
    let oracle = match case {
        StudyCase::ModeratedW1 { model, initial, oracle_grid, .. } => {
            let g = oracle_grid.spec()?;
            let u0 = project_initial(initial, &g, MASS_TOL)?;
            Some(solve_nonlinear_fp(model, &u0, 0.0, &g)?.last())
        }
        _ => None,
    };
    let mut rows = Vec::new();
    for &level in &spec.levels {
        for &seed in &seeds {
            let value = evaluate(case, spec.axis, level, h0, seed, oracle.as_ref()).map_err(|e| Error::Study {
                level,
                seed,
                source: Box::new(e),
            })?;
            rows.push(StudyRow { level, seed, value });
        }
    }
    let medians: Vec<f64> = spec
        .levels
        .iter()
        .map(|&l| median(&rows.iter().filter(|r| r.level == l).map(|r| r.value).collect::<Vec<_>>()))
        .collect();
    let slope = (spec.levels.len() >= 2).then(|| loglog_slope(&spec.levels, &medians));
    let monotone_nonincreasing = medians.windows(2).all(|w| w[1] <= w[0]);
    Ok(StudyTable {
        case: case.name().into(),
        axis: spec.axis,
        rows,
        levels: spec.levels.clone(),
        medians,
        slope,
        monotone_nonincreasing,
    })
}

fn evaluate(case: &StudyCase, axis: StudyAxis, level: f64, h0: f64, seed: u64, oracle: Option<&DensityField>) -> Result<f64> {
    match case {
        StudyCase::HeatFp { initial_std, grid } => {
            let g = grid_at(grid, axis, level, h0)?;
            let model = DiffusionModel::constant(1.0, 1e3);
            let u0 = project_initial(&InitialDensity::gaussian(0.0, *initial_std), &g, MASS_TOL)?;
            let u = solve_nonlinear_fp(&model, &u0, 0.0, &g)?.last();
            let var = initial_std * initial_std + g.t_final();
            Ok(u.l1_error_vs(|x| (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()))
        }
        StudyCase::FpEps { model, initial, grid } => {
            let g = grid_at(grid, axis, level, h0)?;
            let eps = if axis == StudyAxis::Eps { level } else { 1e-2 };
            let u0 = project_initial(initial, &g, MASS_TOL)?;
            let a = solve_nonlinear_fp(model, &u0, eps, &g)?.last();
            let b = solve_nonlinear_fp(model, &u0, 0.0, &g)?.last();
            Ok(a.l1_dist(&b))
        }
        StudyCase::ModeratedW1 { model, initial, particles, .. } => {
            let mut cfg = particles.clone();
            cfg.seed = seed;
            match axis {
                StudyAxis::N => cfg.n_particles = level.round() as usize,
                StudyAxis::Dt => cfg.dt = level,
                StudyAxis::Bandwidth => cfg.bandwidth = Some(level),
                _ => unreachable!("axis checked by supports()"),
            }
            let run = simulate_moderated(model, initial, &cfg, None)?;
            Ok(w1_samples_density(&run.final_ensemble.coordinate(0), oracle.expect("oracle built for particle studies")))
        }
        StudyCase::ConditionalGap { coefficients, initial, run } => {
            let coeffs = coefficients.resolve()?;
            let mut cfg = run.clone();
            cfg.seed = seed;
            let mut b = match cfg.estimator {
                EstimatorKind::Kernel { bandwidth, .. } => bandwidth,
                _ => None,
            };
            match axis {
                StudyAxis::N => cfg.n_particles = level.round() as usize,
                StudyAxis::Bandwidth => b = Some(level),
                _ => unreachable!("axis checked by supports()"),
            }
            let b = b.unwrap_or_else(|| crate::conditional::default_bandwidth(cfg.n_particles, coeffs.dim));
            let kernel = ConditionalConfig {
                estimator: EstimatorKind::Kernel {
                    shape: KernelShape::Gaussian,
                    bandwidth: Some(b),
                },
                ..cfg.clone()
            };
            let range = 5.0;
            let binned = ConditionalConfig {
                estimator: EstimatorKind::Binned {
                    n_bins: ((range / b).round() as usize).max(2),
                    range,
                },
                ..cfg
            };
            let a = simulate_conditional(&coeffs, initial, &kernel, Measure::P)?;
            let c = simulate_conditional(&coeffs, initial, &binned, Measure::P)?;
            Ok(max_mean_gap(&a, &c))
        }
    }
}

/// Least-squares slope of `log |y|` against `log x`. Refinement axes that
/// shrink (h, dt, eps, bandwidth) give positive slopes for converging metrics;
/// the N axis gives negative ones.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a.ln(), b.abs().ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn slope_of_a_power_law() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert_abs_diff_eq!(loglog_slope(&x, &y), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn heat_error_is_first_order_in_h() {
        let table = run_convergence_study(&StudySpec::default()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert!(table.slope.unwrap() >= 0.9, "{table:?}");
        assert!(table.monotone_nonincreasing);
    }

    #[test]
    fn single_level_has_no_slope() {
        let spec = StudySpec {
            levels: vec![1.0 / 32.0],
            ..StudySpec::default()
        };
        let table = run_convergence_study(&spec).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.slope.is_none());
    }

    #[test]
    fn errors_carry_level_and_seed() {
        // a 2-cell grid is rejected by the solver
        let spec = StudySpec {
            levels: vec![1.0 / 64.0, 8.0],
            ..StudySpec::default()
        };
        match run_convergence_study(&spec) {
            Err(Error::Study { level, seed, .. }) => {
                assert_eq!(level, 8.0);
                assert_eq!(seed, 0);
            }
            other => panic!("{other:?}"),
        }
        let bad_axis = StudySpec {
            axis: StudyAxis::N,
            ..StudySpec::default()
        };
        assert!(matches!(run_convergence_study(&bad_axis), Err(Error::Config(_))));
    }

    #[test]
    fn stochastic_cases_need_three_seeds() {
        let spec = StudySpec {
            case: StudyCase::ModeratedW1 {
                model: DiffusionModel::sqrt_affine(1.0, 1.0, 10.0),
                initial: InitialDensity::gaussian(0.0, 0.5),
                particles: ModeratedConfig {
                    t_final: 0.1,
                    ..Default::default()
                },
                oracle_grid: GridConfig::default(),
            },
            axis: StudyAxis::N,
            levels: vec![500.0, 5000.0],
            seeds: vec![0, 1],
        };
        assert!(matches!(run_convergence_study(&spec), Err(Error::Config(_))));
        let spec = StudySpec { seeds: vec![0, 1, 2], ..spec };
        let t = run_convergence_study(&spec).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert!(t.slope.unwrap() < 0.0);
    }

    #[test]
    fn eps_axis_converges() {
        let spec = StudySpec {
            case: StudyCase::FpEps {
                model: DiffusionModel::pme(2.0, 10.0),
                initial: InitialDensity::gaussian(0.0, 0.5),
                grid: GridConfig::default(),
            },
            axis: StudyAxis::Eps,
            levels: vec![0.1, 0.05, 0.025],
            seeds: vec![0],
        };
        let t = run_convergence_study(&spec).unwrap();
        assert!(t.monotone_nonincreasing, "{t:?}");
        assert!(t.slope.unwrap() > 0.8, "{t:?}");
    }
}
