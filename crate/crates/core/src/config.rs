//! TOML experiment configuration.
//!
//! A config file names one subcommand and its section; every field has a
//! default so a minimal file is just the subcommand:
//!
//! ```toml
//! seed = 7
//! output_dir = "out/heat"
//!
//! [experiment]
//! subcommand = "fp-solve"
//! eps = 0.0
//! model = { law = { kind = "constant", s0 = 1.0 }, r_max = 10.0 }
//! initial = { kind = "gaussian", mean = 0.0, std = 0.5 }
//! grid = { half_width = 8.0, n_cells = 512, dt = 1e-3, t_final = 0.5 }
//!
//! [tolerances]
//! particle_w1 = 0.03
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{DiffusionModel, SigmaLaw};
use crate::conditional::{preset, CoefficientSet, ConditionalConfig, GirsanovCheckConfig, InitialLaw, Measure};
use crate::error::{Error, Result};
use crate::fp_solver::FpOptions;
use crate::grid::{GridSpec, InitialDensity};
use crate::particles::{MartingalePlan, ModeratedConfig};
use crate::study::StudySpec;

/// Acceptance tolerances. Each default is the value the self-test gates on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// L1 error of the heat solve against the exact Gaussian.
    pub heat_l1: f64,
    /// Seconds allowed for the heat solve.
    pub heat_runtime_s: f64,
    /// Relative slack on `max_t ||u||_inf <= ||u0||_inf`.
    pub max_principle_rel: f64,
    /// Relative slack on the energy inequality.
    pub energy_rel: f64,
    /// Admissible band for the dissipation residual ratio under halving.
    pub dissipation_ratio_lo: f64,
    pub dissipation_ratio_hi: f64,
    /// Relative slack on the Fourier symbol bound `2 / gamma^2`.
    pub symbol_rel: f64,
    /// Relative slack on the operator inequality for random inputs.
    pub operator_slack: f64,
    /// Ceiling on the measured mild-map contraction factor.
    pub mild_contraction: f64,
    /// L2 agreement of the two uniqueness replays.
    pub uniqueness_l2: f64,
    pub uniqueness_max_iter: usize,
    /// W1 between the particle marginal and the PDE density at N = 1e5.
    pub particle_w1: f64,
    /// Seconds allowed for the particle-vs-PDE comparison.
    pub particle_runtime_s: f64,
    /// Monte Carlo standard errors for every statistical check.
    pub n_se: f64,
    /// Ceiling on the fitted Picard ratio.
    pub picard_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            heat_l1: 1e-3,
            heat_runtime_s: 5.0,
            max_principle_rel: 1e-8,
            energy_rel: 1e-6,
            dissipation_ratio_lo: 0.4,
            dissipation_ratio_hi: 0.7,
            symbol_rel: 1e-12,
            operator_slack: 0.05,
            mild_contraction: 0.45,
            uniqueness_l2: 1e-6,
            uniqueness_max_iter: 30,
            particle_w1: 0.02,
            particle_runtime_s: 120.0,
            n_se: 3.0,
            picard_ratio: 0.8,
        }
    }
}

impl Tolerances {
    /// Fields that differ from their defaults, for logging.
    pub fn overrides(&self) -> BTreeMap<String, (f64, f64)> {
        let def = serde_json::to_value(Tolerances::default()).expect("tolerances serialize");
        let cur = serde_json::to_value(self).expect("tolerances serialize");
        let (def, cur) = (def.as_object().unwrap(), cur.as_object().unwrap());
        cur.iter()
            .filter(|(k, v)| def.get(*k) != Some(v))
            .map(|(k, v)| (k.clone(), (def[k].as_f64().unwrap_or(f64::NAN), v.as_f64().unwrap_or(f64::NAN))))
            .collect()
    }
}

/// Time grid for a finite-volume solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    pub n_cells: usize,
    pub dt: f64,
    pub t_final: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            n_cells: 256,
            dt: 2e-3,
            t_final: 0.5,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::with_horizon(self.half_width, self.n_cells, self.dt, self.t_final)
    }
}

/// Coefficients either by preset name or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientsConfig {
    Preset { preset: String, dim: usize },
    Explicit(CoefficientSet),
}

impl CoefficientsConfig {
    pub fn resolve(&self) -> Result<CoefficientSet> {
        match self {
            Self::Preset { preset: name, dim } => preset(name, *dim).ok_or_else(|| Error::Config(format!("unknown coefficient preset '{name}'"))),
            Self::Explicit(c) => Ok(*c),
        }
    }
}

impl Default for CoefficientsConfig {
    fn default() -> Self {
        Self::Preset {
            preset: "tanh_drift".into(),
            dim: 1,
        }
    }
}

fn default_model() -> DiffusionModel {
    DiffusionModel::sqrt_affine(1.0, 1.0, 10.0)
}

fn default_initial() -> InitialDensity {
    InitialDensity::gaussian(0.0, 0.5)
}

fn default_stride() -> usize {
    10
}

fn default_layers() -> usize {
    4
}

fn default_mild_tol() -> f64 {
    1e-6
}

fn default_mild_iter() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    FpSolve {
        #[serde(default = "default_model")]
        model: DiffusionModel,
        #[serde(default = "default_initial")]
        initial: InitialDensity,
        #[serde(default)]
        eps: f64,
        #[serde(default)]
        grid: GridConfig,
        #[serde(default)]
        options: FpOptions,
        /// Write every `snapshot_stride`-th time level.
        #[serde(default = "default_stride")]
        snapshot_stride: usize,
    },
    ParticlesModerated {
        #[serde(default = "default_model")]
        model: DiffusionModel,
        #[serde(default = "default_initial")]
        initial: InitialDensity,
        #[serde(default)]
        particles: ModeratedConfig,
        /// Grid of the PDE oracle the marginal is compared with.
        #[serde(default)]
        oracle_grid: GridConfig,
        #[serde(default)]
        martingale: Option<MartingalePlan>,
    },
    VerifyMild {
        #[serde(default = "default_model")]
        model: DiffusionModel,
        #[serde(default = "default_initial")]
        initial: InitialDensity,
        #[serde(default)]
        eps: f64,
        #[serde(default)]
        grid: GridConfig,
        /// Kernel scale; `None` uses the default rule.
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default = "default_mild_tol")]
        tol: f64,
        #[serde(default = "default_mild_iter")]
        max_iter: usize,
    },
    Conditional {
        #[serde(default)]
        coefficients: CoefficientsConfig,
        #[serde(default = "InitialLaw::standard")]
        initial: InitialLaw,
        #[serde(default)]
        run: ConditionalConfig,
        #[serde(default = "default_measure")]
        measure: Measure,
        /// Points of the CSV x-grid.
        #[serde(default = "default_x_points")]
        x_points: usize,
    },
    Picard {
        #[serde(default = "picard_coefficients")]
        coefficients: CoefficientsConfig,
        #[serde(default = "InitialLaw::standard")]
        initial: InitialLaw,
        #[serde(default)]
        run: ConditionalConfig,
        #[serde(default = "default_layers")]
        layers: usize,
        /// Weight of the path norm; `None` uses `4 (L_l^2 + L_g^2)`.
        #[serde(default)]
        rate_c: Option<f64>,
    },
    GirsanovCheck {
        #[serde(default)]
        coefficients: CoefficientsConfig,
        #[serde(default = "InitialLaw::standard")]
        initial: InitialLaw,
        #[serde(default)]
        run: ConditionalConfig,
        #[serde(default)]
        check: GirsanovCheckConfig,
    },
    ConvergenceStudy(StudySpec),
}

fn default_measure() -> Measure {
    Measure::P
}

fn default_x_points() -> usize {
    101
}

fn picard_coefficients() -> CoefficientsConfig {
    CoefficientsConfig::Preset {
        preset: "picard".into(),
        dim: 1,
    }
}

impl Experiment {
    pub fn subcommand(&self) -> &'static str {
        match self {
            Self::FpSolve { .. } => "fp-solve",
            Self::ParticlesModerated { .. } => "particles-moderated",
            Self::VerifyMild { .. } => "verify-mild",
            Self::Conditional { .. } => "conditional",
            Self::Picard { .. } => "picard",
            Self::GirsanovCheck { .. } => "girsanov-check",
            Self::ConvergenceStudy(_) => "convergence-study",
        }
    }

    /// The section with every field at its default.
    pub fn default_for(subcommand: &str) -> Result<Self> {
        let text = format!("subcommand = \"{subcommand}\"");
        toml::from_str(&text).map_err(|e| Error::Config(format!("unknown subcommand '{subcommand}': {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub experiment: Experiment,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            seed: 0,
            output_dir: None,
            tolerances: Tolerances::default(),
            experiment,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// `sigma(r)` law by short name, as accepted on the command line.
pub fn law_by_name(name: &str) -> Result<SigmaLaw> {
    let (head, args) = name.split_once(':').unwrap_or((name, ""));
    let nums: Vec<f64> = if args.is_empty() {
        vec![]
    } else {
        args.split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|e| Error::Config(format!("law '{name}': {e}"))))
            .collect::<Result<_>>()?
    };
    let arg = |i: usize, default: f64| nums.get(i).copied().unwrap_or(default);
    Ok(match head {
        "constant" => SigmaLaw::Constant { s0: arg(0, 1.0) },
        "sqrt-affine" => SigmaLaw::SqrtAffine { a: arg(0, 1.0), b: arg(1, 1.0) },
        "pme" => SigmaLaw::Pme { m: arg(0, 2.0) },
        _ => return Err(Error::Config(format!("unknown law '{name}' (constant[:s0], sqrt-affine[:a,b], pme[:m])"))),
    })
}
