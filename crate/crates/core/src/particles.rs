//! Moderately interacting particles: Euler–Maruyama for
//! `dX = sigma(u(t, X)) dW` with `u` replaced by a mollified empirical density.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::DiffusionModel;
use crate::error::{Error, Result};
use crate::estimators::{silverman_bandwidth, GridSmoother, KernelShape, MollifierSpec};
use crate::grid::{GridSpec, InitialDensity, PathField};
use crate::report::{Check, VerificationReport};
use crate::rng::{next_normals, stream_rng, Channel, ParticleStreams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeratedConfig {
    pub n_particles: usize,
    pub dim: usize,
    /// Mollifier bandwidth; `None` picks `1.06 std N^(-1/(4+d))` from the
    /// initial sample.
    pub bandwidth: Option<f64>,
    pub kernel: KernelShape,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    /// Positions (and density snapshots) are recorded every this many steps.
    pub snapshot_stride: usize,
    /// Rebuild the density estimate every this many steps (1 = every step).
    pub kde_refresh: usize,
    /// Each step sums this many unit blocks of noise, so a run with step `dt`
    /// and `m` substeps shares its Brownian path with a run at `dt / m`.
    pub noise_substeps: usize,
}

impl Default for ModeratedConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            dim: 1,
            bandwidth: None,
            kernel: KernelShape::Gaussian,
            dt: 5e-3,
            t_final: 0.5,
            seed: 0,
            snapshot_stride: 1,
            kde_refresh: 1,
            noise_substeps: 1,
        }
    }
}

impl ModeratedConfig {
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Particle positions, `N x d` row-major, with the stream each particle reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub stream_ids: Vec<u64>,
    pub step: usize,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.stream_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream_ids.is_empty()
    }

    /// Initial draws: particle `i` reads `u0` (product law when `d = 2`) from
    /// its own stream `stream_ids[i]`.
    pub fn sample(u0: &InitialDensity, dim: usize, seed: u64, stream_ids: Vec<u64>) -> Self {
        let positions = stream_ids
            .par_iter()
            .flat_map_iter(|&id| {
                let mut rng = stream_rng(seed, id, Channel::Init);
                (0..dim).map(move |_| u0.sample(&mut rng)).collect::<Vec<_>>()
            })
            .collect();
        Self {
            dim,
            positions,
            stream_ids,
            step: 0,
        }
    }

    /// First coordinates.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.positions.iter().skip(k).step_by(self.dim).copied().collect()
    }
}

/// Output of [`simulate_moderated`].
#[derive(Debug, Clone)]
pub struct ModeratedRun {
    pub config: ModeratedConfig,
    pub bandwidth: f64,
    pub final_ensemble: Ensemble,
    /// Positions at every `snapshot_stride` steps (including 0 and the end).
    pub snapshots: Vec<Vec<f64>>,
    pub snapshot_times: Vec<f64>,
    /// Density estimates at the snapshot times on the requested grid (d = 1).
    pub density: Option<PathField>,
    /// Particle-steps at which the estimated density left `[0, r_max]`.
    pub clamp_count: u64,
    pub particle_steps: u64,
}

impl ModeratedRun {
    pub fn clamp_fraction(&self) -> f64 {
        self.clamp_count as f64 / self.particle_steps.max(1) as f64
    }
}

pub fn simulate_moderated(model: &DiffusionModel, u0: &InitialDensity, cfg: &ModeratedConfig, density_grid: Option<&GridSpec>) -> Result<ModeratedRun> {
    let ids: Vec<u64> = (0..cfg.n_particles as u64).collect();
    simulate_moderated_streams(model, u0, cfg, density_grid, ids)
}

/// As [`simulate_moderated`], with explicit per-particle stream ids (a
/// permutation of the ids permutes the trajectories).
pub fn simulate_moderated_streams(
    model: &DiffusionModel,
    u0: &InitialDensity,
    cfg: &ModeratedConfig,
    density_grid: Option<&GridSpec>,
    stream_ids: Vec<u64>,
) -> Result<ModeratedRun> {
    if cfg.dim == 0 || cfg.dim > 2 {
        return Err(Error::Dimension { expected: 1, got: cfg.dim });
    }
    if stream_ids.len() < 100 {
        return Err(Error::Domain {
            what: "n_particles",
            value: stream_ids.len() as f64,
            domain: "[100, inf)".into(),
        });
    }
    if !(cfg.dt > 0.0) {
        return Err(Error::Domain {
            what: "dt",
            value: cfg.dt,
            domain: "(0, inf)".into(),
        });
    }
    let d = cfg.dim;
    let n = stream_ids.len();
    let n_steps = cfg.n_steps();
    let dt = if n_steps > 0 { cfg.t_final / n_steps as f64 } else { cfg.dt };
    let stride = cfg.snapshot_stride.max(1);
    let substeps = cfg.noise_substeps.max(1);
    let refresh = cfg.kde_refresh.max(1);

    let mut ens = Ensemble::sample(u0, d, cfg.seed, stream_ids);
    let bandwidth = match cfg.bandwidth {
        Some(b) => b,
        None => {
            let first = ens.coordinate(0);
            let b1 = silverman_bandwidth(&first);
            // Silverman for d dims: N^(-1/(d+4))
            b1 * (n as f64).powf(0.2 - 1.0 / (d as f64 + 4.0))
        }
    };
    let spec = MollifierSpec {
        shape: cfg.kernel,
        bandwidth,
        dim: d,
    };

    let mut streams = ParticleStreams::new(cfg.seed, &ens.stream_ids, Channel::W, 0);
    let r_max = model.r_max;
    let sqrt_dt = dt.sqrt();
    let inv_sqrt_m = 1.0 / (substeps as f64).sqrt();

    let mut snapshots = vec![ens.positions.clone()];
    let mut snapshot_times = vec![0.0];
    let mut density_snaps = Vec::new();
    let mut smoother = GridSmoother::build(&ens.positions, &[], 0, None, &spec)?;
    if let Some(g) = density_grid {
        density_snaps.push(density_on(&smoother, g));
    }
    let mut clamp_count = 0u64;

    for step in 0..n_steps {
        if step > 0 && step % refresh == 0 {
            smoother = GridSmoother::build(&ens.positions, &[], 0, None, &spec)?;
        }
        let sm = &smoother;
        let clamped: u64 = ens
            .positions
            .par_chunks_mut(d)
            .zip(streams.streams_mut().par_iter_mut())
            .map(|(x, rng)| {
                let u_hat = sm.density_at(x);
                let out = !(0.0..=r_max).contains(&u_hat);
                let s = model.sigma(u_hat.clamp(0.0, r_max));
                let mut xi = [0.0; 2];
                for _ in 0..substeps {
                    let z = next_normals(rng, d);
                    for k in 0..d {
                        xi[k] += z[k];
                    }
                }
                for k in 0..d {
                    x[k] += s * sqrt_dt * xi[k] * inv_sqrt_m;
                }
                out as u64
            })
            .sum();
        clamp_count += clamped;
        ens.step = step + 1;
        if ens.step % stride == 0 || ens.step == n_steps {
            snapshots.push(ens.positions.clone());
            snapshot_times.push(ens.step as f64 * dt);
            if let Some(g) = density_grid {
                let fresh = GridSmoother::build(&ens.positions, &[], 0, None, &spec)?;
                density_snaps.push(density_on(&fresh, g));
            }
        }
    }

    let density = match density_grid {
        Some(g) if d == 1 && snapshots.len() > 1 && snapshot_times.windows(2).all(|w| (w[1] - w[0] - snapshot_times[1]).abs() < 1e-9) => {
            Some(PathField::new(*g, snapshot_times[1], density_snaps)?)
        }
        Some(g) if d == 1 && snapshots.len() == 1 => Some(PathField::new(*g, dt, density_snaps)?),
        _ => None,
    };
    Ok(ModeratedRun {
        config: cfg.clone(),
        bandwidth,
        final_ensemble: ens,
        snapshots,
        snapshot_times,
        density,
        clamp_count,
        particle_steps: (n * n_steps) as u64,
    })
}

fn density_on(sm: &GridSmoother, g: &GridSpec) -> Vec<f64> {
    g.centers().iter().map(|&x| sm.density_at(&[x])).collect()
}

/// Compactly supported test function `f(x) = (1 - z^2)^4`, `z = (x - c)/w`,
/// with its second derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
}

impl Bump {
    pub fn value(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.width;
        if z.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - z * z).powi(4)
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.width;
        if z.abs() >= 1.0 {
            return 0.0;
        }
        let q = 1.0 - z * z;
        // d2/dz2 (1 - z^2)^4 = -8 q^3 + 48 z^2 q^2
        (-8.0 * q.powi(3) + 48.0 * z * z * q * q) / (self.width * self.width)
    }
}

/// Functionals of the path up to the window start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastFunctional {
    One,
    /// `tanh(X_s)`.
    TanhAtStart,
    /// `tanh(X_{s/2})`.
    TanhAtHalfStart,
}

/// Test functions, windows and past functionals for the martingale check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingalePlan {
    pub test_fns: Vec<Bump>,
    pub windows: Vec<(f64, f64)>,
    pub functionals: Vec<PastFunctional>,
    /// Pass threshold in standard errors.
    pub n_se: f64,
}

impl Default for MartingalePlan {
    fn default() -> Self {
        Self {
            test_fns: vec![
                Bump { center: -1.0, width: 2.5 },
                Bump { center: 0.0, width: 2.5 },
                Bump { center: 1.0, width: 2.5 },
            ],
            windows: vec![(0.1, 0.3), (0.2, 0.4), (0.3, 0.5)],
            functionals: vec![PastFunctional::One, PastFunctional::TanhAtStart, PastFunctional::TanhAtHalfStart],
            n_se: 3.0,
        }
    }
}

fn snapshot_index(times: &[f64], t: f64) -> Result<usize> {
    let (i, gap) = times
        .iter()
        .enumerate()
        .map(|(i, &s)| (i, (s - t).abs()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let lattice = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
    if gap > 1e-6 * lattice.max(1e-12) + 1e-12 {
        return Err(Error::Config(format!("time {t} is not on the snapshot lattice")));
    }
    Ok(i)
}

/// Checks that `f(X_t) - f(X_s) - 1/2 int_s^t sigma^2(u(r, X_r)) f''(X_r) dr`
/// is uncorrelated with functionals of the past: for every test function,
/// window and functional, the sample mean of `dM psi` must lie within
/// `n_se` standard errors of 0. The integral is a trapezoid rule over the
/// recorded snapshots, and `u` is read from `u_path` (same time lattice).
pub fn martingale_residual(run: &ModeratedRun, u_path: &PathField, model: &DiffusionModel, plan: &MartingalePlan) -> Result<VerificationReport> {
    if run.config.dim != 1 {
        return Err(Error::Dimension { expected: 1, got: run.config.dim });
    }
    if u_path.len() != run.snapshots.len() {
        return Err(Error::Dimension {
            expected: run.snapshots.len(),
            got: u_path.len(),
        });
    }
    let times = &run.snapshot_times;
    let n = run.final_ensemble.len();
    let r_max = model.r_max;
    // sigma^2(u(t_k, X_k)) per snapshot and particle
    let sig2: Vec<Vec<f64>> = run
        .snapshots
        .par_iter()
        .enumerate()
        .map(|(k, xs)| {
            let u = u_path.snapshot(k);
            xs.iter().map(|&x| model.sigma_sq(u.interpolate(x).clamp(0.0, r_max))).collect()
        })
        .collect();
    let mut rep = VerificationReport::new("martingale_problem");
    for (fi, f) in plan.test_fns.iter().enumerate() {
        for &(s, t) in &plan.windows {
            let (ks, kt) = (snapshot_index(times, s)?, snapshot_index(times, t)?);
            let kh = snapshot_index(times, 0.5 * s)?;
            let dm: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut integral = 0.0;
                    for k in ks..kt {
                        let a = sig2[k][i] * f.second_derivative(run.snapshots[k][i]);
                        let b = sig2[k + 1][i] * f.second_derivative(run.snapshots[k + 1][i]);
                        integral += 0.5 * (times[k + 1] - times[k]) * (a + b);
                    }
                    f.value(run.snapshots[kt][i]) - f.value(run.snapshots[ks][i]) - 0.5 * integral
                })
                .collect();
            for psi in &plan.functionals {
                let prod: Vec<f64> = (0..n)
                    .map(|i| {
                        let p = match psi {
                            PastFunctional::One => 1.0,
                            PastFunctional::TanhAtStart => run.snapshots[ks][i].tanh(),
                            PastFunctional::TanhAtHalfStart => run.snapshots[kh][i].tanh(),
                        };
                        dm[i] * p
                    })
                    .collect();
                let mean = prod.iter().sum::<f64>() / n as f64;
                let var = prod.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                let se = (var / n as f64).sqrt();
                let name = format!("f{fi}_c{}_w{s}-{t}_{}", f.center, psi_name(*psi));
                rep.push(Check::within_se(name, mean, se, plan.n_se, "martingale-problem"));
            }
        }
    }
    rep.diag("n_particles", n as f64).diag("clamp_fraction", run.clamp_fraction());
    Ok(rep)
}

fn psi_name(p: PastFunctional) -> &'static str {
    match p {
        PastFunctional::One => "one",
        PastFunctional::TanhAtStart => "tanh_s",
        PastFunctional::TanhAtHalfStart => "tanh_half_s",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp_solver::solve_nonlinear_fp;
    use crate::grid::{project_initial, MASS_TOL};
    use crate::metrics::w1_samples_density;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bump_derivatives() {
        let f = Bump { center: 0.3, width: 1.7 };
        let h = 1e-4;
        for x in [-1.0, 0.0, 0.5, 1.5] {
            let fd = (f.value(x + h) - 2.0 * f.value(x) + f.value(x - h)) / (h * h);
            assert_abs_diff_eq!(f.second_derivative(x), fd, epsilon = 1e-5);
        }
        assert_eq!(f.value(3.0), 0.0);
    }

    #[test]
    fn constant_sigma_gives_brownian_spread() {
        let model = DiffusionModel::constant(0.8, 10.0);
        let cfg = ModeratedConfig {
            n_particles: 50_000,
            dt: 0.01,
            t_final: 0.5,
            seed: 4,
            ..Default::default()
        };
        let run = simulate_moderated(&model, &InitialDensity::gaussian(0.0, 1.0), &cfg, None).unwrap();
        let x0 = &run.snapshots[0];
        let xt = &run.final_ensemble.positions;
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        let n = xt.len() as f64;
        // var(X_T) - var(X_0) estimates s0^2 T; the increment variance has SE sqrt(2/n) s0^2 T
        let inc: Vec<f64> = xt.iter().zip(x0).map(|(a, b)| a - b).collect();
        let expect = 0.64 * 0.5;
        assert!((var(&inc) - expect).abs() < 3.0 * (2.0 / n).sqrt() * expect);
        assert!((var(xt) - var(x0) - expect).abs() < 0.03);
        assert_eq!(run.clamp_count, 0);
    }

    #[test]
    fn runs_are_reproducible_and_exchangeable() {
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 1.0);
        let cfg = ModeratedConfig {
            n_particles: 500,
            dt: 0.02,
            t_final: 0.2,
            seed: 8,
            ..Default::default()
        };
        let u0 = InitialDensity::gaussian(0.0, 1.0);
        let a = simulate_moderated(&model, &u0, &cfg, None).unwrap();
        let b = simulate_moderated(&model, &u0, &cfg, None).unwrap();
        assert_eq!(a.final_ensemble, b.final_ensemble);

        let perm: Vec<u64> = (0..500u64).rev().collect();
        let c = simulate_moderated_streams(&model, &u0, &cfg, None, perm).unwrap();
        for i in 0..500 {
            assert_abs_diff_eq!(c.final_ensemble.positions[499 - i], a.final_ensemble.positions[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn two_dimensional_runs() {
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 1.0);
        let cfg = ModeratedConfig {
            n_particles: 2_000,
            dim: 2,
            dt: 0.02,
            t_final: 0.1,
            seed: 1,
            ..Default::default()
        };
        let run = simulate_moderated(&model, &InitialDensity::gaussian(0.0, 1.0), &cfg, None).unwrap();
        assert_eq!(run.final_ensemble.positions.len(), 4_000);
        assert!(run.density.is_none());
    }

    #[test]
    fn substeps_couple_with_finer_runs() {
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 1.0);
        let u0 = InitialDensity::gaussian(0.0, 1.0);
        let base = ModeratedConfig {
            n_particles: 2_000,
            t_final: 0.2,
            seed: 2,
            bandwidth: Some(0.3),
            ..Default::default()
        };
        let coarse = simulate_moderated(&model, &u0, &ModeratedConfig { dt: 0.02, noise_substeps: 2, ..base.clone() }, None).unwrap();
        let fine = simulate_moderated(&model, &u0, &ModeratedConfig { dt: 0.01, ..base.clone() }, None).unwrap();
        let indep = simulate_moderated(&model, &u0, &ModeratedConfig { dt: 0.01, seed: 3, ..base }, None).unwrap();
        let gap = |a: &ModeratedRun, b: &ModeratedRun| {
            a.final_ensemble.positions.iter().zip(&b.final_ensemble.positions).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2000.0
        };
        assert!(gap(&coarse, &fine) < 0.05 * gap(&fine, &indep));
    }

    #[test]
    fn particles_track_the_pde() {
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 1.0);
        let grid = GridSpec::with_horizon(8.0, 512, 1e-3, 0.3).unwrap();
        let u0 = InitialDensity::gaussian(0.0, 1.0);
        let pde = solve_nonlinear_fp(&model, &project_initial(&u0, &grid, MASS_TOL).unwrap(), 0.0, &grid).unwrap();
        let cfg = ModeratedConfig {
            n_particles: 20_000,
            dt: 0.01,
            t_final: 0.3,
            seed: 6,
            ..Default::default()
        };
        let run = simulate_moderated(&model, &u0, &cfg, None).unwrap();
        let w1 = w1_samples_density(&run.final_ensemble.positions, &pde.last());
        assert!(w1 < 0.03, "{w1}");
    }
}
