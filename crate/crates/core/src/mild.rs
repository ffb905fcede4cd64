//! Gaussian-kernel (mild) formulation of the moderated Fokker–Planck equation.
//!
//! For a kernel scale `gamma`, any solution satisfies
//!
//! ```text
//! u(t) = G_t * u0 + 1/2 int_0^t Lap G_{t-s} * ((sigma^2(u_s) - gamma^2) u_s) ds
//! ```
//!
//! with `G_t` the `N(0, gamma^2 t)` density. Convolutions run on a periodic
//! array of twice the grid length with the physical cells in the middle; the
//! Laplacian is the spectral multiplier `-xi^2`. The Duhamel integral uses the
//! left-endpoint rule on the trajectory's time lattice, whose discrete operator
//! has the per-frequency norm `(2/gamma^2) a/(e^a - 1) <= 2/gamma^2`,
//! `a = gamma^2 xi^2 dt / 2`, so the continuum bound carries over exactly.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use statrs::function::erf::erfc;

use crate::coefficients::DiffusionModel;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, PathField};
use crate::report::{Check, VerificationReport};
use crate::rng::{stream_rng, Channel};

/// Kernel mass allowed to wrap around the periodic embedding.
pub const ALIAS_LIMIT: f64 = 1e-8;

/// `gamma` with `gamma^2 = 1.5 sup_{[0, u_max]} alpha`.
pub fn choose_gamma(model: &DiffusionModel, u_max: f64) -> Result<f64> {
    let sup = model.sup_alpha(u_max, 4001);
    if !(sup > 0.0) {
        return Err(Error::Domain {
            what: "sup alpha",
            value: sup,
            domain: "(0, inf)".into(),
        });
    }
    Ok((1.5 * sup).sqrt())
}

/// Heat-kernel convolution on a zero-padded periodic embedding of a grid.
#[derive(Clone)]
pub struct HeatKernelOp {
    pub gamma: f64,
    pub grid: GridSpec,
    len: usize,
    offset: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// `xi^2` for each DFT bin.
    xi_sq: Vec<f64>,
}

impl std::fmt::Debug for HeatKernelOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatKernelOp").field("gamma", &self.gamma).field("grid", &self.grid).field("len", &self.len).finish()
    }
}

impl HeatKernelOp {
    pub fn new(gamma: f64, grid: GridSpec) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain {
                what: "gamma",
                value: gamma,
                domain: "(0, inf)".into(),
            });
        }
        let len = 2 * grid.n_cells;
        let mut planner = FftPlanner::new();
        let period = len as f64 * grid.h();
        let xi_sq = (0..len)
            .map(|k| {
                let m = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
                (std::f64::consts::TAU * m / period).powi(2)
            })
            .collect();
        Ok(Self {
            gamma,
            grid,
            len,
            offset: grid.n_cells / 2,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            xi_sq,
        })
    }

    /// Length of the padded periodic array.
    pub fn padded_len(&self) -> usize {
        self.len
    }

    /// Kernel mass beyond the half period `2L` at time `t`.
    pub fn alias_mass(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        erfc(2.0 * self.grid.half_width / (self.gamma * (2.0 * t).sqrt()))
    }

    fn check_alias(&self, t: f64) -> Result<()> {
        let mass = self.alias_mass(t);
        if mass > ALIAS_LIMIT {
            return Err(Error::Alias { mass });
        }
        Ok(())
    }

    /// Cell-sampled `G_t` on the periodic lattice, normalised to unit sum.
    pub fn kernel(&self, t: f64) -> Vec<f64> {
        let h = self.grid.h();
        let mut k = vec![0.0; self.len];
        if t <= 0.0 {
            k[0] = 1.0;
            return k;
        }
        let var = self.gamma * self.gamma * t;
        for (j, kj) in k.iter_mut().enumerate() {
            let lag = if j <= self.len / 2 { j as f64 } else { j as f64 - self.len as f64 };
            let x = lag * h;
            *kj = (-0.5 * x * x / var).exp();
        }
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        k
    }

    fn kernel_hat(&self, t: f64) -> Vec<Complex64> {
        let mut k: Vec<Complex64> = self.kernel(t).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut k);
        k
    }

    fn embed_hat(&self, f: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.len];
        for (i, &v) in f.iter().enumerate() {
            buf[self.offset + i] = Complex64::new(v, 0.0);
        }
        self.forward.process(&mut buf);
        buf
    }

    fn extract(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        self.inverse.process(&mut spectrum);
        let scale = 1.0 / self.len as f64;
        spectrum[self.offset..self.offset + self.grid.n_cells].iter().map(|c| c.re * scale).collect()
    }

    /// `G_t * f` restricted to the physical cells. `t = 0` returns `f`.
    pub fn heat_convolve(&self, f: &[f64], t: f64) -> Result<Vec<f64>> {
        if f.len() != self.grid.n_cells {
            return Err(Error::Dimension {
                expected: self.grid.n_cells,
                got: f.len(),
            });
        }
        if t == 0.0 {
            return Ok(f.to_vec());
        }
        self.check_alias(t)?;
        let kh = self.kernel_hat(t);
        let fh = self.embed_hat(f);
        Ok(self.extract(fh.iter().zip(&kh).map(|(a, b)| a * b).collect()))
    }

    /// Left-endpoint Duhamel sum
    /// `out(t_n) = sum_{k<n} dt Lap G_{t_n - t_k} * g(t_k)`, `out(t_0) = 0`,
    /// on the lattice `t_k = k dt`.
    pub fn duhamel(&self, g: &[Vec<f64>], dt: f64) -> Result<Vec<Vec<f64>>> {
        let n_t = g.len();
        if n_t == 0 {
            return Ok(Vec::new());
        }
        self.check_alias(dt * n_t as f64)?;
        let ghat: Vec<Vec<Complex64>> = g.iter().map(|gk| self.embed_hat(gk)).collect();
        // lag j multiplier: -xi^2 dt K_hat(j dt)
        let lag_hat: Vec<Vec<Complex64>> = (1..n_t)
            .map(|j| {
                self.kernel_hat(j as f64 * dt)
                    .into_iter()
                    .zip(&self.xi_sq)
                    .map(|(k, &x2)| -k * (x2 * dt))
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(n_t);
        out.push(vec![0.0; self.grid.n_cells]);
        for n in 1..n_t {
            let mut acc = vec![Complex64::new(0.0, 0.0); self.len];
            for (k, gk) in ghat.iter().enumerate().take(n) {
                let m = &lag_hat[n - k - 1];
                for ((a, x), y) in acc.iter_mut().zip(gk).zip(m) {
                    *a += x * y;
                }
            }
            out.push(self.extract(acc));
        }
        Ok(out)
    }

    /// The mild map applied to `u_traj`:
    /// `t -> G_t * u0 + 1/2 sum_{s<t} dt Lap G_{t-s} * ((sigma_eps^2(u_s) - gamma^2) u_s)`.
    pub fn mild_map(&self, u_traj: &PathField, model: &DiffusionModel, u0: &[f64], eps: f64) -> Result<PathField> {
        let g2 = self.gamma * self.gamma;
        let g: Vec<Vec<f64>> = u_traj
            .snapshots
            .iter()
            .map(|s| s.iter().map(|&r| (model.sigma_sq(r) + eps - g2) * r).collect())
            .collect();
        let d = self.duhamel(&g, u_traj.dt)?;
        let mut snaps = Vec::with_capacity(d.len());
        for (k, dk) in d.into_iter().enumerate() {
            let free = self.heat_convolve(u0, k as f64 * u_traj.dt)?;
            snaps.push(free.iter().zip(&dk).map(|(a, b)| a + 0.5 * b).collect());
        }
        PathField::new(u_traj.grid, u_traj.dt, snaps)
    }
}

/// `L^2((0,T) x grid)` norm of a lattice trajectory using the rows `range`.
fn lattice_l2(snaps: &[Vec<f64>], h: f64, dt: f64) -> f64 {
    (h * dt * snaps.iter().flatten().map(|v| v * v).sum::<f64>()).sqrt()
}

/// Output and input norms of the Duhamel difference for a trajectory pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionMeasurement {
    /// `||M(u1) - M(u2)|| / ||u1 - u2||`.
    pub factor: f64,
    /// `sup |gamma^2 - abar| / gamma^2` over the pair's values, `abar` the
    /// segment average of `alpha` between `u1` and `u2`.
    pub pointwise_bound: f64,
    pub input_norm: f64,
    pub output_norm: f64,
}

/// Measures how much the mild map contracts the distance between two
/// trajectories. The left-endpoint operator maps rows `0..N-1` of the input to
/// rows `1..N` of the output, so the two norms are taken over those rows
/// (each a rectangle rule for `L^2((0,T) x grid)`). Returns factor 0 when the
/// inputs agree to 1e-14.
pub fn contraction_factor(op: &HeatKernelOp, u1: &PathField, u2: &PathField, model: &DiffusionModel, eps: f64) -> Result<ContractionMeasurement> {
    if u1.len() != u2.len() {
        return Err(Error::Dimension {
            expected: u1.len(),
            got: u2.len(),
        });
    }
    let h = u1.grid.h();
    let n_t = u1.len();
    let diff: Vec<Vec<f64>> = u1.snapshots.iter().zip(&u2.snapshots).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
    let input_norm = lattice_l2(&diff[..n_t.saturating_sub(1)], h, u1.dt);
    let g2 = op.gamma * op.gamma;
    let mut pointwise: f64 = 0.0;
    for (a, b) in u1.snapshots.iter().zip(&u2.snapshots).take(n_t.saturating_sub(1)) {
        for (&r1, &r2) in a.iter().zip(b) {
            if r1 != r2 {
                pointwise = pointwise.max((g2 - segment_alpha(model, r1, r2, eps)).abs() / g2);
            }
        }
    }
    if input_norm < 1e-14 {
        return Ok(ContractionMeasurement {
            factor: 0.0,
            pointwise_bound: pointwise,
            input_norm,
            output_norm: 0.0,
        });
    }
    let g: Vec<Vec<f64>> = u1
        .snapshots
        .iter()
        .zip(&u2.snapshots)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&r1, &r2)| (model.sigma_sq(r1) + eps - g2) * r1 - (model.sigma_sq(r2) + eps - g2) * r2)
                .collect()
        })
        .collect();
    let out: Vec<Vec<f64>> = op.duhamel(&g, u1.dt)?.into_iter().map(|row| row.into_iter().map(|v| 0.5 * v).collect()).collect();
    let output_norm = lattice_l2(&out[1..], h, u1.dt);
    Ok(ContractionMeasurement {
        factor: output_norm / input_norm,
        pointwise_bound: pointwise,
        input_norm,
        output_norm,
    })
}

/// `int_0^1 alpha_eps(r1 + theta (r2 - r1)) dtheta`, i.e. the chord slope of
/// `r -> (sigma^2(r) + eps) r`.
pub fn segment_alpha(model: &DiffusionModel, r1: f64, r2: f64, eps: f64) -> f64 {
    if (r2 - r1).abs() < 1e-12 * (1.0 + r1.abs()) {
        return model.alpha_unchecked(0.5 * (r1 + r2)) + eps;
    }
    ((model.sigma_sq(r2) + eps) * r2 - (model.sigma_sq(r1) + eps) * r1) / (r2 - r1)
}

/// Iterates `u <- M(u)` from `start` until successive iterates differ by at
/// most `tol` in `L^2((0,T) x grid)`. Returns the final iterate, the number of
/// iterations and the last increment.
pub fn iterate_mild(
    op: &HeatKernelOp,
    start: &PathField,
    model: &DiffusionModel,
    u0: &[f64],
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(PathField, usize, f64)> {
    let mut u = start.clone();
    let mut last = f64::INFINITY;
    for k in 1..=max_iter {
        let next = op.mild_map(&u, model, u0, eps)?;
        last = next.l2_dist(&u);
        u = next;
        if last <= tol {
            return Ok((u, k, last));
        }
    }
    Err(Error::NoConvergence {
        what: "mild-map iteration",
        iterations: max_iter,
        residual: last,
    })
}

/// `s(tau, xi) = 2 xi^2 / sqrt(4 tau^2 + gamma^4 xi^4)`.
pub fn heat_symbol(gamma: f64, tau: f64, xi: f64) -> f64 {
    let g4 = gamma.powi(4);
    let xi2 = xi * xi;
    2.0 * xi2 / (4.0 * tau * tau + g4 * xi2 * xi2).sqrt()
}

/// Grid supremum of the heat symbol over `[1e-6, 1e6]^2` (log-spaced), plus the
/// operator inequality on `n_random` random band-limited inputs.
pub fn symbol_bound_check(gamma: f64, n_tau: usize, n_xi: usize, n_random: usize, seed: u64) -> Result<VerificationReport> {
    if n_tau < 64 || n_xi < 64 {
        return Err(Error::Domain {
            what: "symbol grid size",
            value: n_tau.min(n_xi) as f64,
            domain: "[64, inf)".into(),
        });
    }
    let bound = 2.0 / (gamma * gamma);
    let logspace = |i: usize, n: usize| 10f64.powf(-6.0 + 12.0 * i as f64 / (n - 1) as f64);
    let mut sup: f64 = 0.0;
    for i in 0..n_tau {
        let tau = logspace(i, n_tau);
        for j in 0..n_xi {
            sup = sup.max(heat_symbol(gamma, tau, logspace(j, n_xi)));
        }
    }
    let mut rep = VerificationReport::new(format!("symbol_bound_gamma_{gamma}"));
    rep.push(Check::one_sided("symbol_sup", sup, bound, 1e-12, "heat-symbol-bound"));
    rep.diag("symbol_sup", sup).diag("bound", bound);

    let grid = GridSpec::with_horizon(8.0, 256, 0.01, 1.0)?;
    let op = HeatKernelOp::new(gamma, grid)?;
    let mut rng = stream_rng(seed, gamma.to_bits(), Channel::Aux);
    let mut worst: f64 = 0.0;
    for r in 0..n_random {
        let f = random_band_limited(&grid, &mut rng);
        let out = op.duhamel(&f, grid.dt)?;
        let lhs = lattice_l2(&out[1..], grid.h(), grid.dt);
        let rhs = lattice_l2(&f[..f.len() - 1], grid.h(), grid.dt);
        let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
        worst = worst.max(ratio);
        rep.push(Check::one_sided(format!("operator_bound_{r}"), lhs, bound * rhs, 0.05, "heat-symbol-bound"));
    }
    rep.diag("worst_operator_ratio", worst);
    Ok(rep)
}

/// A smooth space-time field: a few random Fourier modes in `x` (wavenumber at
/// most 8/L) and in `t`, under a Gaussian envelope that keeps it inside the
/// grid.
fn random_band_limited(grid: &GridSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let l = grid.half_width;
    let n_modes = 6;
    let modes: Vec<(f64, f64, f64, f64, f64)> = (0..n_modes)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..8.0) / l,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..20.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let width = 0.25 * l;
    (0..=grid.n_steps)
        .map(|k| {
            let t = k as f64 * grid.dt;
            grid.centers()
                .iter()
                .map(|&x| {
                    let env = (-0.5 * (x / width).powi(2)).exp();
                    env * modes.iter().map(|&(a, w, p, nu, q)| a * (w * x + p).cos() * (nu * t + q).cos()).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp_solver::solve_nonlinear_fp;
    use crate::grid::{project_initial, InitialDensity, MASS_TOL};
    use approx::assert_abs_diff_eq;

    fn normal(x: f64, var: f64) -> f64 {
        (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn gamma_choice() {
        assert_abs_diff_eq!(choose_gamma(&DiffusionModel::constant(1.0, 10.0), 3.0).unwrap().powi(2), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(choose_gamma(&DiffusionModel::pme(2.0, 4.0), 2.0).unwrap().powi(2), 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(choose_gamma(&DiffusionModel::sqrt_affine(1.0, 1.0, 2.0), 1.0).unwrap().powi(2), 4.5, epsilon = 1e-12);
        assert!(choose_gamma(&DiffusionModel::constant(0.0, 1.0), 1.0).is_err());
    }

    #[test]
    fn point_mass_spreads_to_gaussian() {
        let g = GridSpec::new(4.0, 512, 0.01, 1).unwrap();
        let op = HeatKernelOp::new(1.0, g).unwrap();
        let mut f = vec![0.0; 512];
        f[256] = 1.0 / g.h();
        let out = op.heat_convolve(&f, 0.25).unwrap();
        let peak = out.iter().copied().fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, 0.7979, epsilon = 2e-3);
        assert_eq!(op.heat_convolve(&f, 0.0).unwrap(), f);
    }

    #[test]
    fn gaussian_semigroup() {
        let g = GridSpec::new(8.0, 1024, 0.01, 1).unwrap();
        let op = HeatKernelOp::new(0.8, g).unwrap();
        let f: Vec<f64> = g.centers().iter().map(|&x| normal(x, 0.5)).collect();
        let out = op.heat_convolve(&f, 0.3).unwrap();
        let var = 0.5 + 0.64 * 0.3;
        let l1: f64 = g.centers().iter().zip(&out).map(|(&x, v)| (v - normal(x, var)).abs() * g.h()).sum();
        assert!(l1 < 1e-6, "{l1}");
        let twice = op.heat_convolve(&op.heat_convolve(&f, 0.1).unwrap(), 0.2).unwrap();
        let l1: f64 = twice.iter().zip(&out).map(|(a, b)| (a - b).abs() * g.h()).sum();
        assert!(l1 < 1e-8, "{l1}");
    }

    #[test]
    fn alias_guard() {
        let g = GridSpec::new(1.0, 64, 0.01, 1).unwrap();
        let op = HeatKernelOp::new(1.0, g).unwrap();
        assert!(matches!(op.heat_convolve(&vec![0.0; 64], 5.0), Err(Error::Alias { .. })));
    }

    #[test]
    fn kernel_sums_to_one() {
        let g = GridSpec::new(8.0, 256, 0.01, 1).unwrap();
        let op = HeatKernelOp::new(1.5, g).unwrap();
        for t in [1e-6, 1e-3, 0.1, 1.0] {
            assert_abs_diff_eq!(op.kernel(t).iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn matching_sigma_gives_free_heat_flow() {
        let g = GridSpec::with_horizon(6.0, 128, 0.02, 0.2).unwrap();
        let u0 = project_initial(&InitialDensity::gaussian(0.0, 1.0), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::constant(1.3, 1.0);
        let op = HeatKernelOp::new(1.3, g).unwrap();
        // arbitrary trajectory: the integrand vanishes when sigma = gamma
        let junk = PathField::new(g, g.dt, vec![vec![0.37; 128]; g.n_steps + 1]).unwrap();
        let out = op.mild_map(&junk, &model, &u0.values, 0.0).unwrap();
        for (k, s) in out.snapshots.iter().enumerate() {
            let free = op.heat_convolve(&u0.values, k as f64 * g.dt).unwrap();
            for (a, b) in s.iter().zip(&free) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn heat_solution_is_nearly_fixed() {
        let residual = |n: usize, dt: f64| {
            let g = GridSpec::with_horizon(8.0, n, dt, 0.4).unwrap();
            let model = DiffusionModel::constant(1.0, 2.0);
            let snaps: Vec<Vec<f64>> = (0..=g.n_steps)
                .map(|k| g.centers().iter().map(|&x| normal(x, 0.25 + k as f64 * g.dt)).collect())
                .collect();
            let u = PathField::new(g, g.dt, snaps).unwrap();
            let op = HeatKernelOp::new(1.5, g).unwrap();
            let m = op.mild_map(&u, &model, &u.snapshots[0], 0.0).unwrap();
            m.l2_dist(&u)
        };
        let coarse = residual(128, 0.02);
        let fine = residual(256, 0.01);
        assert!(coarse < 0.02, "{coarse}");
        assert!(fine < 0.6 * coarse, "{coarse} -> {fine}");
    }

    #[test]
    fn identical_trajectories_do_not_contract() {
        let g = GridSpec::with_horizon(6.0, 64, 0.05, 0.2).unwrap();
        let u = PathField::new(g, g.dt, vec![vec![0.1; 64]; g.n_steps + 1]).unwrap();
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 1.0);
        let op = HeatKernelOp::new(2.0, g).unwrap();
        assert_eq!(contraction_factor(&op, &u, &u, &model, 0.0).unwrap().factor, 0.0);
    }

    #[test]
    fn constant_alpha_contracts_by_one_third() {
        let g = GridSpec::with_horizon(8.0, 128, 0.02, 0.5).unwrap();
        let model = DiffusionModel::constant(1.0, 2.0);
        let gamma = choose_gamma(&model, 1.0).unwrap();
        let op = HeatKernelOp::new(gamma, g).unwrap();
        let traj = |d: InitialDensity| {
            let u0 = project_initial(&d, &g, MASS_TOL).unwrap();
            solve_nonlinear_fp(&model, &u0, 0.0, &g).unwrap()
        };
        let a = traj(InitialDensity::gaussian(0.0, 0.6));
        let b = traj(InitialDensity::Bimodal { sep: 1.0, std: 0.5 });
        let m = contraction_factor(&op, &a, &b, &model, 0.0).unwrap();
        assert_abs_diff_eq!(m.pointwise_bound, 1.0 / 3.0, epsilon = 1e-12);
        assert!(m.factor <= 1.0 / 3.0 + 0.05, "{m:?}");
    }

    #[test]
    fn symbol_sup_matches_two_over_gamma_squared() {
        for gamma in [0.5, 1.0, 2.0] {
            let rep = symbol_bound_check(gamma, 64, 64, 3, 1).unwrap();
            assert!(rep.all_pass(), "{rep:?}");
            let sup = rep.diagnostics["symbol_sup"];
            assert!(sup <= 2.0 / (gamma * gamma) * (1.0 + 1e-12));
            assert!(sup >= 2.0 / (gamma * gamma) * (1.0 - 1e-6));
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let g = GridSpec::with_horizon(4.0, 64, 0.05, 0.3).unwrap();
        let op = HeatKernelOp::new(1.0, g).unwrap();
        let out = op.duhamel(&vec![vec![0.0; 64]; g.n_steps + 1], g.dt).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }
}
