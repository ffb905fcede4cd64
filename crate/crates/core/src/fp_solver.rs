//! Finite-volume solver for `du/dt = 1/2 d/dx( alpha_eps(u) du/dx )` on a
//! truncated interval with zero-flux walls.
//!
//! Time stepping is backward Euler. The face diffusivity is the arithmetic mean
//! of the two adjacent cell values, which keeps the implicit operator a
//! symmetric M-matrix: mass is conserved to rounding and the discrete maximum
//! principle holds for any `dt`.

use serde::{Deserialize, Serialize};

use crate::coefficients::DiffusionModel;
use crate::error::{Error, Result};
use crate::grid::{central_gradient, DensityField, GridSpec, PathField, MASS_TOL};
use crate::report::{Check, VerificationReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpOptions {
    /// Sup-norm tolerance of the inner re-freezing loop.
    pub picard_inner_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
}

impl Default for FpOptions {
    fn default() -> Self {
        Self {
            picard_inner_tol: 1e-10,
            max_inner: 50,
            max_outer: 200,
        }
    }
}

/// Solves the tridiagonal system `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if !(pivot > 0.0) {
        return Err(Error::Solve { row: 0, pivot });
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if !(pivot > 0.0) {
            return Err(Error::Solve { row: i, pivot });
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

fn cell_alpha(model: &DiffusionModel, v: &[f64], eps: f64) -> Vec<f64> {
    v.iter().map(|&r| model.alpha_unchecked(r) + eps).collect()
}

/// One backward-Euler step with diffusivity given per cell.
fn implicit_step(u: &[f64], alpha: &[f64], h: f64, dt: f64) -> Result<Vec<f64>> {
    let n = u.len();
    let k = 0.5 * dt / (h * h);
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n - 1 {
        let a = k * 0.5 * (alpha[i] + alpha[i + 1]);
        upper[i] = -a;
        lower[i + 1] = -a;
        diag[i] += a;
        diag[i + 1] += a;
    }
    thomas(&lower, &diag, &upper, u)
}

/// One backward-Euler step of `du/dt = 1/2 (alpha_eps(v) u')'` with `v` frozen.
pub fn step_linear(u: &DensityField, frozen_v: &DensityField, model: &DiffusionModel, eps: f64, dt: f64) -> Result<DensityField> {
    if frozen_v.values.len() != u.values.len() {
        return Err(Error::Dimension {
            expected: u.values.len(),
            got: frozen_v.values.len(),
        });
    }
    check_eps(eps)?;
    let alpha = cell_alpha(model, &frozen_v.values, eps);
    Ok(DensityField {
        grid: u.grid,
        values: implicit_step(&u.values, &alpha, u.h(), dt)?,
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Domain {
            what: "eps",
            value: eps,
            domain: "[0, inf)".into(),
        });
    }
    Ok(())
}

fn check_grid(u0: &DensityField, grid: &GridSpec) -> Result<()> {
    if u0.values.len() != grid.n_cells {
        return Err(Error::Dimension {
            expected: grid.n_cells,
            got: u0.values.len(),
        });
    }
    Ok(())
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn solve_nonlinear_fp(model: &DiffusionModel, u0: &DensityField, eps: f64, grid: &GridSpec) -> Result<PathField> {
    solve_nonlinear_fp_with(model, u0, eps, grid, &FpOptions::default())
}

/// Marches the nonlinear equation with semi-implicit steps: each step freezes
/// `alpha_eps` at the latest iterate and re-solves until two consecutive
/// iterates agree to `picard_inner_tol` in sup norm.
pub fn solve_nonlinear_fp_with(model: &DiffusionModel, u0: &DensityField, eps: f64, grid: &GridSpec, opts: &FpOptions) -> Result<PathField> {
    check_eps(eps)?;
    check_grid(u0, grid)?;
    let h = grid.h();
    let constant_alpha = matches!(model.law, crate::coefficients::SigmaLaw::Constant { .. });
    let mut snapshots = Vec::with_capacity(grid.n_steps + 1);
    snapshots.push(u0.values.clone());
    let mut u = u0.values.clone();
    for _ in 0..grid.n_steps {
        let mut iterate = implicit_step(&u, &cell_alpha(model, &u, eps), h, grid.dt)?;
        if !constant_alpha {
            let mut converged = false;
            let mut residual = f64::INFINITY;
            for _ in 0..opts.max_inner {
                let next = implicit_step(&u, &cell_alpha(model, &iterate, eps), h, grid.dt)?;
                residual = sup_dist(&next, &iterate);
                iterate = next;
                if residual < opts.picard_inner_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NoConvergence {
                    what: "inner re-freezing loop",
                    iterations: opts.max_inner,
                    residual,
                });
            }
        }
        u = iterate;
        snapshots.push(u.clone());
    }
    PathField::new(*grid, grid.dt, snapshots)
}

/// The map `v -> A(v)`: solve the linear equation with `alpha_eps(v(t, x))`
/// frozen over the whole trajectory (step `n -> n+1` uses `v(t_{n+1})`).
pub fn linear_trajectory(model: &DiffusionModel, u0: &DensityField, eps: f64, v: &PathField) -> Result<PathField> {
    check_eps(eps)?;
    let grid = v.grid;
    check_grid(u0, &grid)?;
    if v.len() != grid.n_steps + 1 {
        return Err(Error::Dimension {
            expected: grid.n_steps + 1,
            got: v.len(),
        });
    }
    let mut snapshots = Vec::with_capacity(v.len());
    snapshots.push(u0.values.clone());
    let mut u = u0.values.clone();
    for n in 0..grid.n_steps {
        u = implicit_step(&u, &cell_alpha(model, &v.snapshots[n + 1], eps), grid.h(), grid.dt)?;
        snapshots.push(u.clone());
    }
    PathField::new(grid, grid.dt, snapshots)
}

/// Fixed point of the whole-trajectory map, starting from `u0` held constant
/// in time. Returns the first iterate `v_k` (k >= 1) with
/// `||A(v_k) - v_k||_{L2((0,T) x grid)} <= outer_tol`, and `k`.
pub fn schaefer_fixed_point(model: &DiffusionModel, u0: &DensityField, eps: f64, grid: &GridSpec, outer_tol: f64) -> Result<(PathField, usize)> {
    schaefer_fixed_point_with(model, u0, eps, grid, outer_tol, &FpOptions::default())
}

pub fn schaefer_fixed_point_with(
    model: &DiffusionModel,
    u0: &DensityField,
    eps: f64,
    grid: &GridSpec,
    outer_tol: f64,
    opts: &FpOptions,
) -> Result<(PathField, usize)> {
    check_grid(u0, grid)?;
    let mut start = PathField::constant_in_time(u0);
    start.grid = *grid;
    start.dt = grid.dt;
    start.snapshots.resize(grid.n_steps + 1, u0.values.clone());
    let mut v = linear_trajectory(model, u0, eps, &start)?;
    if outer_tol.is_infinite() {
        return Ok((v, 1));
    }
    let mut residual = f64::INFINITY;
    for k in 1..=opts.max_outer {
        let next = linear_trajectory(model, u0, eps, &v)?;
        residual = next.l2_dist(&v);
        if residual <= outer_tol {
            return Ok((v, k));
        }
        v = next;
    }
    Err(Error::NoConvergence {
        what: "whole-trajectory fixed point",
        iterations: opts.max_outer,
        residual,
    })
}

/// Quantities entering the energy estimates, per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    pub times: Vec<f64>,
    /// `||u(t)||_2^2`.
    pub l2_sq: Vec<f64>,
    /// `||grad u(t)||_2^2`.
    pub grad_sq: Vec<f64>,
    /// `||grad Phi_eps(u(t))||_2^2`, as `grad Phi . alpha grad u` on cell
    /// faces with the face-averaged `alpha` of the scheme, so that the
    /// dissipation residual isolates the time-stepping error.
    pub flux_sq: Vec<f64>,
}

pub fn energy_profile(traj: &PathField, model: &DiffusionModel, eps: f64) -> EnergyProfile {
    let h = traj.grid.h();
    let mut out = EnergyProfile {
        times: Vec::with_capacity(traj.len()),
        l2_sq: Vec::with_capacity(traj.len()),
        grad_sq: Vec::with_capacity(traj.len()),
        flux_sq: Vec::with_capacity(traj.len()),
    };
    for (k, u) in traj.snapshots.iter().enumerate() {
        let g = central_gradient(u, h);
        out.times.push(traj.time(k));
        out.l2_sq.push(h * u.iter().map(|v| v * v).sum::<f64>());
        out.grad_sq.push(h * g.iter().map(|v| v * v).sum::<f64>());
        let phi: Vec<f64> = u.iter().map(|&r| model.phi_eps_unchecked(r.max(0.0), eps)).collect();
        let alpha = cell_alpha(model, u, eps);
        out.flux_sq.push((0..u.len() - 1).map(|i| (phi[i + 1] - phi[i]) * 0.5 * (alpha[i] + alpha[i + 1]) * (u[i + 1] - u[i])).sum::<f64>() / h);
    }
    out
}

/// Running trapezoid integral `int_0^{t_k} f`.
fn cumulative_trapezoid(f: &[f64], dt: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(f.len());
    out.push(0.0);
    for w in f.windows(2) {
        acc += 0.5 * dt * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

fn integral_psi(u: &[f64], model: &DiffusionModel, eps: f64, h: f64) -> f64 {
    h * u.iter().map(|&r| model.psi_eps_unchecked(r.max(0.0), eps)).sum::<f64>()
}

/// Mass, positivity, maximum-principle, energy and dissipation checks on a
/// trajectory produced by this module.
pub fn energy_report(traj: &PathField, model: &DiffusionModel, eps: f64) -> VerificationReport {
    let mut rep = VerificationReport::new("fp_energy");
    let h = traj.grid.h();
    let u0 = &traj.snapshots[0];
    let mass0 = h * u0.iter().sum::<f64>();
    let u0_max = u0.iter().copied().fold(0.0, f64::max);

    let mass_drift = traj
        .snapshots
        .iter()
        .map(|s| (h * s.iter().sum::<f64>() - mass0).abs())
        .fold(0.0, f64::max);
    rep.push(Check::one_sided("mass_conservation", mass_drift, MASS_TOL, 0.0, "plumbing"));
    let min_value = traj.min_value();
    rep.push(Check::one_sided("nonnegativity", -min_value, 1e-12, 0.0, "plumbing"));

    let max_value = traj.max_value();
    rep.push(Check::one_sided("maximum_principle", max_value, u0_max, 1e-8, "maximum-principle"));

    let prof = energy_profile(traj, model, eps);
    let grad_int = cumulative_trapezoid(&prof.grad_sq, traj.dt);
    let energy_sup = prof
        .l2_sq
        .iter()
        .zip(&grad_int)
        .map(|(l2, g)| l2 + eps * g)
        .fold(f64::NEG_INFINITY, f64::max);
    rep.push(Check::one_sided("energy_inequality", energy_sup, prof.l2_sq[0], 1e-6, "energy-inequality"));

    let flux_int = cumulative_trapezoid(&prof.flux_sq, traj.dt);
    let last = traj.len() - 1;
    let psi0 = integral_psi(u0, model, eps, h);
    let psi_t = integral_psi(&traj.snapshots[last], model, eps, h);
    let residual = (psi_t + 0.5 * flux_int[last] - psi0).abs();
    let sup_alpha_eps = model.sup_alpha(u0_max, 1001) + eps;
    let c = 10.0 * sup_alpha_eps * prof.l2_sq[0];
    rep.push(Check::one_sided("dissipation_identity", residual, c * (h + traj.dt), 0.0, "entropy-dissipation-identity"));

    rep.diag("mass_drift", mass_drift)
        .diag("min_value", min_value)
        .diag("max_value", max_value)
        .diag("u0_max", u0_max)
        .diag("energy_sup", energy_sup)
        .diag("u0_l2_sq", prof.l2_sq[0])
        .diag("dissipation_residual", residual)
        .diag("dissipation_constant", c);
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{project_initial, InitialDensity};
    use approx::assert_abs_diff_eq;

    fn normal(x: f64, var: f64) -> f64 {
        (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn thomas_matches_dense_solve() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let rhs: Vec<f64> = (0..4)
            .map(|i| diag[i] * x[i] + if i > 0 { lower[i] * x[i - 1] } else { 0.0 } + if i < 3 { upper[i] * x[i + 1] } else { 0.0 })
            .collect();
        let got = thomas(&lower, &diag, &upper, &rhs).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(got[i], x[i], epsilon = 1e-14);
        }
        assert!(matches!(thomas(&lower, &[0.0; 4], &upper, &rhs), Err(Error::Solve { row: 0, .. })));
    }

    #[test]
    fn heat_step_adds_dt_to_variance() {
        let g = GridSpec::new(8.0, 1024, 1e-3, 1).unwrap();
        let u = project_initial(&InitialDensity::gaussian(0.0, 0.5), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::constant(1.0, 1.0);
        let out = step_linear(&u, &u, &model, 0.0, 1e-3).unwrap();
        let var: f64 = g.centers().iter().zip(&out.values).map(|(x, v)| x * x * v * g.h()).sum();
        // the discrete Laplacian maps x^2 to 2 exactly, so the variance grows by dt
        assert_abs_diff_eq!(var, 0.25 + 1e-3, epsilon = 1e-9);
    }

    #[test]
    fn uniform_density_is_stationary() {
        let g = GridSpec::new(1.0, 64, 1e-2, 10).unwrap();
        let u = DensityField::uniform(g, 0.5);
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 2.0);
        let traj = solve_nonlinear_fp(&model, &u, 0.01, &g).unwrap();
        for s in &traj.snapshots {
            assert!(s.iter().all(|v| (v - 0.5).abs() < 1e-12));
        }
        let rep = energy_report(&traj, &model, 0.01);
        assert!(rep.all_pass());
        assert!(rep.diagnostics["dissipation_residual"] < 1e-14);
    }

    #[test]
    fn heat_equation_matches_exact_gaussian() {
        let g = GridSpec::with_horizon(8.0, 512, 1e-3, 0.5).unwrap();
        let u0 = project_initial(&InitialDensity::gaussian(0.0, 0.5), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::constant(1.0, 2.0 * u0.max());
        let traj = solve_nonlinear_fp(&model, &u0, 0.0, &g).unwrap();
        let err = traj.last().l1_error_vs(|x| normal(x, 0.75));
        assert!(err <= 1e-3, "L1 error {err}");
        assert!(energy_report(&traj, &model, 0.0).all_pass());
    }

    #[test]
    fn porous_medium_step_against_explicit_oracle() {
        let g = GridSpec::new(3.0, 128, 1e-3, 1).unwrap();
        let u0 = project_initial(&InitialDensity::Triangle { center: 0.0, half_width: 1.0 }, &g, MASS_TOL).unwrap();
        let model = DiffusionModel::pme(2.0, 2.0 * u0.max());
        let dt = 1e-3;
        let out = step_linear(&u0, &u0, &model, 0.0, dt).unwrap();
        assert_abs_diff_eq!(out.mass(), 1.0, epsilon = 1e-12);
        assert!(out.min() >= 0.0);

        // explicit Euler with the same frozen coefficient at dt/100, 100 steps
        let h = g.h();
        let a: Vec<f64> = u0.values.iter().map(|&r| model.alpha_unchecked(r)).collect();
        let mut u = u0.values.clone();
        let small = dt / 100.0;
        for _ in 0..100 {
            let mut next = u.clone();
            for i in 0..u.len() {
                let right = if i + 1 < u.len() { 0.5 * (a[i] + a[i + 1]) * (u[i + 1] - u[i]) } else { 0.0 };
                let left = if i > 0 { 0.5 * (a[i] + a[i - 1]) * (u[i] - u[i - 1]) } else { 0.0 };
                next[i] += 0.5 * small / (h * h) * (right - left);
            }
            u = next;
        }
        let diff = sup_dist(&u, &out.values);
        // backward Euler is first order in dt; the oracle is 100x finer
        assert!(diff < 2e-3, "sup diff {diff}");
    }

    #[test]
    fn schaefer_constant_sigma_takes_one_iteration() {
        let g = GridSpec::with_horizon(6.0, 128, 1e-2, 0.2).unwrap();
        let u0 = project_initial(&InitialDensity::gaussian(0.0, 1.0), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::constant(1.0, 1.0);
        let (_, k) = schaefer_fixed_point(&model, &u0, 0.1, &g, 1e-10).unwrap();
        assert_eq!(k, 1);
        let sqrt = DiffusionModel::sqrt_affine(1.0, 1.0, 1.0);
        let (v, k) = schaefer_fixed_point(&sqrt, &u0, 0.1, &g, f64::INFINITY).unwrap();
        assert_eq!(k, 1);
        let direct = linear_trajectory(&sqrt, &u0, 0.1, &PathField::constant_in_time(&u0)).unwrap();
        assert_eq!(v, direct);
    }

    #[test]
    fn schaefer_agrees_with_time_marching() {
        let g = GridSpec::with_horizon(6.0, 128, 1e-2, 0.3).unwrap();
        let u0 = project_initial(&InitialDensity::gaussian(0.0, 0.5), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::sqrt_affine(1.0, 1.0, 2.0 * u0.max());
        let tol = 1e-9;
        let (fixed, k) = schaefer_fixed_point(&model, &u0, 0.1, &g, tol).unwrap();
        assert!(k > 1);
        let marched = solve_nonlinear_fp(&model, &u0, 0.1, &g).unwrap();
        assert!(fixed.l2_dist(&marched) <= 10.0 * tol);
    }

    #[test]
    fn nonconvergent_inner_loop_reports() {
        let g = GridSpec::with_horizon(4.0, 64, 0.5, 1.0).unwrap();
        let u0 = project_initial(&InitialDensity::gaussian(0.0, 0.5), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::pme(3.0, 2.0);
        let opts = FpOptions {
            max_inner: 1,
            ..Default::default()
        };
        assert!(matches!(
            solve_nonlinear_fp_with(&model, &u0, 0.0, &g, &opts),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn porous_medium_max_strictly_decreases() {
        let g = GridSpec::with_horizon(8.0, 256, 2e-3, 0.2).unwrap();
        let u0 = project_initial(&InitialDensity::gaussian(0.0, 1.0), &g, MASS_TOL).unwrap();
        let model = DiffusionModel::pme(2.0, 2.0 * u0.max());
        let traj = solve_nonlinear_fp(&model, &u0, 0.01, &g).unwrap();
        for k in 1..traj.len() {
            assert!(traj.snapshot(k).max() < u0.max());
        }
        assert!(energy_report(&traj, &model, 0.01).all_pass());
    }
}
