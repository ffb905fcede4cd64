//! Uniform 1-D grids, piecewise-constant densities and their time stacks.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::uniform;

/// Default tolerance on lost or created mass.
pub const MASS_TOL: f64 = 1e-6;

/// Cell-centred grid on `[-L, L]` with a uniform time lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_width: f64,
    pub n_cells: usize,
    pub dt: f64,
    pub n_steps: usize,
}

impl GridSpec {
    pub fn new(half_width: f64, n_cells: usize, dt: f64, n_steps: usize) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Domain {
                what: "half_width",
                value: half_width,
                domain: "(0, inf)".into(),
            });
        }
        if n_cells < 16 {
            return Err(Error::Domain {
                what: "n_cells",
                value: n_cells as f64,
                domain: "[16, inf)".into(),
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain {
                what: "dt",
                value: dt,
                domain: "(0, inf)".into(),
            });
        }
        Ok(Self {
            half_width,
            n_cells,
            dt,
            n_steps,
        })
    }

    /// Grid reaching `t_final` in whole steps of (at most) `dt`.
    pub fn with_horizon(half_width: f64, n_cells: usize, dt: f64, t_final: f64) -> Result<Self> {
        let n_steps = (t_final / dt - 1e-9).ceil().max(0.0) as usize;
        let dt = if n_steps > 0 { t_final / n_steps as f64 } else { dt };
        Self::new(half_width, n_cells, dt, n_steps)
    }

    pub fn h(&self) -> f64 {
        2.0 * self.half_width / self.n_cells as f64
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.h()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// Largest stable explicit step for a diffusivity bounded by `sup_alpha`.
    pub fn cfl_dt(&self, sup_alpha: f64) -> f64 {
        self.h().powi(2) / (2.0 * sup_alpha)
    }

    /// Whether an explicit scheme with this `dt` is stable.
    pub fn satisfies_cfl(&self, sup_alpha: f64) -> bool {
        self.dt <= self.cfl_dt(sup_alpha)
    }
}

/// Cell averages of a density on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells {
            return Err(Error::Dimension {
                expected: grid.n_cells,
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn uniform(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_cells],
        }
    }

    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    pub fn mass(&self) -> f64 {
        self.h() * self.values.iter().sum::<f64>()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn l2_sq(&self) -> f64 {
        self.h() * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn l1_dist(&self, other: &DensityField) -> f64 {
        self.h() * self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn l2_dist(&self, other: &DensityField) -> f64 {
        (self.h() * self.values.iter().zip(&other.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sqrt()
    }

    pub fn linf_dist(&self, other: &DensityField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// L1 distance to a density function sampled at cell centres.
    pub fn l1_error_vs(&self, exact: impl Fn(f64) -> f64) -> f64 {
        let g = self.grid;
        self.h() * self.values.iter().enumerate().map(|(i, v)| (v - exact(g.center(i))).abs()).sum::<f64>()
    }

    /// Central-difference gradient with mirrored (zero-flux) ghost cells.
    pub fn gradient(&self) -> Vec<f64> {
        central_gradient(&self.values, self.h())
    }

    /// Linear interpolation between cell centres; constant beyond the end
    /// centres, zero outside `[-L, L]`.
    pub fn interpolate(&self, x: f64) -> f64 {
        interpolate_cells(&self.values, self.grid.half_width, self.h(), x)
    }
}

pub(crate) fn central_gradient(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let left = values[i.saturating_sub(1)];
            let right = values[(i + 1).min(n - 1)];
            (right - left) / (2.0 * h)
        })
        .collect()
}

pub(crate) fn interpolate_cells(values: &[f64], half_width: f64, h: f64, x: f64) -> f64 {
    if !(x >= -half_width && x <= half_width) {
        return 0.0;
    }
    let n = values.len();
    let s = (x + half_width) / h - 0.5;
    if s <= 0.0 {
        return values[0];
    }
    let i = s.floor() as usize;
    if i + 1 >= n {
        return values[n - 1];
    }
    let w = s - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

/// A trajectory `t -> u(t)` on the grid's time lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathField {
    pub grid: GridSpec,
    /// Time between consecutive snapshots.
    pub dt: f64,
    pub snapshots: Vec<Vec<f64>>,
}

impl PathField {
    pub fn new(grid: GridSpec, dt: f64, snapshots: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = snapshots.iter().find(|s| s.len() != grid.n_cells) {
            return Err(Error::Dimension {
                expected: grid.n_cells,
                got: bad.len(),
            });
        }
        Ok(Self { grid, dt, snapshots })
    }

    /// `u0` repeated on every time level of `grid`.
    pub fn constant_in_time(u0: &DensityField) -> Self {
        Self {
            grid: u0.grid,
            dt: u0.grid.dt,
            snapshots: vec![u0.values.clone(); u0.grid.n_steps + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn snapshot(&self, k: usize) -> DensityField {
        DensityField {
            grid: self.grid,
            values: self.snapshots[k].clone(),
        }
    }

    pub fn last(&self) -> DensityField {
        self.snapshot(self.len() - 1)
    }

    pub fn sup_norm(&self) -> f64 {
        self.snapshots.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn max_value(&self) -> f64 {
        self.snapshots.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.snapshots.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// `L^2((0,T) x grid)` norm, trapezoid rule in time.
    pub fn l2_norm(&self) -> f64 {
        path_l2(self.grid.h(), self.dt, self.snapshots.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>()))
    }

    /// `L^2((0,T) x grid)` distance to a trajectory on the same lattice.
    pub fn l2_dist(&self, other: &PathField) -> f64 {
        path_l2(
            self.grid.h(),
            self.dt,
            self.snapshots
                .iter()
                .zip(&other.snapshots)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()),
        )
    }

    /// Every `stride`-th snapshot (always including the last).
    pub fn strided(&self, stride: usize) -> PathField {
        let stride = stride.max(1);
        let mut idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        if *idx.last().unwrap() != self.len() - 1 {
            idx.push(self.len() - 1);
        }
        PathField {
            grid: self.grid,
            dt: self.dt * stride as f64,
            snapshots: idx.into_iter().map(|k| self.snapshots[k].clone()).collect(),
        }
    }
}

fn path_l2(h: f64, dt: f64, sums: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = sums.len();
    let total: f64 = sums
        .enumerate()
        .map(|(k, s)| if k == 0 || k + 1 == n { 0.5 * s } else { s })
        .sum();
    if n == 1 {
        return (h * total * 2.0 * dt).sqrt();
    }
    (h * dt * total).max(0.0).sqrt()
}

/// Initial densities on the line, usable both as PDE data and as particle
/// samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDensity {
    Gaussian { mean: f64, std: f64 },
    Uniform { a: f64, b: f64 },
    Triangle { center: f64, half_width: f64 },
    /// Equal mixture of `N(-sep, std^2)` and `N(sep, std^2)`.
    Bimodal { sep: f64, std: f64 },
    /// Unit-mass Barenblatt profile of `du/dt = 1/2 (u^m)''` at time `t0`.
    Barenblatt { m: f64, t0: f64 },
    /// Piecewise-linear table of `(x, u)` pairs, zero outside.
    Table { xs: Vec<f64>, us: Vec<f64> },
}

const SQRT_2PI: f64 = 2.506_628_274_631_000_2;

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * SQRT_2PI)
}

fn normal_tail_outside(lo: f64, hi: f64, mean: f64, std: f64) -> f64 {
    let s = std * std::f64::consts::SQRT_2;
    0.5 * erfc((hi - mean) / s) + 0.5 * erfc((mean - lo) / s)
}

impl InitialDensity {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        Self::Gaussian { mean, std }
    }

    pub fn table_csv(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        let (mut xs, mut us) = (Vec::new(), Vec::new());
        for rec in reader.records() {
            let rec = rec?;
            let (Some(a), Some(b)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::Config(format!("{}: rows need two columns", path.display())));
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(u)) => {
                    xs.push(x);
                    us.push(u);
                }
                _ if xs.is_empty() => continue,
                _ => return Err(Error::Config(format!("{}: unparsable row {a},{b}", path.display()))),
            }
        }
        if xs.len() < 2 || xs.windows(2).any(|w| !(w[1] > w[0])) || us.iter().any(|&u| u < 0.0) {
            return Err(Error::Config("density table needs >= 2 increasing x rows and u >= 0".into()));
        }
        Ok(Self::Table { xs, us })
    }

    /// Barenblatt half-width of the support and the normalising constant.
    fn barenblatt_params(m: f64, t0: f64) -> (f64, f64, f64) {
        // U(s, x) = s^-k (C - kap x^2 s^-2k)_+^(1/(m-1)) solves U_s = (U^m)'' with
        // k = 1/(m+1), kap = k (m-1) / (2m); here s = t0 / 2.
        let k = 1.0 / (m + 1.0);
        let kap = k * (m - 1.0) / (2.0 * m);
        let s = 0.5 * t0;
        // Mass of the C = 1 profile, by quadrature over its support.
        let half = (1.0 / kap).sqrt() * s.powf(k);
        let profile = |x: f64| s.powf(-k) * (1.0 - kap * x * x * s.powf(-2.0 * k)).max(0.0).powf(1.0 / (m - 1.0));
        let mass1 = crate::coefficients::adaptive_simpson(profile, -half, half, 1e-12);
        // Scaling C -> C changes mass by C^(1/(m-1) + 1/2).
        let c = mass1.powf(-1.0 / (1.0 / (m - 1.0) + 0.5));
        (c, kap, k)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Self::Gaussian { mean, std } => normal_pdf(x, *mean, *std),
            Self::Uniform { a, b } => {
                if x >= *a && x <= *b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            Self::Triangle { center, half_width } => ((half_width - (x - center).abs()) / (half_width * half_width)).max(0.0),
            Self::Bimodal { sep, std } => 0.5 * (normal_pdf(x, -sep, *std) + normal_pdf(x, *sep, *std)),
            Self::Barenblatt { m, t0 } => {
                let (c, kap, k) = Self::barenblatt_params(*m, *t0);
                let s = 0.5 * t0;
                s.powf(-k) * (c - kap * x * x * s.powf(-2.0 * k)).max(0.0).powf(1.0 / (m - 1.0))
            }
            Self::Table { xs, us } => {
                if x < xs[0] || x > xs[xs.len() - 1] {
                    return 0.0;
                }
                let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1) - 1;
                let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
                (1.0 - w) * us[i] + w * us[i + 1]
            }
        }
    }

    /// Support bounds (possibly infinite).
    pub fn support(&self) -> (f64, f64) {
        match self {
            Self::Gaussian { .. } | Self::Bimodal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Uniform { a, b } => (*a, *b),
            Self::Triangle { center, half_width } => (center - half_width, center + half_width),
            Self::Barenblatt { m, t0 } => {
                let (c, kap, k) = Self::barenblatt_params(*m, *t0);
                let half = (c / kap).sqrt() * (0.5 * t0).powf(k);
                (-half, half)
            }
            Self::Table { xs, .. } => (xs[0], xs[xs.len() - 1]),
        }
    }

    /// Probability mass outside `[lo, hi]` (relative to the total mass).
    pub fn mass_outside(&self, lo: f64, hi: f64) -> f64 {
        match self {
            Self::Gaussian { mean, std } => normal_tail_outside(lo, hi, *mean, *std),
            Self::Bimodal { sep, std } => 0.5 * (normal_tail_outside(lo, hi, -sep, *std) + normal_tail_outside(lo, hi, *sep, *std)),
            _ => {
                let (a, b) = self.support();
                if a >= lo && b <= hi {
                    return 0.0;
                }
                let total = crate::coefficients::adaptive_simpson(|x| self.pdf(x), a, b, 1e-10);
                let inside = crate::coefficients::adaptive_simpson(|x| self.pdf(x), a.max(lo), b.min(hi).max(a.max(lo)), 1e-10);
                ((total - inside) / total).max(0.0)
            }
        }
    }

    /// Upper bound of the density (used for rejection sampling).
    pub fn sup(&self) -> f64 {
        match self {
            Self::Gaussian { std, .. } => 1.0 / (std * SQRT_2PI),
            Self::Bimodal { sep, .. } => self.pdf(*sep).max(self.pdf(0.0)).max(self.pdf(-*sep)) * 1.0001,
            Self::Table { us, .. } => us.iter().copied().fold(0.0, f64::max),
            Self::Uniform { a, b } => 1.0 / (b - a),
            Self::Triangle { half_width, .. } => 1.0 / half_width,
            Self::Barenblatt { .. } => self.pdf(0.0),
        }
    }

    /// One draw from the density.
    pub fn sample(&self, rng: &mut impl RngCore) -> f64 {
        match self {
            Self::Gaussian { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            Self::Bimodal { sep, std } => {
                let z: f64 = StandardNormal.sample(rng);
                let sign = if uniform(rng) <= 0.5 { -1.0 } else { 1.0 };
                sign * sep + std * z
            }
            Self::Uniform { a, b } => a + (b - a) * uniform(rng),
            Self::Triangle { center, half_width } => center + half_width * (uniform(rng) - uniform(rng)),
            Self::Barenblatt { .. } | Self::Table { .. } => {
                let (a, b) = self.support();
                let top = self.sup();
                loop {
                    let x = a + (b - a) * uniform(rng);
                    if uniform(rng) * top <= self.pdf(x) {
                        return x;
                    }
                }
            }
        }
    }
}

/// Projects `u0` onto the grid by midpoint quadrature and renormalises to unit
/// mass. Fails when more than `mass_tol` of the mass lies within five cells of
/// the boundary or beyond.
pub fn project_initial(u0: &InitialDensity, grid: &GridSpec, mass_tol: f64) -> Result<DensityField> {
    let h = grid.h();
    let lo = -grid.half_width + 5.0 * h;
    let hi = grid.half_width - 5.0 * h;
    let tail_mass = u0.mass_outside(lo, hi);
    if tail_mass > mass_tol {
        return Err(Error::Truncation {
            tail_mass,
            limit: mass_tol,
        });
    }
    let mut values: Vec<f64> = grid.centers().iter().map(|&x| u0.pdf(x)).collect();
    normalise(&mut values, h)?;
    DensityField::new(*grid, values)
}

/// Histogram projection of a sample list, renormalised to unit mass.
pub fn project_samples(samples: &[f64], grid: &GridSpec, mass_tol: f64) -> Result<DensityField> {
    let h = grid.h();
    let lo = -grid.half_width + 5.0 * h;
    let hi = grid.half_width - 5.0 * h;
    let outside = samples.iter().filter(|&&x| x < lo || x > hi).count() as f64 / samples.len().max(1) as f64;
    if outside > mass_tol {
        return Err(Error::Truncation {
            tail_mass: outside,
            limit: mass_tol,
        });
    }
    let mut values = vec![0.0; grid.n_cells];
    for &x in samples {
        let i = (((x + grid.half_width) / h).floor() as isize).clamp(0, grid.n_cells as isize - 1) as usize;
        values[i] += 1.0;
    }
    normalise(&mut values, h)?;
    DensityField::new(*grid, values)
}

fn normalise(values: &mut [f64], h: f64) -> Result<()> {
    let mass = h * values.iter().sum::<f64>();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Domain {
            what: "projected mass",
            value: mass,
            domain: "(0, inf)".into(),
        });
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(1.0, 8, 0.1, 1).is_err());
        assert!(GridSpec::new(-1.0, 32, 0.1, 1).is_err());
        assert!(GridSpec::new(1.0, 32, 0.0, 1).is_err());
        let g = GridSpec::with_horizon(8.0, 512, 1e-3, 0.5).unwrap();
        assert_eq!(g.n_steps, 500);
        assert_abs_diff_eq!(g.t_final(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.h(), 1.0 / 32.0);
    }

    #[test]
    fn cfl_condition() {
        let g = GridSpec::new(1.0, 100, 1e-4, 10).unwrap();
        // h = 0.02, h^2/2 = 2e-4
        assert!(g.satisfies_cfl(1.0));
        assert!(!g.satisfies_cfl(3.0));
    }

    #[test]
    fn projecting_standard_normal() {
        let g = GridSpec::new(8.0, 512, 1e-3, 1).unwrap();
        let u = project_initial(&InitialDensity::gaussian(0.0, 1.0), &g, MASS_TOL).unwrap();
        assert_abs_diff_eq!(u.mass(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(u.max(), 1.0 / SQRT_2PI, epsilon = 1e-3);
    }

    #[test]
    fn projecting_uniform() {
        let g = GridSpec::new(4.0, 512, 1e-3, 1).unwrap();
        let u = project_initial(&InitialDensity::Uniform { a: -1.0, b: 1.0 }, &g, MASS_TOL).unwrap();
        let inside: Vec<f64> = u.values.iter().copied().filter(|&v| v > 0.0).collect();
        assert_eq!(inside.len(), 128);
        assert!(inside.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn truncation_detected() {
        let g = GridSpec::new(2.0, 256, 1e-3, 1).unwrap();
        let err = project_initial(&InitialDensity::gaussian(0.0, 1.0), &g, MASS_TOL).unwrap_err();
        match err {
            Error::Truncation { tail_mass, .. } => assert!(tail_mass > 0.045),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn barenblatt_has_unit_mass_and_compact_support() {
        let b = InitialDensity::Barenblatt { m: 2.0, t0: 0.1 };
        let (lo, hi) = b.support();
        let mass = crate::coefficients::adaptive_simpson(|x| b.pdf(x), lo, hi, 1e-12);
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-8);
        assert_eq!(b.pdf(hi + 1e-6), 0.0);
        assert_eq!(b.mass_outside(lo - 0.1, hi + 0.1), 0.0);
    }

    #[test]
    fn samples_follow_density() {
        let mut rng = crate::rng::stream_rng(3, 0, crate::rng::Channel::Init);
        for d in [
            InitialDensity::Triangle { center: 0.5, half_width: 1.0 },
            InitialDensity::Bimodal { sep: 1.0, std: 0.3 },
            InitialDensity::Barenblatt { m: 2.0, t0: 0.2 },
        ] {
            let xs: Vec<f64> = (0..40_000).map(|_| d.sample(&mut rng)).collect();
            let (lo, hi) = d.support();
            let (lo, hi) = (lo.max(-6.0), hi.min(6.0));
            let mean_exact = crate::coefficients::adaptive_simpson(|x| x * d.pdf(x), lo, hi, 1e-10);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((mean - mean_exact).abs() < 0.03, "{d:?}: {mean} vs {mean_exact}");
        }
    }

    #[test]
    fn path_norms() {
        let g = GridSpec::new(1.0, 16, 0.5, 2).unwrap();
        let a = PathField::new(g, 0.5, vec![vec![1.0; 16]; 3]).unwrap();
        let z = PathField::new(g, 0.5, vec![vec![0.0; 16]; 3]).unwrap();
        // |1|^2 integrated over (0,1) x (-1,1) = 2
        assert_abs_diff_eq!(a.l2_dist(&z), 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.l2_norm(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn interpolation_between_centres() {
        let g = GridSpec::new(1.0, 16, 0.1, 1).unwrap();
        let vals: Vec<f64> = g.centers().iter().map(|x| 2.0 * x + 1.0).collect();
        let u = DensityField::new(g, vals).unwrap();
        assert_abs_diff_eq!(u.interpolate(0.3), 1.6, epsilon = 1e-12);
        assert_eq!(u.interpolate(1.5), 0.0);
    }
}
