//! Particle realisation of the conditional McKean system
//!
//! ```text
//! dX = b(X, Y) dt + sigma(X) dB
//! dY = E[l(Y) | X] dt + E[g(Y) | X] dW
//! ```
//!
//! in dimension `d` in {1, 2}, with the conditional expectations replaced by
//! kernel (or binned) regression over the current ensemble.
//!
//! Two engines are provided. The P-run simulates the system as written. The
//! Q-run removes the drift from `X` (so `dX = sigma(X) dB^`) and carries the
//! Girsanov density `Z = dQ/dP`,
//! `log Z_t = -int theta . dB^ + 1/2 int |theta|^2 dt`, `theta = sigma^-1 b`;
//! conditional expectations under P are then recovered as
//! `E_Q[Z^-1 m(Y) | X] / E_Q[Z^-1 | X]`, i.e. weighted regression with
//! weights `Z^-1` (the Q-martingale).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{binned_conditional, bootstrap_se, FixedDesign, GridSmoother, KernelShape, MollifierSpec, DENOM_FLOOR};
use crate::grid::InitialDensity;
use crate::report::{Check, VerificationReport};
use crate::rng::{next_normals, stream_rng, uniform, Channel, ParticleStreams};

/// Relative slack for rounding in the bound-transfer counters.
const BOUND_ROUNDING: f64 = 1e-12;
/// Largest `|log Z|` before a run is aborted.
pub const LOG_Z_LIMIT: f64 = 700.0;
/// Condition-number ceiling for `sigma(x)`.
pub const COND_LIMIT: f64 = 1e8;

/// Drift `b(x, y)`, componentwise unless noted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftField {
    Zero,
    Constant { value: f64 },
    /// `scale tanh(y_k)`.
    TanhY { scale: f64 },
    /// `scale tanh(x_k + y_k)`.
    TanhXY { scale: f64 },
    /// `scale sin(x_k)` (depends on x only).
    SinX { scale: f64 },
    /// `clamp(a y_k + c x_k, -clip, clip)`.
    AffineClamped { a: f64, c: f64, clip: f64 },
    /// `b = y` with degenerate X-noise: runnable, outside the theory.
    Kinetic,
}

impl DriftField {
    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for k in 0..out.len() {
            out[k] = match *self {
                Self::Zero => 0.0,
                Self::Constant { value } => value,
                Self::TanhY { scale } => scale * y[k].tanh(),
                Self::TanhXY { scale } => scale * (x[k] + y[k]).tanh(),
                Self::SinX { scale } => scale * x[k].sin(),
                Self::AffineClamped { a, c, clip } => (a * y[k] + c * x[k]).clamp(-clip, clip),
                Self::Kinetic => y[k],
            };
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero) || matches!(self, Self::Constant { value } if *value == 0.0)
    }

    pub fn depends_on_y(&self) -> bool {
        matches!(self, Self::TanhY { .. } | Self::TanhXY { .. } | Self::AffineClamped { .. } | Self::Kinetic)
    }

    /// Euclidean sup norm of `b` in dimension `d`.
    pub fn sup_norm(&self, d: usize) -> f64 {
        let comp = match *self {
            Self::Zero => 0.0,
            Self::Constant { value } => value.abs(),
            Self::TanhY { scale } | Self::TanhXY { scale } | Self::SinX { scale } => scale.abs(),
            Self::AffineClamped { clip, .. } => clip.abs(),
            Self::Kinetic => f64::INFINITY,
        };
        comp * (d as f64).sqrt()
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::Zero | Self::Constant { .. } => 0.0,
            Self::TanhY { scale } | Self::SinX { scale } => scale.abs(),
            Self::TanhXY { scale } => scale.abs() * 2f64.sqrt(),
            Self::AffineClamped { a, c, .. } => a.hypot(c),
            Self::Kinetic => 1.0,
        }
    }
}

/// Diffusion matrix `sigma(x)`, `d x d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaField {
    /// `s0 I`.
    ScaledIdentity { s0: f64 },
    /// `(s0 + amp tanh(x_1)) I`.
    Modulated { s0: f64, amp: f64 },
    /// `[[s0, skew], [-skew, s0]]` in d = 2 (`s0` in d = 1).
    Rotated { s0: f64, skew: f64 },
}

impl SigmaField {
    /// Writes `sigma(x)` row-major into `out[..d*d]`.
    pub fn eval(&self, x: &[f64], out: &mut [f64; 4]) {
        let d = x.len();
        *out = [0.0; 4];
        match *self {
            Self::ScaledIdentity { s0 } => diag(out, d, s0),
            Self::Modulated { s0, amp } => diag(out, d, s0 + amp * x[0].tanh()),
            Self::Rotated { s0, skew } => {
                if d == 1 {
                    out[0] = s0;
                } else {
                    *out = [s0, skew, -skew, s0];
                }
            }
        }
    }

    /// Declared ellipticity constant `a*` with `xi . sigma xi >= a* |xi|^2`.
    pub fn ellipticity(&self) -> f64 {
        match *self {
            Self::ScaledIdentity { s0 } | Self::Rotated { s0, .. } => s0,
            Self::Modulated { s0, amp } => s0 - amp.abs(),
        }
    }

    /// Upper bound on `||sigma(x)^-1||` (operator norm).
    pub fn inverse_norm_bound(&self) -> f64 {
        match *self {
            Self::ScaledIdentity { s0 } => 1.0 / s0.abs(),
            Self::Modulated { s0, amp } => 1.0 / (s0.abs() - amp.abs()),
            Self::Rotated { s0, skew } => 1.0 / s0.hypot(skew),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::ScaledIdentity { .. } | Self::Rotated { .. } => 0.0,
            Self::Modulated { amp, .. } => amp.abs(),
        }
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self, Self::Modulated { amp, .. } if *amp != 0.0)
    }
}

fn diag(out: &mut [f64; 4], d: usize, v: f64) {
    if d == 1 {
        out[0] = v;
    } else {
        out[0] = v;
        out[3] = v;
    }
}

/// Inverse of a `d x d` matrix (d <= 2) with a condition-number guard.
pub fn invert_small(m: &[f64; 4], d: usize) -> Result<[f64; 4]> {
    if d == 1 {
        if m[0] == 0.0 || !m[0].is_finite() {
            return Err(Error::IllConditioned { cond: f64::INFINITY });
        }
        return Ok([1.0 / m[0], 0.0, 0.0, 0.0]);
    }
    let (a, b, c, e) = (m[0], m[1], m[2], m[3]);
    let det = a * e - b * c;
    // singular values of a 2x2: s1 s2 = |det|, s1^2 + s2^2 = ||m||_F^2
    let fro2 = a * a + b * b + c * c + e * e;
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
    let s_max = (0.5 * (fro2 + disc)).sqrt();
    let s_min = if s_max > 0.0 { det.abs() / s_max } else { 0.0 };
    let cond = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if !(cond <= COND_LIMIT) {
        return Err(Error::IllConditioned { cond });
    }
    Ok([e / det, -b / det, -c / det, a / det])
}

fn mat_vec(m: &[f64; 4], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        out[i] = (0..d).map(|j| m[i * d + j] * v[j]).sum();
    }
}

/// Kernel `l(y)`, componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EllField {
    Constant { value: f64 },
    /// `scale tanh(y_k)`.
    Tanh { scale: f64 },
    /// `scale sin(y_k)`.
    Sin { scale: f64 },
    /// `clamp(a y_k + c, -clip, clip)`.
    AffineClamped { a: f64, c: f64, clip: f64 },
}

impl EllField {
    pub fn eval(&self, y: &[f64], out: &mut [f64]) {
        for k in 0..y.len() {
            out[k] = match *self {
                Self::Constant { value } => value,
                Self::Tanh { scale } => scale * y[k].tanh(),
                Self::Sin { scale } => scale * y[k].sin(),
                Self::AffineClamped { a, c, clip } => (a * y[k] + c).clamp(-clip, clip),
            };
        }
    }

    /// Largest component magnitude.
    pub fn sup(&self) -> f64 {
        match *self {
            Self::Constant { value } => value.abs(),
            Self::Tanh { scale } | Self::Sin { scale } => scale.abs(),
            Self::AffineClamped { a, c, clip } => {
                if a == 0.0 {
                    c.abs().min(clip.abs())
                } else {
                    clip.abs()
                }
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Tanh { scale } | Self::Sin { scale } => scale.abs(),
            Self::AffineClamped { a, .. } => a.abs(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. }) || matches!(self, Self::AffineClamped { a, .. } if *a == 0.0)
    }
}

/// Kernel `g(y)`, a multiple of the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaField {
    /// `g0 I`.
    ScaledIdentity { g0: f64 },
    /// `(g0 + amp tanh(y_1)) I`.
    Modulated { g0: f64, amp: f64 },
}

impl GammaField {
    /// Writes `g(y)` row-major into `out[..d*d]`.
    pub fn eval(&self, y: &[f64], out: &mut [f64]) {
        let d = y.len();
        let v = match *self {
            Self::ScaledIdentity { g0 } => g0,
            Self::Modulated { g0, amp } => g0 + amp * y[0].tanh(),
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..d {
            out[k * d + k] = v;
        }
    }

    /// Largest entry magnitude.
    pub fn sup(&self) -> f64 {
        match *self {
            Self::ScaledIdentity { g0 } => g0.abs(),
            Self::Modulated { g0, amp } => g0.abs() + amp.abs(),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::ScaledIdentity { .. } => 0.0,
            Self::Modulated { amp, .. } => amp.abs(),
        }
    }

    /// `alpha*` with `xi . g g^T xi >= alpha* |xi|^2`.
    pub fn ellipticity(&self) -> f64 {
        match *self {
            Self::ScaledIdentity { g0 } => g0 * g0,
            Self::Modulated { g0, amp } => (g0.abs() - amp.abs()).max(0.0).powi(2),
        }
    }

    pub fn is_constant(&self) -> bool {
        !matches!(self, Self::Modulated { amp, .. } if *amp != 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub dim: usize,
    pub b: DriftField,
    pub sigma: SigmaField,
    pub ell: EllField,
    pub gamma: GammaField,
}

impl CoefficientSet {
    /// `sup |sigma^-1 b|` (Euclidean) from the declared bounds.
    pub fn theta_sup(&self) -> f64 {
        if self.b.is_zero() {
            return 0.0;
        }
        self.b.sup_norm(self.dim) * self.sigma.inverse_norm_bound()
    }

    /// Picard weight `c = 4 (L_l^2 + L_g^2)`: twice the contraction threshold.
    pub fn default_picard_rate(&self) -> f64 {
        4.0 * (self.ell.lipschitz().powi(2) + self.gamma.lipschitz().powi(2))
    }

    /// `theta = sigma(x)^-1 b(x, y)`.
    pub fn theta(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let mut bv = [0.0; 2];
        self.b.eval(x, y, &mut bv[..d]);
        let mut s = [0.0; 4];
        self.sigma.eval(x, &mut s);
        let inv = invert_small(&s, d)?;
        mat_vec(&inv, &bv[..d], out);
        Ok(())
    }

    /// Random spot-checks of the ellipticity of `sigma` and `g g^T` against
    /// the declared constants, plus finite-difference Lipschitz estimates.
    pub fn spot_check(&self, n_samples: usize, seed: u64) -> VerificationReport {
        let d = self.dim;
        let mut rng = stream_rng(seed, 0, Channel::Aux);
        let mut sigma_ratio = f64::INFINITY;
        let mut gamma_ratio = f64::INFINITY;
        let mut lip_ell: f64 = 0.0;
        let mut lip_gamma: f64 = 0.0;
        for _ in 0..n_samples {
            let mut draw = || 10.0 * (uniform(&mut rng) - 0.5);
            let x = [draw(), draw()];
            let y = [draw(), draw()];
            let xi = [draw(), draw()];
            let y2 = [y[0] + 1e-4 * draw(), y[1] + 1e-4 * draw()];
            let xi_sq: f64 = xi[..d].iter().map(|v| v * v).sum();
            let mut s = [0.0; 4];
            self.sigma.eval(&x[..d], &mut s);
            let mut sxi = [0.0; 2];
            mat_vec(&s, &xi[..d], &mut sxi[..d]);
            let q: f64 = (0..d).map(|k| xi[k] * sxi[k]).sum();
            sigma_ratio = sigma_ratio.min(q / xi_sq);
            let mut g = [0.0; 4];
            self.gamma.eval(&y[..d], &mut g[..d * d]);
            let mut gtxi = [0.0; 2];
            for j in 0..d {
                gtxi[j] = (0..d).map(|i| g[i * d + j] * xi[i]).sum();
            }
            let q: f64 = gtxi[..d].iter().map(|v| v * v).sum();
            gamma_ratio = gamma_ratio.min(q / xi_sq);

            let dy: f64 = (0..d).map(|k| (y2[k] - y[k]).powi(2)).sum::<f64>().sqrt();
            if dy > 0.0 {
                let (mut l1, mut l2) = ([0.0; 2], [0.0; 2]);
                self.ell.eval(&y[..d], &mut l1[..d]);
                self.ell.eval(&y2[..d], &mut l2[..d]);
                let dl: f64 = (0..d).map(|k| (l1[k] - l2[k]).powi(2)).sum::<f64>().sqrt();
                lip_ell = lip_ell.max(dl / dy);
                let mut g2 = [0.0; 4];
                self.gamma.eval(&y2[..d], &mut g2[..d * d]);
                // g is a multiple of the identity: operator norm = |diagonal gap|
                let dg = (g[0] - g2[0]).abs();
                lip_gamma = lip_gamma.max(dg / dy);
            }
        }
        let mut rep = VerificationReport::new("coefficient_spot_checks");
        let a_star = self.sigma.ellipticity();
        let alpha_star = self.gamma.ellipticity();
        rep.push(Check::one_sided("sigma_ellipticity", a_star, sigma_ratio, 1e-12, "plumbing"));
        rep.push(Check::one_sided("declared_sigma_ellipticity_positive", -a_star, -1e-12, 0.0, "plumbing"));
        rep.push(Check::one_sided("gamma_ellipticity", alpha_star, gamma_ratio, 1e-12, "plumbing"));
        rep.push(Check::one_sided("ell_lipschitz", lip_ell, self.ell.lipschitz(), 1e-3, "plumbing"));
        rep.push(Check::one_sided("gamma_lipschitz", lip_gamma, self.gamma.lipschitz(), 1e-3, "plumbing"));
        rep.diag("min_sigma_quadratic_ratio", sigma_ratio)
            .diag("min_gamma_quadratic_ratio", gamma_ratio)
            .diag("fd_lipschitz_ell", lip_ell)
            .diag("fd_lipschitz_gamma", lip_gamma);
        rep
    }
}

/// Initial law: `X0 ~ x_law` per coordinate, `Y0 = coupling X0 + eta` with
/// `eta ~ y_law` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLaw {
    pub x: InitialDensity,
    pub y: InitialDensity,
    #[serde(default)]
    pub coupling: f64,
}

impl InitialLaw {
    pub fn standard() -> Self {
        Self {
            x: InitialDensity::gaussian(0.0, 1.0),
            y: InitialDensity::gaussian(0.0, 1.0),
            coupling: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Kernel regression on a binned lattice ([`GridSmoother`]).
    Kernel { shape: KernelShape, bandwidth: Option<f64> },
    /// Piecewise-constant regression over equal bins of `[-range, range]`.
    Binned { n_bins: usize, range: f64 },
}

impl Default for EstimatorKind {
    fn default() -> Self {
        Self::Kernel {
            shape: KernelShape::Gaussian,
            bandwidth: None,
        }
    }
}

/// `1.06 N^(-1/5)` (unit-scale data) for d = 1, `N^(-1/6)` for d = 2.
pub fn default_bandwidth(n: usize, d: usize) -> f64 {
    1.06 * (n as f64).powf(-1.0 / (d as f64 + 4.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionalConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    pub estimator: EstimatorKind,
    /// Record states every this many steps (and at the end).
    pub record_stride: usize,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            dt: 0.01,
            t_final: 0.5,
            seed: 0,
            estimator: EstimatorKind::default(),
            record_stride: 10,
        }
    }
}

impl ConditionalConfig {
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn step(&self) -> f64 {
        let n = self.n_steps();
        if n > 0 {
            self.t_final / n as f64
        } else {
            self.dt
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Drift kept in `X`.
    P,
    /// Drift removed from `X`, Girsanov density tracked.
    Q,
}

/// States of the coupled ensemble at one recorded time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledSnapshot {
    pub time: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `log Z` per particle (`Z = dQ/dP`; zero when `b = 0`).
    pub log_z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundCounters {
    /// Estimated `l`-values checked against `||l||_inf`.
    pub lambda_checked: u64,
    pub lambda_violations: u64,
    /// Estimated `g`-entries checked against `||g||_inf`.
    pub gamma_checked: u64,
    pub gamma_violations: u64,
    /// Queries with a vanishing denominator.
    pub degenerate: u64,
}

impl BoundCounters {
    pub fn add(&mut self, o: &BoundCounters) {
        self.lambda_checked += o.lambda_checked;
        self.lambda_violations += o.lambda_violations;
        self.gamma_checked += o.gamma_checked;
        self.gamma_violations += o.gamma_violations;
        self.degenerate += o.degenerate;
    }
}

#[derive(Debug, Clone)]
pub struct ConditionalRun {
    pub measure: Measure,
    pub coeffs: CoefficientSet,
    pub config: ConditionalConfig,
    pub snapshots: Vec<CoupledSnapshot>,
    pub counters: BoundCounters,
    pub bandwidth: Option<f64>,
}

impl ConditionalRun {
    pub fn last(&self) -> &CoupledSnapshot {
        self.snapshots.last().expect("runs record at least t = 0")
    }
}

/// Conditional-expectation estimator rebuilt from an ensemble snapshot.
enum StepEstimator {
    Kernel(GridSmoother),
    Binned { est: crate::estimators::ConditionalEstimate, range: (f64, f64) },
    /// `l` and `g` both constant: estimates are the constants.
    Exact,
}

/// Fills `m` with `[l(Y_i), vec g(Y_i)]` per particle.
fn regressands(coeffs: &CoefficientSet, y: &[f64]) -> Vec<f64> {
    let d = coeffs.dim;
    let k = d + d * d;
    let mut m = vec![0.0; (y.len() / d) * k];
    m.par_chunks_mut(k).zip(y.par_chunks(d)).for_each(|(mi, yi)| {
        coeffs.ell.eval(yi, &mut mi[..d]);
        coeffs.gamma.eval(yi, &mut mi[d..]);
    });
    m
}

fn build_estimator(coeffs: &CoefficientSet, kind: &EstimatorKind, bandwidth: Option<f64>, x: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<StepEstimator> {
    if coeffs.ell.is_constant() && coeffs.gamma.is_constant() {
        return Ok(StepEstimator::Exact);
    }
    let d = coeffs.dim;
    let m = regressands(coeffs, y);
    match *kind {
        EstimatorKind::Kernel { shape, .. } => {
            let spec = MollifierSpec {
                shape,
                bandwidth: bandwidth.expect("kernel estimators carry a bandwidth"),
                dim: d,
            };
            Ok(StepEstimator::Kernel(GridSmoother::build(x, &m, d + d * d, weights, &spec)?))
        }
        EstimatorKind::Binned { n_bins, range } => {
            if d != 1 {
                return Err(Error::Dimension { expected: 1, got: d });
            }
            let r = (-range, range);
            Ok(StepEstimator::Binned {
                est: binned_conditional(x, &m, 2, weights, n_bins, r)?,
                range: r,
            })
        }
    }
}

/// Writes `[Lambda^(x), vec Gamma^(x)]` into `out`; returns false when the
/// query is degenerate (output then 0, the indicator convention).
fn estimate_at(est: &StepEstimator, coeffs: &CoefficientSet, xq: &[f64], yq: &[f64], out: &mut [f64]) -> bool {
    let d = coeffs.dim;
    match est {
        StepEstimator::Exact => {
            coeffs.ell.eval(yq, &mut out[..d]);
            coeffs.gamma.eval(yq, &mut out[d..]);
            true
        }
        StepEstimator::Kernel(g) => g.conditional_at(xq, out).is_some(),
        StepEstimator::Binned { est, range } => {
            let width = (range.1 - range.0) / est.len() as f64;
            let b = (((xq[0] - range.0) / width).floor() as isize).clamp(0, est.len() as isize - 1) as usize;
            out.copy_from_slice(est.value(b));
            !(est.degenerate[b] && est.mass[b] < DENOM_FLOOR && est.mass.iter().all(|&m| m < DENOM_FLOOR))
        }
    }
}

fn count_bounds(coeffs: &CoefficientSet, est: &[f64], c: &mut BoundCounters) {
    count_bounds_with(coeffs.dim, bound_limits(coeffs), est, c)
}

fn bound_limits(coeffs: &CoefficientSet) -> (f64, f64) {
    (coeffs.ell.sup() * (1.0 + BOUND_ROUNDING), coeffs.gamma.sup() * (1.0 + BOUND_ROUNDING))
}

fn count_bounds_with(d: usize, (l_sup, g_sup): (f64, f64), est: &[f64], c: &mut BoundCounters) {
    for v in &est[..d] {
        c.lambda_checked += 1;
        if v.abs() > l_sup {
            c.lambda_violations += 1;
        }
    }
    for v in &est[d..] {
        c.gamma_checked += 1;
        if v.abs() > g_sup {
            c.gamma_violations += 1;
        }
    }
}

fn sample_initial(law: &InitialLaw, d: usize, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i, Channel::Init);
            let x: Vec<f64> = (0..d).map(|_| law.x.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..d).map(|k| law.coupling * x[k] + law.y.sample(&mut rng)).collect();
            (x, y)
        })
        .collect();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * d);
    for (x, y) in pairs {
        xs.extend(x);
        ys.extend(y);
    }
    (xs, ys)
}

/// Euler–Maruyama for the conditional system under P or Q.
pub fn simulate_conditional(coeffs: &CoefficientSet, law: &InitialLaw, cfg: &ConditionalConfig, measure: Measure) -> Result<ConditionalRun> {
    let d = coeffs.dim;
    if d == 0 || d > 2 {
        return Err(Error::Dimension { expected: 1, got: d });
    }
    let n = cfg.n_particles;
    if n < 100 {
        return Err(Error::Domain {
            what: "n_particles",
            value: n as f64,
            domain: "[100, inf)".into(),
        });
    }
    let n_steps = cfg.n_steps();
    let dt = cfg.step();
    let sqrt_dt = dt.sqrt();
    let stride = cfg.record_stride.max(1);
    let needs_theta = !coeffs.b.is_zero();
    let bandwidth = match cfg.estimator {
        EstimatorKind::Kernel { bandwidth, .. } => Some(bandwidth.unwrap_or_else(|| default_bandwidth(n, d))),
        EstimatorKind::Binned { .. } => None,
    };
    let k = d + d * d;

    let (mut x, mut y) = sample_initial(law, d, n, cfg.seed);
    let mut log_z = vec![0.0; n];
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut noise_b = ParticleStreams::new(cfg.seed, &ids, Channel::B, 0);
    let mut noise_w = ParticleStreams::new(cfg.seed, &ids, Channel::W, 0);
    let mut snapshots = vec![CoupledSnapshot {
        time: 0.0,
        x: x.clone(),
        y: y.clone(),
        log_z: log_z.clone(),
    }];
    let mut counters = BoundCounters::default();

    for step in 0..n_steps {
        let weights: Option<Vec<f64>> = (measure == Measure::Q && needs_theta).then(|| log_z.iter().map(|l| (-l).exp()).collect());
        let est = build_estimator(coeffs, &cfg.estimator, bandwidth, &x, &y, weights.as_deref())?;
        let est = &est;
        let step_counts: Vec<(BoundCounters, Option<f64>)> = x
            .par_chunks_mut(d)
            .zip(y.par_chunks_mut(d))
            .zip(log_z.par_iter_mut())
            .zip(noise_b.streams_mut().par_iter_mut().zip(noise_w.streams_mut().par_iter_mut()))
            .map(|(((xi, yi), lz), (rb, rw))| {
                let mut c = BoundCounters::default();
                let mut e = [0.0; 6];
                let ok = estimate_at(est, coeffs, xi, yi, &mut e[..k]);
                if !ok {
                    c.degenerate += 1;
                } else {
                    count_bounds(coeffs, &e[..k], &mut c);
                }
                let zb = next_normals(rb, d);
                let zw = next_normals(rw, d);
                let mut db = [0.0; 2];
                for j in 0..d {
                    db[j] = sqrt_dt * zb[j];
                }
                let mut theta = [0.0; 2];
                if needs_theta && coeffs.theta(xi, yi, &mut theta[..d]).is_err() {
                    return (c, Some(f64::NAN));
                }
                let theta_sq: f64 = theta[..d].iter().map(|t| t * t).sum();
                let theta_db: f64 = (0..d).map(|j| theta[j] * db[j]).sum();
                let mut s = [0.0; 4];
                coeffs.sigma.eval(xi, &mut s);
                let mut sdb = [0.0; 2];
                mat_vec(&s, &db[..d], &mut sdb[..d]);
                let mut bv = [0.0; 2];
                match measure {
                    Measure::P => {
                        coeffs.b.eval(xi, yi, &mut bv[..d]);
                        // Z = dQ/dP = exp(-int theta dB - 1/2 int |theta|^2)
                        *lz += -theta_db - 0.5 * theta_sq * dt;
                    }
                    Measure::Q => {
                        *lz += -theta_db + 0.5 * theta_sq * dt;
                    }
                }
                // Y-noise: Gamma^ dW
                let mut gdw = [0.0; 2];
                for i in 0..d {
                    gdw[i] = (0..d).map(|j| e[d + i * d + j] * sqrt_dt * zw[j]).sum();
                }
                for j in 0..d {
                    yi[j] += e[j] * dt + gdw[j];
                    xi[j] += bv[j] * dt + sdb[j];
                }
                let bad = (lz.abs() > LOG_Z_LIMIT || !lz.is_finite()).then_some(*lz);
                (c, bad)
            })
            .collect();
        for (i, (c, bad)) in step_counts.iter().enumerate() {
            counters.add(c);
            if let Some(lz) = bad {
                if lz.is_nan() {
                    return Err(Error::IllConditioned { cond: f64::INFINITY });
                }
                return Err(Error::Overflow {
                    particle: i,
                    step: step + 1,
                    log_z: *lz,
                });
            }
        }
        if (step + 1) % stride == 0 || step + 1 == n_steps {
            snapshots.push(CoupledSnapshot {
                time: (step + 1) as f64 * dt,
                x: x.clone(),
                y: y.clone(),
                log_z: log_z.clone(),
            });
        }
    }
    Ok(ConditionalRun {
        measure,
        coeffs: *coeffs,
        config: cfg.clone(),
        snapshots,
        counters,
        bandwidth,
    })
}

/// Engine estimates at one recorded time, on query points `(x, 0, ..)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub x: f64,
    /// `Lambda^(x)`, `d` entries.
    pub lambda: Vec<f64>,
    /// `Gamma^(x)`, row-major `d x d`.
    pub gamma: Vec<f64>,
    /// Kernel estimate of the X-density (weighted by `Z^-1` on Q-runs).
    pub rho_x: f64,
    pub degenerate: bool,
}

/// Rebuilds the engine's estimator from snapshot `k` and evaluates it on `xs`.
pub fn conditional_profile(run: &ConditionalRun, k: usize, xs: &[f64]) -> Result<Vec<ProfilePoint>> {
    let coeffs = &run.coeffs;
    let d = coeffs.dim;
    let snap = run.snapshots.get(k).ok_or_else(|| Error::Config(format!("no snapshot {k}")))?;
    let n = snap.x.len() / d;
    let weights: Option<Vec<f64>> = (run.measure == Measure::Q && !coeffs.b.is_zero()).then(|| snap.log_z.iter().map(|l| (-l).exp()).collect());
    let est = build_estimator(coeffs, &run.config.estimator, run.bandwidth, &snap.x, &snap.y, weights.as_deref())?;
    let spec = MollifierSpec::gaussian(run.bandwidth.unwrap_or_else(|| default_bandwidth(n, d)), d);
    let dens = GridSmoother::build(&snap.x, &[], 0, weights.as_deref(), &spec)?;
    let k_out = d + d * d;
    Ok(xs
        .iter()
        .map(|&x| {
            let mut q = [0.0; 2];
            q[0] = x;
            let mut e = [0.0; 6];
            let ok = estimate_at(&est, coeffs, &q[..d], &[0.0; 2][..d], &mut e[..k_out]);
            ProfilePoint {
                x,
                lambda: e[..d].to_vec(),
                gamma: e[d..k_out].to_vec(),
                rho_x: dens.density_at(&q[..d]),
                degenerate: !ok,
            }
        })
        .collect())
}

/// Recomputes `log Z` along a recorded Q-trajectory (every step recorded):
/// `dB^ = sigma(X)^-1 dX`, `log Z += -theta . dB^ + 1/2 |theta|^2 dt`.
/// Returns one `log Z` path per particle (rows: snapshots).
pub fn girsanov_weights(run: &ConditionalRun) -> Result<Vec<Vec<f64>>> {
    let coeffs = &run.coeffs;
    let d = coeffs.dim;
    let n = run.config.n_particles;
    let mut out = vec![vec![0.0; n]];
    for w in run.snapshots.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.time - a.time;
        let prev = out.last().unwrap().clone();
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &a.x[i * d..(i + 1) * d];
                let yi = &a.y[i * d..(i + 1) * d];
                let mut s = [0.0; 4];
                coeffs.sigma.eval(xi, &mut s);
                let inv = invert_small(&s, d)?;
                let mut dx = [0.0; 2];
                for j in 0..d {
                    dx[j] = b.x[i * d + j] - xi[j];
                }
                let mut db = [0.0; 2];
                mat_vec(&inv, &dx[..d], &mut db[..d]);
                let mut theta = [0.0; 2];
                if !coeffs.b.is_zero() {
                    coeffs.theta(xi, yi, &mut theta[..d])?;
                }
                let t_db: f64 = (0..d).map(|j| theta[j] * db[j]).sum();
                let t_sq: f64 = theta[..d].iter().map(|t| t * t).sum();
                let lz = prev[i] - t_db + 0.5 * t_sq * dt;
                if lz.abs() > LOG_Z_LIMIT {
                    return Err(Error::Overflow { particle: i, step: 0, log_z: lz });
                }
                Ok(lz)
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(next);
    }
    Ok(out)
}

/// Query grid on the first X coordinate between the 2.5% and 97.5% quantiles.
fn query_grid(xs: &[f64], d: usize, n_query: usize) -> Vec<f64> {
    let mut first: Vec<f64> = xs.iter().step_by(d).copied().collect();
    first.sort_by(|a, b| a.total_cmp(b));
    let lo = first[(0.025 * first.len() as f64) as usize];
    let hi = first[((0.975 * first.len() as f64) as usize).min(first.len() - 1)];
    (0..n_query).map(|i| lo + (hi - lo) * i as f64 / (n_query - 1).max(1) as f64).collect()
}

/// Kish effective sample size of the kernel weights at each query (direct sums).
fn kernel_ess(xs: &[f64], weights: Option<&[f64]>, spec: &MollifierSpec, query: &[f64]) -> Vec<f64> {
    query
        .par_iter()
        .map(|&q| {
            let (mut s1, mut s2) = (0.0, 0.0);
            for (i, &x) in xs.iter().enumerate() {
                let k = weights.map_or(1.0, |w| w[i]) * spec.eval(&[q - x]);
                s1 += k;
                s2 += k * k;
            }
            if s2 > 0.0 {
                s1 * s1 / s2
            } else {
                0.0
            }
        })
        .collect()
}

/// Settings shared by the Girsanov checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GirsanovCheckConfig {
    pub n_query: usize,
    pub bootstrap: usize,
    /// Minimum effective sample size for a query to count.
    pub min_ess: f64,
    pub n_se: f64,
}

impl Default for GirsanovCheckConfig {
    fn default() -> Self {
        Self {
            n_query: 31,
            bootstrap: 100,
            min_ess: 200.0,
            n_se: 3.0,
        }
    }
}

fn first_coordinate(v: &[f64], d: usize) -> Vec<f64> {
    v.iter().step_by(d).copied().collect()
}

/// Compares `E_P[tanh(Y_T) | X_T = x]` from a P-run with the weighted
/// estimate `E_Q[Z^-1 tanh(Y_T) | X] / E_Q[Z^-1 | X]` from a Q-run, on queries
/// with adequate effective sample size on both sides (d = 1). Also compares
/// the P-run X-marginal with the `Z^-1`-weighted Q-run X-marginal in `W1`.
pub fn weighted_conditional_check(p_run: &ConditionalRun, q_run: &ConditionalRun, check: &GirsanovCheckConfig, seed: u64) -> Result<VerificationReport> {
    let d = p_run.coeffs.dim;
    if d != 1 {
        return Err(Error::Dimension { expected: 1, got: d });
    }
    let (p, q) = (p_run.last(), q_run.last());
    let n_p = p.x.len();
    let n_q = q.x.len();
    let bw = p_run.bandwidth.unwrap_or_else(|| default_bandwidth(n_p, 1));
    let spec = MollifierSpec::gaussian(bw, 1);
    let theta_p: Vec<f64> = p.y.iter().map(|v| v.tanh()).collect();
    let theta_q: Vec<f64> = q.y.iter().map(|v| v.tanh()).collect();
    let w_q: Vec<f64> = q.log_z.iter().map(|l| (-l).exp()).collect();
    let query = query_grid(&p.x, 1, check.n_query);

    let est_p = GridSmoother::build(&p.x, &theta_p, 1, None, &spec)?.conditional(&query);
    let est_q = GridSmoother::build(&q.x, &theta_q, 1, Some(&w_q), &spec)?.conditional(&query);
    let se_p = bootstrap_se(n_p, check.bootstrap, seed, |c| {
        GridSmoother::build(&p.x, &theta_p, 1, Some(c), &spec).map(|g| g.conditional(&query).values).unwrap_or_default()
    });
    let se_q = bootstrap_se(n_q, check.bootstrap, seed ^ 0x5151, |c| {
        let w: Vec<f64> = c.iter().zip(&w_q).map(|(a, b)| a * b).collect();
        GridSmoother::build(&q.x, &theta_q, 1, Some(&w), &spec).map(|g| g.conditional(&query).values).unwrap_or_default()
    });
    let ess_p = kernel_ess(&p.x, None, &spec, &query);
    let ess_q = kernel_ess(&q.x, Some(&w_q), &spec, &query);

    let mut rep = VerificationReport::new("girsanov_conditional_identity");
    let mut worst: f64 = 0.0;
    let mut used = 0usize;
    for i in 0..query.len() {
        if ess_p[i] < check.min_ess || ess_q[i] < check.min_ess || est_p.degenerate[i] || est_q.degenerate[i] {
            continue;
        }
        used += 1;
        let diff = est_p.values[i] - est_q.values[i];
        let se = se_p[i].hypot(se_q[i]);
        worst = worst.max(diff.abs() / se);
        rep.push(Check::within_se(format!("query_{i}_x{:.3}", query[i]), diff, se, check.n_se, "girsanov-conditional-identity"));
    }
    rep.push(Check::one_sided("adequate_queries", -(used as f64), -1.0, 0.0, "plumbing"));

    // X-marginal: weighted Q-run resampled by weights vs P-run samples, via
    // the weighted quantile function
    let w1 = w1_weighted(&p.x, &q.x, &w_q);
    let w1_se = {
        let reps: Vec<f64> = (0..check.bootstrap as u64)
            .map(|r| {
                let mut rng = stream_rng(seed ^ 0x77, r, Channel::Bootstrap);
                let mut cp = vec![0.0; n_p];
                let mut cq = vec![0.0; n_q];
                for _ in 0..n_p {
                    cp[(uniform(&mut rng) * n_p as f64) as usize % n_p] += 1.0;
                }
                for _ in 0..n_q {
                    cq[(uniform(&mut rng) * n_q as f64) as usize % n_q] += 1.0;
                }
                let wq: Vec<f64> = cq.iter().zip(&w_q).map(|(a, b)| a * b).collect();
                w1_two_weighted(&p.x, &cp, &q.x, &wq)
            })
            .collect();
        // bootstrap RMS of the distance around the point estimate
        (reps.iter().map(|r| (r - w1).powi(2)).sum::<f64>() / reps.len() as f64).sqrt().max(reps.iter().sum::<f64>() / reps.len() as f64)
    };
    rep.push(Check::one_sided("x_marginal_w1", w1, check.n_se * w1_se, 0.0, "girsanov-conditional-identity").with_se(w1_se));
    rep.diag("worst_se_ratio", worst)
        .diag("adequate_queries", used as f64)
        .diag("bandwidth", bw)
        .diag("x_marginal_w1", w1);
    Ok(rep)
}

/// `W1` between an unweighted sample and a weighted sample.
pub fn w1_weighted(a: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    w1_two_weighted(a, &vec![1.0; a.len()], b, wb)
}

/// `W1 = int |F_a - F_b| dx` between two weighted samples.
pub fn w1_two_weighted(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let ta: f64 = wa.iter().sum();
    let tb: f64 = wb.iter().sum();
    let mut pts: Vec<(f64, f64)> = a
        .iter()
        .zip(wa)
        .map(|(&x, &w)| (x, w / ta))
        .chain(b.iter().zip(wb).map(|(&x, &w)| (x, -w / tb)))
        .collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut acc = 0.0;
    let mut f = 0.0;
    for w in pts.windows(2) {
        f += w[0].1;
        acc += f.abs() * (w[1].0 - w[0].0);
    }
    acc
}

/// Exponential-martingale checks on a P-run/Q-run pair, at every recorded time:
/// `E_P[Z_t] = 1` and `E_Q[Z_t^-1] = 1` within `n_se` standard errors, and the
/// conditional second-moment statistic `E_Q[Z^2|X] / E_Q[Z|X]^2` bounded by
/// `exp(3 T sup|sigma^-1 b|^2)` (d = 1 for the conditional statistic).
pub fn exp_mart_bound_check(p_run: &ConditionalRun, q_run: &ConditionalRun, check: &GirsanovCheckConfig, seed: u64) -> Result<VerificationReport> {
    let coeffs = &q_run.coeffs;
    let d = coeffs.dim;
    let t_final = q_run.config.t_final;
    let theta_sup = coeffs.theta_sup();
    let bound_sq = (3.0 * t_final * theta_sup * theta_sup).exp();
    let bound_lin = (3.0 * t_final * theta_sup).exp();
    let mut rep = VerificationReport::new("exponential_martingale");

    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    for s in &p_run.snapshots[1..] {
        let z: Vec<f64> = s.log_z.iter().map(|l| l.exp()).collect();
        let (m, se) = mean_se(&z);
        rep.push(Check::within_se(format!("p_mean_z_t{:.3}", s.time), m - 1.0, se.max(f64::MIN_POSITIVE), check.n_se, "exponential-martingale-moment"));
    }
    let mut literal_max: f64 = 0.0;
    let mut worst_stat: f64 = 1.0;
    let mut worst_particle: f64 = 1.0;
    for s in &q_run.snapshots[1..] {
        let zi: Vec<f64> = s.log_z.iter().map(|l| (-l).exp()).collect();
        let (m, se) = mean_se(&zi);
        rep.push(Check::within_se(format!("q_mean_inverse_z_t{:.3}", s.time), m - 1.0, se.max(f64::MIN_POSITIVE), check.n_se, "exponential-martingale-moment"));
        let z: Vec<f64> = s.log_z.iter().map(|l| l.exp()).collect();
        literal_max = literal_max.max(mean_se(&z).0);

        if d == 1 {
            let xs = first_coordinate(&s.x, d);
            let n = xs.len();
            let bw = q_run.bandwidth.unwrap_or_else(|| default_bandwidth(n, 1));
            let spec = MollifierSpec::gaussian(bw, 1);
            let m2: Vec<f64> = z.iter().flat_map(|&v| [v, v * v]).collect();
            let query = query_grid(&xs, 1, check.n_query);
            let ess = kernel_ess(&xs, None, &spec, &query);
            let stat = |w: Option<&[f64]>| -> Vec<f64> {
                let g = match GridSmoother::build(&xs, &m2, 2, w, &spec) {
                    Ok(g) => g,
                    Err(_) => return vec![],
                };
                let e = g.conditional(&query);
                (0..query.len()).map(|i| e.values[2 * i + 1] / e.values[2 * i].powi(2)).collect()
            };
            let point = stat(None);
            let se = bootstrap_se(n, check.bootstrap, seed ^ s.time.to_bits(), |c| stat(Some(c)));
            for i in 0..query.len() {
                if ess[i] < check.min_ess {
                    continue;
                }
                let slack = check.n_se * se[i] / point[i].max(1e-300);
                let name = format!("conditional_second_moment_t{:.3}_x{:.3}", s.time, query[i]);
                rep.push(Check::one_sided(name, point[i], bound_sq, slack, "exponential-martingale-moment").with_se(se[i]));
                worst_stat = worst_stat.max(point[i]);
            }
            // per-particle form, diagnostic only: E_Q[Z^2 | X_i] / Z_i^2
            let g = GridSmoother::build(&xs, &m2, 2, None, &spec)?;
            let mut out = [0.0; 2];
            for (i, &x) in xs.iter().enumerate() {
                if g.conditional_at(&[x], &mut out).is_some() {
                    worst_particle = worst_particle.max(out[1] / (z[i] * z[i]));
                }
            }
        }
    }
    rep.diag("bound_exp_3T_theta_sq", bound_sq)
        .diag("bound_exp_3T_theta", bound_lin)
        .diag("theta_sup", theta_sup)
        .diag("max_conditional_statistic", worst_stat)
        .diag("max_per_particle_statistic", worst_particle)
        .diag("max_q_mean_z", literal_max);
    Ok(rep)
}

/// Transfers the bound counters of a run into a report.
pub fn bound_transfer_report(runs: &[(&str, BoundCounters)]) -> VerificationReport {
    let mut rep = VerificationReport::new("estimator_bound_transfer");
    for (name, c) in runs {
        rep.push(Check::one_sided(format!("{name}_lambda_violations"), c.lambda_violations as f64, 0.0, 0.0, "plumbing"));
        rep.push(Check::one_sided(format!("{name}_gamma_violations"), c.gamma_violations as f64, 0.0, 0.0, "plumbing"));
        rep.diag(format!("{name}_lambda_checked"), c.lambda_checked as f64)
            .diag(format!("{name}_gamma_checked"), c.gamma_checked as f64)
            .diag(format!("{name}_degenerate"), c.degenerate as f64);
    }
    rep
}

/// Outcome of [`picard_iterate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardResult {
    /// `D_k = ||zeta^{k+1} - zeta^k||_c`, `k = 0..K-1`.
    pub distances: Vec<f64>,
    /// `exp` of the least-squares slope of `log D_k` above the noise floor.
    pub fitted_ratio: Option<f64>,
    /// Set when `D_k` grew three times in a row.
    pub no_contraction: bool,
    pub rate_c: f64,
    pub counters: BoundCounters,
    /// Final-time layers, `K + 1` arrays of `N x d`.
    pub final_layers: Vec<Vec<f64>>,
}

/// Picard iteration in the weighted path norm with frozen noise.
///
/// All `K + 1` layers advance in a single time sweep over the same `X` path
/// and Brownian increments: layer `k+1` is driven by conditional expectations
/// of `l(zeta^k)`, `g(zeta^k)` given `X`, with `zeta^0 = Y_0` held constant.
pub fn picard_iterate(coeffs: &CoefficientSet, law: &InitialLaw, cfg: &ConditionalConfig, layers: usize, rate_c: Option<f64>) -> Result<PicardResult> {
    let d = coeffs.dim;
    if coeffs.b.depends_on_y() {
        return Err(Error::Config("Picard iteration needs a drift that does not depend on y".into()));
    }
    if layers < 1 {
        return Err(Error::Domain {
            what: "layers",
            value: 0.0,
            domain: "[1, inf)".into(),
        });
    }
    let n = cfg.n_particles;
    let n_steps = cfg.n_steps();
    let dt = cfg.step();
    let sqrt_dt = dt.sqrt();
    let c = rate_c.unwrap_or_else(|| coeffs.default_picard_rate());
    let bandwidth = match cfg.estimator {
        EstimatorKind::Kernel { bandwidth, .. } => Some(bandwidth.unwrap_or_else(|| default_bandwidth(n, d))),
        EstimatorKind::Binned { .. } => None,
    };
    let (mut x, y0) = sample_initial(law, d, n, cfg.seed);
    let mut zeta: Vec<Vec<f64>> = vec![y0; layers + 1];
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut noise_b = ParticleStreams::new(cfg.seed, &ids, Channel::B, 0);
    let mut noise_w = ParticleStreams::new(cfg.seed, &ids, Channel::W, 0);
    let mut counters = BoundCounters::default();

    // running trapezoid of e^{-cs} |zeta^{k+1} - zeta^k|^2, summed over particles
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let mut integral = vec![0.0; layers];
    let mut prev_gap: Vec<f64> = (0..layers).map(|k| gap(&zeta[k + 1], &zeta[k])).collect();
    let mut zb = vec![0.0; n * d];
    let mut zw = vec![0.0; n * d];
    let mut scratch = (Vec::new(), Vec::new());
    let limits = bound_limits(coeffs);

    for step in 0..n_steps {
        let t = step as f64 * dt;
        for (z, streams) in [(&mut zb, &mut noise_b), (&mut zw, &mut noise_w)] {
            z.par_chunks_mut(d).zip(streams.streams_mut().par_iter_mut()).for_each(|(z, rng)| z.copy_from_slice(&next_normals(rng, d)[..d]));
        }
        let design = match (cfg.estimator, bandwidth) {
            (EstimatorKind::Kernel { shape, .. }, Some(b)) if !(coeffs.ell.is_constant() && coeffs.gamma.is_constant()) => {
                Some(FixedDesign::build(&x, None, &MollifierSpec { shape, bandwidth: b, dim: d })?)
            }
            _ => None,
        };
        // descending, so layer k is still at time t when layer k+1 moves;
        // zeta^0 stays at Y_0
        for k in (0..layers).rev() {
            let le = layer_estimates(coeffs, design.as_ref(), &cfg.estimator, bandwidth, &x, &zeta[k], &mut scratch.0, &mut scratch.1)?;
            let (width, out) = (le.width, &scratch.1);
            counters.degenerate += le.degenerate.len() as u64;
            if width == d {
                // constant g: one bound check covers every particle
                let mut c = BoundCounters::default();
                count_bounds_with(d, limits, &[&[0.0; 2][..d], &le.g_const[..d * d]].concat(), &mut c);
                let good = (n - le.degenerate.len()) as u64;
                counters.gamma_checked += c.gamma_checked * good;
                counters.gamma_violations += c.gamma_violations * good;
            }
            let target = &mut zeta[k + 1];
            let mut di = le.degenerate.iter().peekable();
            let (l_sup, g_sup) = limits;
            for i in 0..n {
                let row = &out[i * width..(i + 1) * width];
                let gam = if width == d { &le.g_const[..d * d] } else { &row[d..] };
                if di.peek() == Some(&&i) {
                    di.next();
                } else {
                    counters.lambda_checked += d as u64;
                    counters.lambda_violations += row[..d].iter().filter(|v| v.abs() > l_sup).count() as u64;
                    if width > d {
                        counters.gamma_checked += (d * d) as u64;
                        counters.gamma_violations += gam.iter().filter(|v| v.abs() > g_sup).count() as u64;
                    }
                }
                let w = &zw[i * d..(i + 1) * d];
                for j in 0..d {
                    let noise: f64 = (0..d).map(|m| gam[j * d + m] * w[m]).sum();
                    target[i * d + j] += row[j] * dt + sqrt_dt * noise;
                }
            }
        }
        // X moves with its own (y-independent) dynamics
        x.par_chunks_mut(d).zip(zb.par_chunks(d)).for_each(|(xi, z)| {
            let mut s = [0.0; 4];
            coeffs.sigma.eval(xi, &mut s);
            let mut bv = [0.0; 2];
            coeffs.b.eval(xi, &[0.0, 0.0][..d], &mut bv[..d]);
            let mut db = [0.0; 2];
            for j in 0..d {
                db[j] = sqrt_dt * z[j];
            }
            let mut sdb = [0.0; 2];
            mat_vec(&s, &db[..d], &mut sdb[..d]);
            for j in 0..d {
                xi[j] += bv[j] * dt + sdb[j];
            }
        });
        let t1 = t + dt;
        for k in 0..layers {
            let g = gap(&zeta[k + 1], &zeta[k]);
            integral[k] += 0.5 * dt * ((-c * t).exp() * prev_gap[k] + (-c * t1).exp() * g);
            prev_gap[k] = g;
        }
    }
    let distances: Vec<f64> = integral.iter().map(|s| (s / n as f64).sqrt()).collect();
    let (fitted_ratio, no_contraction) = fit_geometric(&distances);
    Ok(PicardResult {
        distances,
        fitted_ratio,
        no_contraction,
        rate_c: c,
        counters,
        final_layers: zeta,
    })
}

/// Estimates for one Picard layer, as rows of `out`.
struct LayerEstimates {
    /// Row width: `d` when `g` is constant (then `g_const` holds it), else `d + d^2`.
    width: usize,
    g_const: [f64; 4],
    degenerate: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn layer_estimates(
    coeffs: &CoefficientSet,
    design: Option<&FixedDesign>,
    kind: &EstimatorKind,
    bandwidth: Option<f64>,
    x: &[f64],
    y: &[f64],
    m: &mut Vec<f64>,
    out: &mut Vec<f64>,
) -> Result<LayerEstimates> {
    let d = coeffs.dim;
    let k_est = d + d * d;
    let n = x.len() / d;
    let Some(design) = design else {
        let e = build_estimator(coeffs, kind, bandwidth, x, y, None)?;
        out.resize(n * k_est, 0.0);
        let mut degenerate = Vec::new();
        for i in 0..n {
            if !estimate_at(&e, coeffs, &x[i * d..(i + 1) * d], &y[i * d..(i + 1) * d], &mut out[i * k_est..(i + 1) * k_est]) {
                degenerate.push(i);
            }
        }
        return Ok(LayerEstimates {
            width: k_est,
            g_const: [0.0; 4],
            degenerate,
        });
    };
    // constant g needs no regression
    let width = if coeffs.gamma.is_constant() { d } else { k_est };
    m.resize(n * width, 0.0);
    out.resize(n * width, 0.0);
    m.par_chunks_mut(width).zip(y.par_chunks(d)).for_each(|(mi, yi)| {
        coeffs.ell.eval(yi, &mut mi[..d]);
        if width > d {
            coeffs.gamma.eval(yi, &mut mi[d..]);
        }
    });
    design.conditional_at_design(m, width, out)?;
    let mut g_const = [0.0; 4];
    coeffs.gamma.eval(&y[..d], &mut g_const[..d * d]);
    Ok(LayerEstimates {
        width,
        g_const,
        degenerate: (0..n).filter(|&i| design.mass_at_design(i) < DENOM_FLOOR).collect(),
    })
}

/// Least-squares geometric ratio of `D_k` over the terms above the floor
/// `max(1e-12 D_0, 1e-14)`, and the three-consecutive-increases flag.
pub fn fit_geometric(d: &[f64]) -> (Option<f64>, bool) {
    let mut ups = 0;
    let mut flag = false;
    for w in d.windows(2) {
        if w[1] > w[0] {
            ups += 1;
            if ups >= 3 {
                flag = true;
            }
        } else {
            ups = 0;
        }
    }
    if d.is_empty() {
        return (None, flag);
    }
    let floor = (1e-12 * d[0]).max(1e-14);
    let pts: Vec<(f64, f64)> = d.iter().enumerate().take_while(|(_, &v)| v > floor).map(|(k, &v)| (k as f64, v.ln())).collect();
    if pts.len() < 2 {
        return (None, flag);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (Some((sxy / sxx).exp()), flag)
}

/// Max over recorded times of the mean `|Y^A - Y^B|` between two runs that
/// share noise and initial particles but differ in estimator.
pub fn max_mean_gap(a: &ConditionalRun, b: &ConditionalRun) -> f64 {
    a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(s, t)| s.y.iter().zip(&t.y).map(|(u, v)| (u - v).abs()).sum::<f64>() / s.y.len() as f64)
        .fold(0.0, f64::max)
}

/// Pathwise-uniqueness refinement study: kernel regression (bandwidth `b`) vs
/// binned regression (bin width `2b`) on identical noise, at `(N, b)` and
/// `(4N, b / 2^(1/5))`; the gap must shrink, judged by the median over seeds.
pub fn pathwise_uniqueness_check(coeffs: &CoefficientSet, law: &InitialLaw, base: &ConditionalConfig, seeds: &[u64]) -> Result<VerificationReport> {
    let mut rep = VerificationReport::new("pathwise_uniqueness");
    let level = |n: usize, b: f64, seed: u64| -> Result<f64> {
        let range = 5.0;
        let n_bins = ((2.0 * range) / (2.0 * b)).round().max(2.0) as usize;
        let kernel = ConditionalConfig {
            n_particles: n,
            seed,
            estimator: EstimatorKind::Kernel {
                shape: KernelShape::Gaussian,
                bandwidth: Some(b),
            },
            ..base.clone()
        };
        let binned = ConditionalConfig {
            estimator: EstimatorKind::Binned { n_bins, range },
            ..kernel.clone()
        };
        let a = simulate_conditional(coeffs, law, &kernel, Measure::P)?;
        let c = simulate_conditional(coeffs, law, &binned, Measure::P)?;
        Ok(max_mean_gap(&a, &c))
    };
    let n0 = base.n_particles;
    let b0 = match base.estimator {
        EstimatorKind::Kernel { bandwidth: Some(b), .. } => b,
        _ => default_bandwidth(n0, coeffs.dim),
    };
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for &s in seeds {
        coarse.push(level(n0, b0, s).map_err(|e| wrap(e, n0 as f64, s))?);
        fine.push(level(4 * n0, b0 / 2f64.powf(0.2), s).map_err(|e| wrap(e, 4.0 * n0 as f64, s))?);
    }
    let (mc, mf) = (median(&coarse), median(&fine));
    rep.push(Check::one_sided("gap_shrinks_under_refinement", mf, mc, 0.0, "plumbing"));
    rep.diag("median_gap_coarse", mc).diag("median_gap_fine", mf);
    Ok(rep)
}

fn wrap(e: Error, level: f64, seed: u64) -> Error {
    Error::Study {
        level,
        seed,
        source: Box::new(e),
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Smallest estimated X-density on `[-r, r]` at each recorded time (positivity
/// diagnostic for the lower density bound on compacts), d = 1.
pub fn density_floor(run: &ConditionalRun, r: f64) -> Result<Vec<f64>> {
    let d = run.coeffs.dim;
    run.snapshots
        .iter()
        .map(|s| {
            let xs = first_coordinate(&s.x, d);
            let spec = MollifierSpec::gaussian(default_bandwidth(xs.len(), 1), 1);
            let g = GridSmoother::build(&xs, &[], 0, None, &spec)?;
            Ok((0..=40).map(|i| g.density_at(&[-r + 2.0 * r * i as f64 / 40.0])).fold(f64::INFINITY, f64::min))
        })
        .collect()
}

/// Named coefficient presets.
pub fn preset(name: &str, dim: usize) -> Option<CoefficientSet> {
    let base = CoefficientSet {
        dim,
        b: DriftField::Zero,
        sigma: SigmaField::ScaledIdentity { s0: 1.0 },
        ell: EllField::Sin { scale: 0.5 },
        gamma: GammaField::ScaledIdentity { g0: 1.0 },
    };
    Some(match name {
        "picard" => base,
        "driftless_tanh" => CoefficientSet {
            ell: EllField::Tanh { scale: 1.0 },
            ..base
        },
        "constant_kernels" => CoefficientSet {
            ell: EllField::Constant { value: 0.3 },
            gamma: GammaField::ScaledIdentity { g0: 0.7 },
            ..base
        },
        "constant_drift" => CoefficientSet {
            b: DriftField::Constant { value: 0.5 },
            ell: EllField::Tanh { scale: 1.0 },
            ..base
        },
        "tanh_drift" => CoefficientSet {
            b: DriftField::TanhY { scale: 0.8 },
            ell: EllField::Tanh { scale: 1.0 },
            gamma: GammaField::Modulated { g0: 1.0, amp: 0.3 },
            ..base
        },
        "tanh_drift_modulated" => CoefficientSet {
            b: DriftField::TanhXY { scale: 0.5 },
            sigma: SigmaField::Modulated { s0: 1.0, amp: 0.3 },
            ell: EllField::AffineClamped { a: 0.5, c: 0.1, clip: 0.8 },
            gamma: GammaField::Modulated { g0: 1.0, amp: 0.2 },
            ..base
        },
        "kinetic" => CoefficientSet {
            b: DriftField::Kinetic,
            sigma: SigmaField::ScaledIdentity { s0: 0.0 },
            ell: EllField::Tanh { scale: 1.0 },
            ..base
        },
        _ => return None,
    })
}

pub const PRESET_NAMES: &[&str] = &[
    "picard",
    "driftless_tanh",
    "constant_kernels",
    "constant_drift",
    "tanh_drift",
    "tanh_drift_modulated",
    "kinetic",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::w1_samples;
    use approx::assert_abs_diff_eq;

    fn cfg(n: usize, t: f64, seed: u64) -> ConditionalConfig {
        ConditionalConfig {
            n_particles: n,
            dt: 0.01,
            t_final: t,
            seed,
            record_stride: 1,
            ..Default::default()
        }
    }

    #[test]
    fn small_matrix_inverse() {
        let m = [2.0, 1.0, -1.0, 2.0];
        let inv = invert_small(&m, 2).unwrap();
        let prod = [m[0] * inv[0] + m[1] * inv[2], m[0] * inv[1] + m[1] * inv[3], m[2] * inv[0] + m[3] * inv[2], m[2] * inv[1] + m[3] * inv[3]];
        for (p, e) in prod.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-15);
        }
        assert!(matches!(invert_small(&[1.0, 1.0, 1.0, 1.0 + 1e-12], 2), Err(Error::IllConditioned { .. })));
        assert!(invert_small(&[0.0, 0.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn presets_pass_spot_checks() {
        for name in PRESET_NAMES.iter().filter(|n| **n != "kinetic") {
            for d in [1, 2] {
                let c = preset(name, d).unwrap();
                let rep = c.spot_check(2000, 1);
                assert!(rep.all_pass(), "{name} d={d}: {:?}", rep.failures().collect::<Vec<_>>());
            }
        }
        let rotated = CoefficientSet {
            sigma: SigmaField::Rotated { s0: 1.0, skew: 2.0 },
            ..preset("tanh_drift", 2).unwrap()
        };
        assert!(rotated.spot_check(1000, 2).all_pass());
        assert!(!preset("kinetic", 1).unwrap().spot_check(100, 1).all_pass());
    }

    #[test]
    fn constant_kernels_give_drifted_brownian_y() {
        let c = preset("constant_kernels", 1).unwrap();
        let run = simulate_conditional(&c, &InitialLaw::standard(), &cfg(20_000, 0.5, 3), Measure::P).unwrap();
        let y0 = &run.snapshots[0].y;
        let yt = &run.last().y;
        let n = yt.len() as f64;
        let inc: Vec<f64> = yt.iter().zip(y0).map(|(a, b)| a - b).collect();
        let m = inc.iter().sum::<f64>() / n;
        // increment ~ N(0.3 T, 0.49 T)
        assert!((m - 0.15).abs() < 3.0 * (0.49f64 * 0.5 / n).sqrt(), "{m}");
        assert_eq!(run.counters.lambda_violations + run.counters.gamma_violations, 0);
    }

    #[test]
    fn no_drift_means_unit_weights() {
        let c = preset("driftless_tanh", 1).unwrap();
        let run = simulate_conditional(&c, &InitialLaw::standard(), &cfg(500, 0.1, 1), Measure::Q).unwrap();
        assert!(run.snapshots.iter().all(|s| s.log_z.iter().all(|&l| l == 0.0)));
    }

    #[test]
    fn recorded_weights_match_on_the_fly_weights() {
        let c = preset("tanh_drift_modulated", 1).unwrap();
        let run = simulate_conditional(&c, &InitialLaw::standard(), &cfg(500, 0.2, 5), Measure::Q).unwrap();
        let z = girsanov_weights(&run).unwrap();
        for (s, zs) in run.snapshots.iter().zip(&z) {
            for (a, b) in s.log_z.iter().zip(zs) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn constant_theta_log_weight_closed_form() {
        // sigma = I, b = 0.5: log Z_T = -0.5 B^_T + 0.125 T exactly
        let c = CoefficientSet {
            b: DriftField::Constant { value: 0.5 },
            ..preset("constant_kernels", 1).unwrap()
        };
        let run = simulate_conditional(&c, &InitialLaw::standard(), &cfg(1000, 0.4, 9), Measure::Q).unwrap();
        let (s0, st) = (&run.snapshots[0], run.last());
        for i in 0..1000 {
            let bhat = st.x[i] - s0.x[i];
            assert_abs_diff_eq!(st.log_z[i], -0.5 * bhat + 0.125 * 0.4, epsilon = 1e-12);
        }
        let zi: Vec<f64> = st.log_z.iter().map(|l| (-l).exp()).collect();
        let m = zi.iter().sum::<f64>() / 1000.0;
        let sd = (zi.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!((m - 1.0).abs() < 3.0 * sd / 1000f64.sqrt());
    }

    #[test]
    fn independent_start_gives_flat_conditional() {
        // X0 independent of Y0: Lambda^(x) = E[tanh(Y0)] everywhere
        let law = InitialLaw {
            y: InitialDensity::gaussian(0.4, 1.0),
            ..InitialLaw::standard()
        };
        let (x, y) = sample_initial(&law, 1, 50_000, 2);
        let m: Vec<f64> = y.iter().map(|v| v.tanh()).collect();
        let h = 1e-3;
        let exact: f64 = (0..20_000).map(|i| -10.0 + (i as f64 + 0.5) * h).map(|v: f64| v.tanh() * (-0.5 * (v - 0.4).powi(2)).exp() * h).sum::<f64>() / (2.0 * std::f64::consts::PI).sqrt();
        let spec = MollifierSpec::gaussian(default_bandwidth(50_000, 1), 1);
        let g = GridSmoother::build(&x, &m, 1, None, &spec).unwrap();
        let q = [-1.0, 0.0, 1.0];
        let est = g.conditional(&q);
        let se = bootstrap_se(50_000, 50, 1, |w| GridSmoother::build(&x, &m, 1, Some(w), &spec).unwrap().conditional(&q).values);
        for i in 0..3 {
            assert!((est.values[i] - exact).abs() < 4.0 * se[i], "{} vs {exact} (se {})", est.values[i], se[i]);
        }
    }

    #[test]
    fn identical_estimators_give_identical_paths() {
        let c = preset("driftless_tanh", 1).unwrap();
        let a = simulate_conditional(&c, &InitialLaw::standard(), &cfg(1000, 0.1, 4), Measure::P).unwrap();
        let b = simulate_conditional(&c, &InitialLaw::standard(), &cfg(1000, 0.1, 4), Measure::P).unwrap();
        assert_eq!(max_mean_gap(&a, &b), 0.0);
        let k = preset("constant_kernels", 1).unwrap();
        let binned = ConditionalConfig {
            estimator: EstimatorKind::Binned { n_bins: 20, range: 4.0 },
            ..cfg(1000, 0.1, 4)
        };
        let a = simulate_conditional(&k, &InitialLaw::standard(), &cfg(1000, 0.1, 4), Measure::P).unwrap();
        let b = simulate_conditional(&k, &InitialLaw::standard(), &binned, Measure::P).unwrap();
        assert!(max_mean_gap(&a, &b) < 1e-12);
    }

    #[test]
    fn picard_with_constant_kernels_stops_after_one_step() {
        let c = preset("constant_kernels", 1).unwrap();
        let r = picard_iterate(&c, &InitialLaw::standard(), &cfg(500, 0.5, 1), 3, Some(1.0)).unwrap();
        assert!(r.distances[0] > 0.1);
        assert!(r.distances[1] < 1e-12 && r.distances[2] < 1e-12);
        let one = picard_iterate(&c, &InitialLaw::standard(), &cfg(500, 0.5, 1), 1, Some(1.0)).unwrap();
        assert_eq!(one.distances.len(), 1);
        assert!(one.fitted_ratio.is_none());
    }

    #[test]
    fn picard_contracts_for_half_sine() {
        let c = preset("picard", 1).unwrap();
        let r = picard_iterate(&c, &InitialLaw::standard(), &cfg(5_000, 1.0, 2), 5, None).unwrap();
        assert_abs_diff_eq!(r.rate_c, 1.0, epsilon = 1e-15);
        assert!(r.fitted_ratio.unwrap() < 0.8, "{:?}", r.distances);
        assert!(!r.no_contraction);
        assert_eq!(r.counters.lambda_violations, 0);
    }

    #[test]
    fn geometric_fit() {
        let d: Vec<f64> = (0..6).map(|k| 0.5f64.powi(k)).collect();
        assert_abs_diff_eq!(fit_geometric(&d).0.unwrap(), 0.5, epsilon = 1e-12);
        assert!(fit_geometric(&[1.0, 2.0, 3.0, 4.0]).1);
        assert!(!fit_geometric(&[1.0, 2.0, 1.0, 4.0]).1);
    }

    #[test]
    fn weighted_w1_matches_unweighted_for_unit_weights() {
        let a = [0.0, 1.0, 2.0, 5.0];
        let b = [0.5, 1.5, 2.5, 3.0];
        assert_abs_diff_eq!(w1_weighted(&a, &b, &[1.0; 4]), w1_samples(&a, &b), epsilon = 1e-14);
    }

    #[test]
    fn overflow_guard_trips() {
        let c = CoefficientSet {
            b: DriftField::Constant { value: 40.0 },
            ..preset("constant_kernels", 1).unwrap()
        };
        let r = simulate_conditional(&c, &InitialLaw::standard(), &cfg(200, 1.0, 1), Measure::Q);
        assert!(matches!(r, Err(Error::Overflow { .. })));
    }
    #[test]
    fn picard_with_modulated_gamma_and_binned_estimator() {
        let c = CoefficientSet {
            b: DriftField::SinX { scale: 0.5 },
            gamma: GammaField::Modulated { g0: 1.0, amp: 0.2 },
            ..preset("picard", 1).unwrap()
        };
        let kernel = picard_iterate(&c, &InitialLaw::standard(), &cfg(3_000, 0.5, 2), 4, None).unwrap();
        let binned = ConditionalConfig {
            estimator: EstimatorKind::Binned { n_bins: 30, range: 4.0 },
            ..cfg(3_000, 0.5, 2)
        };
        let binned = picard_iterate(&c, &InitialLaw::standard(), &binned, 4, None).unwrap();
        for r in [&kernel, &binned] {
            assert!(r.fitted_ratio.unwrap() < 0.8, "{:?}", r.distances);
            assert_eq!(r.counters.lambda_violations + r.counters.gamma_violations, 0);
            assert_eq!(r.counters.gamma_checked, r.counters.lambda_checked);
        }
        assert!(matches!(
            picard_iterate(&preset("tanh_drift", 1).unwrap(), &InitialLaw::standard(), &cfg(200, 0.1, 1), 2, None),
            Err(Error::Config(_))
        ));
    }

}
