//! Scalar diffusion laws `r -> sigma(r)` and the coefficients derived from them.
//!
//! For a density-dependent diffusion `sigma(u)` the Fokker–Planck equation
//! `du/dt = 1/2 Lap(sigma^2(u) u)` has divergence form `1/2 div(alpha(u) grad u)`
//! with `alpha(r) = (sigma^2(r) r)' = 2 sigma'(r) sigma(r) r + sigma^2(r)`.
//! The regularized law `sigma_eps^2 = sigma^2 + eps` shifts `alpha` by `eps`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold separating strict positivity of `alpha` from mere nonnegativity.
pub const ETA_FLOOR: f64 = 1e-12;

/// Relative accuracy of the `Psi_eps` quadrature.
pub const PSI_REL_TOL: f64 = 1e-10;

/// Named diffusion presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaLaw {
    /// `sigma(r) = s0`.
    Constant { s0: f64 },
    /// `sigma(r) = sqrt(a + b r)`.
    SqrtAffine { a: f64, b: f64 },
    /// Porous-medium law `sigma^2(r) = r^(m-1)`, `m >= 1`.
    Pme { m: f64 },
    /// Tabulated `(r, sigma)` pairs with monotone cubic interpolation.
    Tabulated { table: MonotoneCubic },
}

impl SigmaLaw {
    pub fn tabulated_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Config(format!("{}: row needs two columns", path.display())))?
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            };
            // A non-numeric first row is a header.
            match (parse(0), parse(1)) {
                (Ok(r), Ok(s)) => {
                    xs.push(r);
                    ys.push(s);
                }
                _ if xs.is_empty() => continue,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        Ok(SigmaLaw::Tabulated {
            table: MonotoneCubic::new(xs, ys)?,
        })
    }
}

/// A diffusion law together with its evaluation ceiling `r_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub law: SigmaLaw,
    pub r_max: f64,
}

/// Outcome of the hypothesis spot-checks on a sampled range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub a1_ok: bool,
    pub a1_witness: Option<f64>,
    pub a2_ok: bool,
    /// Minimum of `alpha` over the samples.
    pub eta: f64,
    pub a2_witness: Option<f64>,
    pub a2weak_ok: bool,
    pub a2weak_witness: Option<f64>,
    pub strictly_increasing_ok: bool,
    pub monotone_witness: Option<f64>,
}

impl DiffusionModel {
    pub fn new(law: SigmaLaw, r_max: f64) -> Result<Self> {
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::Domain {
                what: "r_max",
                value: r_max,
                domain: "(0, inf)".into(),
            });
        }
        if let SigmaLaw::Pme { m } = law {
            if m < 1.0 {
                return Err(Error::Domain {
                    what: "pme exponent m",
                    value: m,
                    domain: "[1, inf)".into(),
                });
            }
        }
        Ok(Self { law, r_max })
    }

    /// Uses the default ceiling `2 * u0_max`.
    pub fn for_initial_max(law: SigmaLaw, u0_max: f64) -> Result<Self> {
        Self::new(law, 2.0 * u0_max)
    }

    pub fn constant(s0: f64, r_max: f64) -> Self {
        Self {
            law: SigmaLaw::Constant { s0 },
            r_max,
        }
    }

    pub fn sqrt_affine(a: f64, b: f64, r_max: f64) -> Self {
        Self {
            law: SigmaLaw::SqrtAffine { a, b },
            r_max,
        }
    }

    pub fn pme(m: f64, r_max: f64) -> Self {
        Self {
            law: SigmaLaw::Pme { m },
            r_max,
        }
    }

    fn check_domain(&self, r: f64) -> Result<()> {
        if r.is_nan() || r < 0.0 || r > self.r_max {
            return Err(Error::Domain {
                what: "r",
                value: r,
                domain: format!("[0, {}]", self.r_max),
            });
        }
        Ok(())
    }

    /// `sigma(r)`; no domain check.
    pub fn sigma(&self, r: f64) -> f64 {
        match &self.law {
            SigmaLaw::Constant { s0 } => *s0,
            SigmaLaw::SqrtAffine { a, b } => (a + b * r).max(0.0).sqrt(),
            SigmaLaw::Pme { m } => r.max(0.0).powf(0.5 * (m - 1.0)),
            SigmaLaw::Tabulated { table } => table.eval(r),
        }
    }

    /// `sigma^2(r)`; no domain check.
    pub fn sigma_sq(&self, r: f64) -> f64 {
        match &self.law {
            SigmaLaw::Constant { s0 } => s0 * s0,
            SigmaLaw::SqrtAffine { a, b } => (a + b * r).max(0.0),
            SigmaLaw::Pme { m } => r.max(0.0).powf(m - 1.0),
            SigmaLaw::Tabulated { table } => table.eval(r).powi(2),
        }
    }

    /// Whether `sigma'` has a closed form for this law.
    pub fn has_analytic_derivative(&self) -> bool {
        !matches!(self.law, SigmaLaw::Tabulated { .. })
    }

    /// `sigma'(r)`: closed form for presets, centered differences otherwise.
    pub fn sigma_prime(&self, r: f64) -> f64 {
        match &self.law {
            SigmaLaw::Constant { .. } => 0.0,
            SigmaLaw::SqrtAffine { a, b } => 0.5 * b / (a + b * r).sqrt(),
            SigmaLaw::Pme { m } => 0.5 * (m - 1.0) * r.powf(0.5 * (m - 3.0)),
            SigmaLaw::Tabulated { .. } => self.sigma_prime_fd(r),
        }
    }

    /// Finite-difference derivative with step `max(1e-6, 1e-6 r)`.
    pub fn sigma_prime_fd(&self, r: f64) -> f64 {
        let h = (1e-6 * r).max(1e-6);
        if r >= h {
            (self.sigma(r + h) - self.sigma(r - h)) / (2.0 * h)
        } else {
            (self.sigma(r + h) - self.sigma(r)) / h
        }
    }

    /// `alpha(r)` without a domain check, for inner loops whose arguments are
    /// already confined to `[0, r_max]`.
    pub fn alpha_unchecked(&self, r: f64) -> f64 {
        let r = r.max(0.0);
        match &self.law {
            SigmaLaw::Constant { s0 } => s0 * s0,
            SigmaLaw::SqrtAffine { a, b } => a + 2.0 * b * r,
            SigmaLaw::Pme { m } => m * r.powf(m - 1.0),
            SigmaLaw::Tabulated { table } => {
                let s = table.eval(r);
                2.0 * self.sigma_prime_fd(r) * s * r + s * s
            }
        }
    }

    /// `alpha(r) = 2 sigma'(r) sigma(r) r + sigma(r)^2` on `[0, r_max]`.
    pub fn alpha(&self, r: f64) -> Result<f64> {
        self.check_domain(r)?;
        Ok(self.alpha_unchecked(r))
    }

    pub fn alpha_eps(&self, r: f64, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Domain {
                what: "eps",
                value: eps,
                domain: "(0, inf)".into(),
            });
        }
        Ok(self.alpha(r)? + eps)
    }

    /// `Phi_eps(r) = (sigma^2(r) + eps) r`.
    pub fn phi_eps_unchecked(&self, r: f64, eps: f64) -> f64 {
        (self.sigma_sq(r) + eps) * r
    }

    /// `Psi_eps(r) = int_0^r Phi_eps` by adaptive quadrature.
    pub fn psi_eps_unchecked(&self, r: f64, eps: f64) -> f64 {
        adaptive_simpson(|t| self.phi_eps_unchecked(t, eps), 0.0, r, PSI_REL_TOL)
    }

    /// `(Phi_eps(r), Psi_eps(r))`. `eps = 0` is allowed here.
    pub fn phi_psi_eps(&self, r: f64, eps: f64) -> Result<(f64, f64)> {
        self.check_domain(r)?;
        if !(eps >= 0.0) {
            return Err(Error::Domain {
                what: "eps",
                value: eps,
                domain: "[0, inf)".into(),
            });
        }
        Ok((self.phi_eps_unchecked(r, eps), self.psi_eps_unchecked(r, eps)))
    }

    /// Largest sampled `alpha` on `[0, u_max]`.
    pub fn sup_alpha(&self, u_max: f64, n_samples: usize) -> f64 {
        let n = n_samples.max(2);
        (0..n)
            .map(|i| self.alpha_unchecked(u_max * i as f64 / (n - 1) as f64))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Spot-checks the structural hypotheses on `n_samples` uniform points of
    /// `[0, u_max]`.
    pub fn check_hypotheses(&self, n_samples: usize, u_max: f64) -> HypothesisReport {
        let n = n_samples.max(2);
        let u_max = u_max.min(self.r_max);
        let rs: Vec<f64> = (0..n).map(|i| u_max * i as f64 / (n - 1) as f64).collect();
        let alphas: Vec<f64> = rs.iter().map(|&r| self.alpha_unchecked(r)).collect();

        // sigma nonnegative and finite, sigma' finite away from r = 0
        let a1_witness = rs.iter().copied().find(|&r| {
            let s = self.sigma(r);
            let sp = if r > 0.0 { self.sigma_prime(r) } else { 0.0 };
            !(s >= 0.0 && s.is_finite() && sp.is_finite())
        });

        let (mut eta, mut eta_at) = (f64::INFINITY, 0.0);
        for (&r, &a) in rs.iter().zip(&alphas) {
            if a < eta {
                eta = a;
                eta_at = r;
            }
        }
        let a2_ok = eta > ETA_FLOOR;
        let a2weak_ok = eta >= -ETA_FLOOR;
        let monotone_witness = alphas
            .windows(2)
            .zip(&rs[1..])
            .find(|(w, _)| !(w[1] > w[0]))
            .map(|(_, &r)| r);

        HypothesisReport {
            a1_ok: a1_witness.is_none(),
            a1_witness,
            a2_ok,
            eta,
            a2_witness: (!a2_ok).then_some(eta_at),
            a2weak_ok,
            a2weak_witness: (!a2weak_ok).then_some(eta_at),
            strictly_increasing_ok: monotone_witness.is_none(),
            monotone_witness,
        }
    }
}

/// Adaptive Simpson quadrature with relative tolerance `rel_tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let tol = (rel_tol * whole.abs()).max(1e-300);
    simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
///
/// Values outside the table are clamped to the end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Config("tabulated sigma needs at least two (r, sigma) rows".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("tabulated r column must be strictly increasing".into()));
        }
        let n = xs.len();
        let secants: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for i in 1..n - 1 {
            slopes[i] = if secants[i - 1] * secants[i] <= 0.0 {
                0.0
            } else {
                0.5 * (secants[i - 1] + secants[i])
            };
        }
        for i in 0..n - 1 {
            if secants[i] == 0.0 {
                slopes[i] = 0.0;
                slopes[i + 1] = 0.0;
                continue;
            }
            let a = slopes[i] / secants[i];
            let b = slopes[i + 1] / secants[i];
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                slopes[i] = tau * a * secants[i];
                slopes[i + 1] = tau * b * secants[i];
            }
        }
        Ok(Self { xs, ys, slopes })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }
}
